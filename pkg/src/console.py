"""
Console output helpers.

Colored, tagged status lines for the CLI and long-running jobs.
Falls back to plain text when colorama is not installed.
"""

import sys

# Try to import colorama for colored output
try:
    from colorama import init, Fore, Style
    init()  # Initialize colorama for Windows
    COLORS_AVAILABLE = True
except ImportError:
    COLORS_AVAILABLE = False


_debug = False


# Color helper functions (fallback to no color if colorama not available)
def cyan(text: str) -> str:
    return f"{Fore.CYAN}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


def green(text: str) -> str:
    return f"{Fore.GREEN}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


def red(text: str) -> str:
    return f"{Fore.RED}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


def yellow(text: str) -> str:
    return f"{Fore.YELLOW}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


def dim(text: str) -> str:
    return f"{Style.DIM}{text}{Style.RESET_ALL}" if COLORS_AVAILABLE else text


def set_debug(enabled: bool) -> None:
    """Toggle debug output."""
    global _debug
    _debug = enabled


def is_debug() -> bool:
    return _debug


def banner(title: str) -> None:
    """Print a framed section header."""
    print("=" * 60)
    print(title.upper())
    print("=" * 60)


def info(message: str) -> None:
    print(message)


def ok(message: str) -> None:
    print(green(f"[OK] {message}"))


def warn(message: str) -> None:
    print(yellow(f"[WARN] {message}"))


def error(message: str) -> None:
    print(red(f"[ERROR] {message}"), file=sys.stderr)


def step(message: str) -> None:
    print(cyan("[STEP] ") + message)


def debug(message: str) -> None:
    """Print only when debug mode is on."""
    if _debug:
        print(dim(f"  [DEBUG] {message}"))
