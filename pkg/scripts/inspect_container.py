"""
List the attributes and arrays of a HeadGAN Lab container file.

Usage:
    python scripts/inspect_container.py data/model.hgar
    python scripts/inspect_container.py runs/desk/final.hgar G/
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np

from src.container import load_arrays
from src.errors import LabError


def describe(name: str, array: np.ndarray) -> str:
    shape = "x".join(str(d) for d in array.shape) or "scalar"
    if array.size == 0:
        return f"  {name:<48} {array.dtype} {shape}"
    return (
        f"  {name:<48} {array.dtype} {shape:<16} "
        f"min={array.min():.4g} max={array.max():.4g} mean={array.mean():.4g}"
    )


def main():
    if len(sys.argv) < 2:
        print("Usage: python inspect_container.py <file.hgar> [name prefix]")
        sys.exit(1)

    path = sys.argv[1]
    prefix = sys.argv[2] if len(sys.argv) > 2 else ""
    try:
        bundle = load_arrays(path)
    except LabError as e:
        print(f"[ERROR] {e}")
        sys.exit(e.exit_code)

    print(f"FILE: {path}")
    print("Attributes:")
    for key, value in sorted(bundle.attrs.items()):
        text = str(value)
        if "\n" in text:
            text = text.splitlines()[0] + " ..."
        print(f"  {key}: {text}")

    names = [n for n in bundle.arrays if n.startswith(prefix)]
    total = sum(bundle.arrays[n].size for n in names)
    print(f"Arrays ({len(names)}, {total} values):")
    for name in names:
        print(describe(name, bundle.arrays[name]))


if __name__ == "__main__":
    main()
