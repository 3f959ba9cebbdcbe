"""
Preview images: frame grids and loss curves.

Grids tile 8-bit frames row-major; the loss plot draws one line per loss
name from a training loss log. Both write PNG files.
"""

import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")  # file output only
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from . import console
from .container import load_arrays
from .errors import DataError, NothingToPlotError, ShapeError
from .inference import save_png, to_uint8
from .training import LOSS_LOG_NAME, read_loss_log


GRID_NAME = "grid.png"
LOSS_PLOT_NAME = "losses.png"

# Fixed PNG metadata so identical inputs give identical files
_PNG_METADATA = {"Software": None}


def image_grid(images: list[np.ndarray], cols: int, pad: int = 1) -> np.ndarray:
    """
    Tile equally sized uint8 (H, W, 3) images into ceil(N/cols) rows.

    Raises:
        NothingToPlotError: If there are no images.
        ShapeError: If sizes differ or cols < 1.
    """
    if not images:
        raise NothingToPlotError("Nothing to plot: no images")
    if cols < 1:
        raise ShapeError(f"Grid needs at least one column, got {cols}")
    H, W, C = images[0].shape
    for i, image in enumerate(images):
        if image.shape != (H, W, C):
            raise ShapeError(f"Image {i} has shape {image.shape}, expected {(H, W, C)}")

    cols = min(cols, len(images))
    rows = math.ceil(len(images) / cols)
    grid = np.zeros((rows * H + (rows - 1) * pad, cols * W + (cols - 1) * pad, C), dtype=np.uint8)
    for i, image in enumerate(images):
        r, c = divmod(i, cols)
        y, x = r * (H + pad), c * (W + pad)
        grid[y:y + H, x:x + W] = image
    return grid


def load_frames(path: str | Path) -> list[np.ndarray]:
    """
    Frames from a directory of frame_*.png files or a sequence container.

    Returns:
        uint8 (H, W, 3) images, possibly empty.
    """
    path = Path(path)
    if path.is_dir():
        return [np.asarray(Image.open(p).convert("RGB")) for p in sorted(path.glob("frame_*.png"))]
    if path.suffix == ".hgar":
        bundle = load_arrays(path)
        if "frames" not in bundle:
            return []
        return [to_uint8(frame) for frame in bundle["frames"]]
    return []


def plot_losses(records: list[dict], out_path: str | Path) -> Path:
    """
    One line per loss name against step.

    Raises:
        NothingToPlotError: If the log has no records.
    """
    if not records:
        raise NothingToPlotError("Nothing to plot: the loss log is empty")
    series: dict[str, tuple[list[int], list[float]]] = {}
    for r in records:
        steps, values = series.setdefault(r["name"], ([], []))
        steps.append(r["step"])
        values.append(r["value"])

    fig, ax = plt.subplots(figsize=(8, 5))
    for name in sorted(series):
        steps, values = series[name]
        ax.plot(steps, values, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=7, ncol=2)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return out_path


def write_previews(in_path: str | Path, out_dir: str | Path, cols: int = 4) -> list[Path]:
    """
    Write a frame grid and/or a loss plot for `in_path`.

    in_path may be a reenactment output directory (frame_*.png), a
    training output directory (losses.jsonl), a loss log file or a
    sequence container.

    Raises:
        DataError: If in_path doesn't exist.
        NothingToPlotError: If it holds neither frames nor loss records.
    """
    in_path = Path(in_path)
    if not in_path.exists():
        raise DataError(f"Preview input not found: {in_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    frames = load_frames(in_path)
    if frames:
        written.append(save_png(image_grid(frames, cols), out_dir / GRID_NAME))
        console.debug(f"Grid of {len(frames)} frames, {cols} columns")

    log_path = in_path / LOSS_LOG_NAME if in_path.is_dir() else in_path
    if log_path.suffix == ".jsonl" and log_path.exists():
        written.append(plot_losses(read_loss_log(log_path), out_dir / LOSS_PLOT_NAME))

    if not written:
        raise NothingToPlotError(f"Nothing to plot in {in_path}")
    return written
