"""
Reenactment pipeline.

preprocess: adapt the driver's expressions to the source identity, render
the driving face maps with the driver's cameras and the reference map from
the source's own parameters.
reenact: run the generator over a sliding window of k+1 driving maps with
per-frame audio features.
export_frames: write numbered 8-bit PNGs, the maps/params container and a
provenance manifest.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from PIL import Image

from .audio import build_extractors, extract_sequence, parts_from_array
from .container import save_arrays
from .errors import CheckpointMismatchError, DataError, ModelMismatchError, ShapeError
from .morphable import (
    CameraParams, MorphableModel, ShapeParams, SyntheticSequence, adapt_identity,
    model_fingerprint, synthesize_shape,
)
from .networks import GeneratorInput
from .rasterizer import rasterize, render_landmarks
from .training import Checkpoint, driving_indices
from .workers import parallel_map


@dataclass(frozen=True)
class SourceBundle:
    """The person to animate: one image plus its known parameters."""
    image: np.ndarray          # (H, W, 3) in [-1, 1]
    params: ShapeParams
    camera: CameraParams
    model_fingerprint: str

    @classmethod
    def from_sequence(cls, sequence: SyntheticSequence, index: int | None = None) -> "SourceBundle":
        """Use frame `index` (default: the sequence's reference frame) as the source."""
        index = sequence.reference_index if index is None else index
        return cls(
            image=sequence.frames[index],
            params=sequence.shape_params(index),
            camera=sequence.camera(index),
            model_fingerprint=sequence.model_fingerprint,
        )


@dataclass(frozen=True)
class DriverClip:
    """Per-frame driving parameters and audio."""
    identity: np.ndarray
    expressions: np.ndarray    # (T, n_exp)
    cameras: tuple[CameraParams, ...]
    audio: np.ndarray          # (T, samples_per_part)
    sample_rate: int
    resolution: int
    model_fingerprint: str

    @property
    def T(self) -> int:
        return int(self.expressions.shape[0])

    def params(self, t: int) -> ShapeParams:
        return ShapeParams(identity=self.identity, expression=self.expressions[t])

    def head(self, n: int) -> "DriverClip":
        """First n frames."""
        return DriverClip(
            self.identity, self.expressions[:n], self.cameras[:n], self.audio[:n],
            self.sample_rate, self.resolution, self.model_fingerprint,
        )

    @classmethod
    def from_sequence(cls, sequence: SyntheticSequence) -> "DriverClip":
        return cls(
            identity=sequence.identity,
            expressions=sequence.expressions,
            cameras=tuple(sequence.camera(t) for t in range(sequence.T)),
            audio=sequence.audio,
            sample_rate=sequence.sample_rate,
            resolution=sequence.resolution,
            model_fingerprint=sequence.model_fingerprint,
        )


@dataclass
class Preprocessed:
    reference_image: np.ndarray    # (H, W, 3)
    reference_map: np.ndarray      # (H, W, 3)
    driving_maps: np.ndarray       # (T, H, W, 3)
    adapted: list[ShapeParams]
    cameras: tuple[CameraParams, ...]


def preprocess(
    source: SourceBundle,
    driver: DriverClip,
    model: MorphableModel,
    landmarks: bool = False,
    threads: int = 1,
) -> Preprocessed:
    """
    Build the generator's conditioning for cross- or self-reenactment.

    Each driving map renders adapt_identity(source, driver_t) with the
    driver's camera c_t unchanged. The reference map renders the source's
    own parameters and camera.

    Raises:
        ModelMismatchError: If source, driver and model disagree.
        ShapeError: If the source image size differs from the driver's.
    """
    fingerprint = model_fingerprint(model)
    if source.model_fingerprint != fingerprint or driver.model_fingerprint != fingerprint:
        raise ModelMismatchError("Source and driver must come from the same morphable model")
    res = driver.resolution
    if source.image.shape != (res, res, 3):
        raise ShapeError(f"Source image {source.image.shape} does not match driver resolution {res}")
    if driver.T < 1:
        raise DataError("Driver has no frames")

    def render(params: ShapeParams, camera: CameraParams) -> np.ndarray:
        shape = synthesize_shape(model, params)
        if landmarks:
            return render_landmarks(shape, camera, model, res, res)
        return rasterize(shape, camera, model, res, res)[1]

    adapted = [adapt_identity(source.params, driver.params(t)) for t in range(driver.T)]
    maps = parallel_map(lambda t: render(adapted[t], driver.cameras[t]), range(driver.T), threads)
    return Preprocessed(
        reference_image=source.image.astype(np.float32),
        reference_map=render(source.params, source.camera),
        driving_maps=np.stack(maps),
        adapted=adapted,
        cameras=driver.cameras,
    )


def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(image, -1, 0), dtype=np.float32))[None]


@dataclass
class ReenactResult:
    frames: np.ndarray        # (T, H, W, 3) in [-1, 1]
    preprocessed: Preprocessed


def reenact(
    checkpoint: Checkpoint,
    source: SourceBundle,
    driver: DriverClip,
    model: MorphableModel,
    threads: int = 1,
) -> ReenactResult:
    """
    Generate one output frame per driver frame.

    Raises:
        CheckpointMismatchError: If the checkpoint's resolution doesn't
            match the driver (checked before any frame is produced).
    """
    config = checkpoint.config
    arch = checkpoint.models.arch
    if driver.resolution != arch.resolution:
        raise CheckpointMismatchError(
            f"Checkpoint preset '{arch.name}' renders {arch.resolution}px, driver is {driver.resolution}px"
        )

    prep = preprocess(source, driver, model, landmarks=(config.ablation == "landmarks"), threads=threads)
    parts = parts_from_array(driver.audio, driver.sample_rate)
    audio = extract_sequence(parts, config.audio_half_window, build_extractors(config.extractor), threads)

    generator = checkpoint.models.generator
    generator.eval()
    reference_image = _chw(prep.reference_image)
    reference_map = _chw(prep.reference_map)

    def generate(t: int) -> np.ndarray:
        stack = np.concatenate([prep.driving_maps[i] for i in driving_indices(t, arch.k)], axis=-1)
        inp = GeneratorInput(
            driving_maps=_chw(stack),
            reference_image=reference_image,
            reference_map=reference_map,
            audio=torch.from_numpy(audio[t:t + 1]),
        )
        with torch.no_grad():
            frame = generator(inp).frame[0]
        return frame.permute(1, 2, 0).cpu().numpy()

    frames = parallel_map(generate, range(driver.T), threads)
    return ReenactResult(frames=np.stack(frames).astype(np.float32), preprocessed=prep)


# -----------------------------------------------------------------------------
# Export
# -----------------------------------------------------------------------------

def to_uint8(image: np.ndarray, value_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Map an image from value_range to 0..255."""
    lo, hi = value_range
    scaled = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: str | Path, value_range: tuple[float, float] = (-1.0, 1.0)) -> Path:
    path = Path(path)
    array = image if image.dtype == np.uint8 else to_uint8(image, value_range)
    Image.fromarray(array).save(path, format="PNG")
    return path


def file_digest(path: str | Path) -> str:
    """Short SHA-1 of a file, used as checkpoint id."""
    digest = hashlib.sha1()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:12]


def export_frames(
    result: ReenactResult,
    out_dir: str | Path,
    manifest: dict[str, Any],
) -> Path:
    """
    Write frame_XXXX.png (8-bit), maps.hgar (driving maps, adapted
    expressions, cameras) and manifest.yaml into out_dir.

    Returns:
        The manifest path.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e

    for t, frame in enumerate(result.frames):
        save_png(frame, out_dir / f"frame_{t:04d}.png")

    prep = result.preprocessed
    save_arrays(out_dir / "maps.hgar", {
        "driving_maps": prep.driving_maps,
        "reference_map": prep.reference_map,
        "expressions": np.stack([p.expression for p in prep.adapted]),
        "identity": prep.adapted[0].identity,
        "rotations": np.stack([c.rotation for c in prep.cameras]),
        "translations": np.stack([c.translation for c in prep.cameras]),
        "scales": np.array([c.scale for c in prep.cameras]),
    }, attrs={"kind": "reenactment_maps"})

    manifest = {**manifest, "frames": int(len(result.frames))}
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
    return path
