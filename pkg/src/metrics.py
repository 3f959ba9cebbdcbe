"""
Evaluation metrics: CSIM, FID, FVD and AED.

Embeddings come from frozen seeded conv encoders that stand in for
pretrained identity/image/video backbones, so absolute values are only
comparable between runs of this lab.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeError
from .fitting import FitResult, fit_frame
from .inference import DriverClip, SourceBundle, reenact
from .morphable import CameraParams, MorphableModel
from .training import Checkpoint, SequenceDataset
from .workers import parallel_map


METRIC_NAMES = ("csim", "fid", "fvd", "aed")
COVARIANCE_EPS = 1e-6
CLIP_LENGTH = 4

Extractor = Callable[[np.ndarray], np.ndarray]


# -----------------------------------------------------------------------------
# Embedders
# -----------------------------------------------------------------------------

class FrameEmbedder(nn.Module):
    """Seeded random conv encoder + global average/max pooling, L2-normalized."""

    def __init__(self, seed: int = 4321, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.dim = 2 * widths[-1]
        self.requires_grad_(False)
        self.eval()

    def features(self, frames: np.ndarray) -> np.ndarray:
        """(N, H, W, 3) -> (N, dim) pooled features (not normalized)."""
        x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(frames, -1, 1), dtype=np.float32))
        with torch.no_grad():
            for conv in self.convs:
                x = F.leaky_relu(conv(x), 0.2)
            pooled = torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)
        return pooled.double().numpy()

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        feats = self.features(frames)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)


def embed_frames(frames: np.ndarray, embedder: FrameEmbedder) -> np.ndarray:
    """Unit-norm embedding per frame."""
    return embedder(np.asarray(frames))


def embed_clips(frames: np.ndarray, embedder: FrameEmbedder, length: int = CLIP_LENGTH) -> np.ndarray:
    """
    Clip features: frame features averaged over every window of `length`
    consecutive frames (stride 1). Shorter sequences give one clip.
    """
    feats = embedder.features(np.asarray(frames))
    T = feats.shape[0]
    if T == 0:
        raise DataError("Cannot embed an empty clip")
    length = min(length, T)
    return np.stack([feats[s:s + length].mean(axis=0) for s in range(T - length + 1)])


def fvd_clip_length(lengths: list[int], length: int = CLIP_LENGTH) -> int:
    """
    Longest window, at most `length`, that still gives two clips over all
    sequences. Very short evaluations fall back to shorter overlapping windows.

    Raises:
        DataError: If there are fewer than 2 frames overall.
    """
    if sum(lengths) < 2:
        raise DataError(f"FVD needs at least 2 frames in total, got {sum(lengths)}")
    while length > 1 and sum(max(T - length + 1, 1) for T in lengths) < 2:
        length -= 1
    return length


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------

def csim(real_frames: np.ndarray, fake_frames: np.ndarray, extractor: Extractor) -> float:
    """
    Mean cosine similarity between embeddings of corresponding frames.

    Raises:
        DataError: On empty input.
        ShapeError: If the lists differ in length.
    """
    if len(real_frames) == 0 or len(fake_frames) == 0:
        raise DataError("CSIM needs at least one frame pair")
    if len(real_frames) != len(fake_frames):
        raise ShapeError(f"CSIM needs paired frames, got {len(real_frames)} and {len(fake_frames)}")
    a = np.asarray(extractor(real_frames), dtype=np.float64)
    b = np.asarray(extractor(fake_frames), dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return float(np.mean(np.sum(a * b, axis=1)))


def matrix_sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative eigenvalues clip to 0."""
    sym = (matrix + matrix.T) / 2.0
    values, vectors = scipy.linalg.eigh(sym)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise DataError(f"Need at least 2 feature vectors, got {features.shape[0]}")
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False))
    if not np.all(np.isfinite(sigma)):
        raise DataError("Non-finite covariance")
    return mu, sigma + COVARIANCE_EPS * np.eye(sigma.shape[0])


def frechet_distance(features_real: np.ndarray, features_fake: np.ndarray) -> float:
    """
    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the cross term
    computed as Tr sqrt(S1^(1/2) S2 S1^(1/2)) so it stays symmetric PSD.

    Raises:
        DataError: On too few samples or non-finite covariance.
        ShapeError: If feature dimensions differ.
    """
    mu1, s1 = _statistics(features_real)
    mu2, s2 = _statistics(features_fake)
    if mu1.shape != mu2.shape:
        raise ShapeError(f"Feature dimensions differ: {mu1.shape[0]} vs {mu2.shape[0]}")
    root1 = matrix_sqrt_psd(s1)
    cross = root1 @ s2 @ root1
    cross_values = scipy.linalg.eigvalsh((cross + cross.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.clip(cross_values, 0.0, None))))
    distance = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt)
    return max(distance, 0.0)


def aed(driver_expressions: np.ndarray, recovered_expressions: np.ndarray) -> float:
    """
    Mean over frames of the L1 distance between driver and recovered
    expression coefficients.

    Raises:
        DataError: On empty input.
        ShapeError: If the arrays differ in shape.
    """
    a = np.asarray(driver_expressions, dtype=np.float64)
    b = np.asarray(recovered_expressions, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("AED needs at least one frame")
    if a.shape != b.shape:
        raise ShapeError(f"AED inputs differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b).sum(axis=-1)))


def recover_expressions(
    frames: np.ndarray,
    model: MorphableModel,
    identity: np.ndarray,
    palette: np.ndarray,
    background: np.ndarray,
    cameras: list[CameraParams],
    threads: int = 1,
    max_evals: int = 1500,
) -> list[FitResult]:
    """
    Fit expression coefficients to generated frames. Each fit starts from a
    neutral expression and the frame's driving camera.
    """
    neutral = np.zeros(model.n_exp)
    return parallel_map(
        lambda t: fit_frame(frames[t], model, identity, palette, background, (neutral, cameras[t]), max_evals),
        range(len(frames)),
        threads,
    )


# -----------------------------------------------------------------------------
# Report
# -----------------------------------------------------------------------------

def check_metric_names(names: list[str]) -> None:
    """
    Raises:
        DataError: If a name is not in METRIC_NAMES or none is given.
    """
    if not names:
        raise DataError(f"No metrics requested. Available: {', '.join(METRIC_NAMES)}")
    unknown = [n for n in names if n not in METRIC_NAMES]
    if unknown:
        raise DataError(f"Unknown metric(s) {', '.join(unknown)}. Available: {', '.join(METRIC_NAMES)}")


@dataclass
class EvalClip:
    """One evaluated clip: real and generated frames, plus what AED needs."""
    real: np.ndarray
    fake: np.ndarray
    driver_expressions: np.ndarray | None = None
    recovered_expressions: np.ndarray | None = None


def compute_metrics(
    clips: list[EvalClip],
    names: list[str],
    embedder: FrameEmbedder | None = None,
) -> dict[str, float]:
    """
    Compute the requested metrics over all clips.

    Raises:
        DataError: If no clips are given or a metric is unknown.
    """
    if not clips:
        raise DataError("Nothing to evaluate")
    check_metric_names(names)
    embedder = embedder or FrameEmbedder()
    real = np.concatenate([c.real for c in clips])
    fake = np.concatenate([c.fake for c in clips])

    report: dict[str, float] = {}
    for name in names:
        if name == "csim":
            report[name] = csim(real, fake, embedder)
        elif name == "fid":
            report[name] = frechet_distance(embed_frames(real, embedder), embed_frames(fake, embedder))
        elif name == "fvd":
            length = fvd_clip_length([len(c.real) for c in clips])
            report[name] = frechet_distance(
                np.concatenate([embed_clips(c.real, embedder, length) for c in clips]),
                np.concatenate([embed_clips(c.fake, embedder, length) for c in clips]),
            )
        elif name == "aed":
            if any(c.driver_expressions is None or c.recovered_expressions is None for c in clips):
                raise DataError("AED needs driver and recovered expressions for every clip")
            report[name] = aed(
                np.concatenate([c.driver_expressions for c in clips]),
                np.concatenate([c.recovered_expressions for c in clips]),
            )
    return report


COMPARABILITY_NOTE = (
    "Desk-scale stand-in embedders and synthetic data: values are only comparable "
    "between runs of this lab, not with published benchmark tables."
)


@dataclass
class EvalReport:
    metrics: dict[str, float]
    sequences: int
    frames: int
    checkpoint: str

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "sequences": self.sequences,
            "frames": self.frames,
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "note": COMPARABILITY_NOTE,
        }


def evaluate(
    checkpoint: Checkpoint,
    dataset: SequenceDataset,
    names: list[str],
    threads: int = 1,
    fit_max_evals: int = 1500,
) -> EvalReport:
    """
    Self-reenact every dataset sequence from its reference frame and score
    the generated frames against the real ones.

    Args:
        checkpoint: Checkpoint to evaluate.
        dataset: Evaluation sequences.
        names: Subset of METRIC_NAMES; the report lists exactly these.
        threads: Worker threads for rendering, generation and fitting.
        fit_max_evals: Fitter budget per frame for AED.
    """
    check_metric_names(names)
    clips = []
    for item in dataset.items:
        seq = item.sequence
        result = reenact(
            checkpoint, SourceBundle.from_sequence(seq), DriverClip.from_sequence(seq), dataset.model, threads
        )
        clip = EvalClip(real=seq.frames, fake=result.frames)
        if "aed" in names:
            fits = recover_expressions(
                result.frames, dataset.model, seq.identity, seq.palette, seq.background,
                list(result.preprocessed.cameras), threads, fit_max_evals,
            )
            clip.driver_expressions = np.stack([p.expression for p in result.preprocessed.adapted])
            clip.recovered_expressions = np.stack([f.expression for f in fits])
        clips.append(clip)

    return EvalReport(
        metrics=compute_metrics(clips, names),
        sequences=len(clips),
        frames=sum(len(c.real) for c in clips),
        checkpoint=str(checkpoint.path),
    )
