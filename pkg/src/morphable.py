"""
Linear 3D morphable face model.

Holds the model (mean shape + orthonormal identity/expression bases + mesh),
the parameter types, shape synthesis, cross-identity adaptation and the
synthetic model/sequence generator that stands in for real scans and videos.

Shapes are flat vectors s = [x1, y1, z1, ..., xN, yN, zN]. All arrays kept by
the model and sequences are float32-representable, so a save/load round trip
through the array container is exact.
"""

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .config import SynthConfig
from .container import save_arrays, load_arrays
from .errors import ShapeError, DataError
from .workers import parallel_map
from . import rasterizer


MIN_SEQUENCE_FRAMES = 3


def _f32(array) -> np.ndarray:
    """Round through float32 and keep float64 for computation."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)


# -----------------------------------------------------------------------------
# Types
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape, identity/expression bases and the triangle mesh."""

    mean_shape: np.ndarray          # (3N,)
    identity_basis: np.ndarray      # (3N, n_id)
    expression_basis: np.ndarray    # (3N, n_exp)
    triangles: np.ndarray           # (F, 3) vertex indices
    mouth_vertex_indices: np.ndarray

    def __post_init__(self):
        self.validate()

    @property
    def N(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.expression_basis.shape[1]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self, tol: float = 1e-5) -> None:
        """
        Check the model invariants.

        Raises:
            ShapeError: On inconsistent dimensions.
            DataError: On non-orthonormal bases or bad indices.
        """
        n3 = self.mean_shape.shape[0]
        if self.mean_shape.ndim != 1 or n3 % 3 != 0:
            raise ShapeError(f"mean_shape must be a flat 3N vector, got shape {self.mean_shape.shape}")
        for name in ("identity_basis", "expression_basis"):
            basis = getattr(self, name)
            if basis.ndim != 2 or basis.shape[0] != n3:
                raise ShapeError(f"{name} must be (3N, n) with 3N={n3}, got {basis.shape}")
            gram = basis.T @ basis
            err = np.abs(gram - np.eye(basis.shape[1])).max()
            if err > tol:
                raise DataError(f"{name} columns are not orthonormal (max Gram error {err:.2e})")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ShapeError(f"triangles must be (F, 3), got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.N):
            raise DataError(f"triangle index outside [0, {self.N})")
        mouth = self.mouth_vertex_indices
        if mouth.size == 0:
            raise DataError("mouth_vertex_indices must not be empty")
        if mouth.min() < 0 or mouth.max() >= self.N:
            raise DataError(f"mouth vertex index outside [0, {self.N})")

    @cached_property
    def vertices(self) -> np.ndarray:
        """Mean shape as (N, 3) points."""
        return self.mean_shape.reshape(-1, 3)

    @cached_property
    def color_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean-shape bounding box expanded by 5% per axis (lo, hi)."""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        pad = np.maximum(0.05 * (hi - lo), 1e-3)
        return lo - pad, hi + pad

    @cached_property
    def semantic_colors(self) -> np.ndarray:
        """
        Face-map color of every triangle: its mean-shape center normalized by
        color_box, so every channel lies in (0, 1). Depends only on the
        triangle, never on pose or identity.
        """
        centers = self.vertices[self.triangles].mean(axis=1)
        lo, hi = self.color_box
        colors = (centers - lo) / (hi - lo)
        return colors.astype(np.float32)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "mean_shape": self.mean_shape,
            "identity_basis": self.identity_basis,
            "expression_basis": self.expression_basis,
            "triangles": self.triangles,
            "mouth_vertex_indices": self.mouth_vertex_indices,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MorphableModel":
        return cls(
            mean_shape=arrays["mean_shape"].astype(np.float64),
            identity_basis=arrays["identity_basis"].astype(np.float64),
            expression_basis=arrays["expression_basis"].astype(np.float64),
            triangles=arrays["triangles"].astype(np.int64),
            mouth_vertex_indices=arrays["mouth_vertex_indices"].astype(np.int64),
        )

    def save(self, path: str | Path) -> Path:
        return save_arrays(path, self.to_arrays(), attrs={"kind": "morphable_model",
                                                          "fingerprint": model_fingerprint(self)})

    @classmethod
    def load(cls, path: str | Path) -> "MorphableModel":
        bundle = load_arrays(path)
        if bundle.attrs.get("kind") != "morphable_model":
            raise DataError(f"Not a morphable model container: {path}")
        return cls.from_arrays(bundle.arrays)


@dataclass(frozen=True)
class ShapeParams:
    """Identity and expression coefficients."""
    identity: np.ndarray    # (n_id,)
    expression: np.ndarray  # (n_exp,)

    def __post_init__(self):
        object.__setattr__(self, "identity", np.asarray(self.identity, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "expression", np.asarray(self.expression, dtype=np.float64).reshape(-1))
        if not (np.isfinite(self.identity).all() and np.isfinite(self.expression).all()):
            raise ShapeError("ShapeParams entries must be finite")

    def check(self, model: MorphableModel) -> None:
        """
        Raises:
            ShapeError: If dimensions don't match the model.
        """
        if self.identity.shape[0] != model.n_id or self.expression.shape[0] != model.n_exp:
            raise ShapeError(
                f"Parameter shape mismatch: got identity {self.identity.shape[0]}, "
                f"expression {self.expression.shape[0]}; model expects {model.n_id}, {model.n_exp}"
            )


@dataclass(frozen=True)
class CameraParams:
    """Orthographic camera: axis-angle rotation, 2D translation, scale."""
    rotation: np.ndarray     # (3,) axis-angle, radians
    translation: np.ndarray  # (2,) image units ([-1, 1] spans the image)
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(2))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ShapeError(f"Camera scale must be > 0, got {self.scale}")
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ShapeError("Camera parameters must be finite")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix."""
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def to_vector(self) -> np.ndarray:
        """[rx, ry, rz, tx, ty, log(scale)] for optimizers."""
        return np.concatenate([self.rotation, self.translation, [math.log(self.scale)]])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "CameraParams":
        return cls(rotation=vec[:3], translation=vec[3:5], scale=math.exp(vec[5]))

    @classmethod
    def identity(cls) -> "CameraParams":
        return cls(rotation=np.zeros(3), translation=np.zeros(2), scale=1.0)


@dataclass(frozen=True)
class FaceShape:
    """A synthesized face: flat vertex vector of length 3N."""
    vertices: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3)


# -----------------------------------------------------------------------------
# Shape synthesis
# -----------------------------------------------------------------------------

def synthesize_shape(model: MorphableModel, params: ShapeParams) -> FaceShape:
    """
    Compute s = mean + U_id @ p_id + U_exp @ p_exp.

    Raises:
        ShapeError: If params don't match the model dimensions.
    """
    params.check(model)
    vertices = (
        model.mean_shape
        + model.identity_basis @ params.identity
        + model.expression_basis @ params.expression
    )
    return FaceShape(vertices=vertices)


def adapt_identity(source: ShapeParams, driver: ShapeParams) -> ShapeParams:
    """
    Keep the source's identity, take the driver's expression.

    Raises:
        ShapeError: If the two parameter sets have different dimensions.
    """
    if source.identity.shape != driver.identity.shape or source.expression.shape != driver.expression.shape:
        raise ShapeError(
            f"Cannot adapt identity across parameter sizes "
            f"{source.identity.shape[0]}/{source.expression.shape[0]} and "
            f"{driver.identity.shape[0]}/{driver.expression.shape[0]}"
        )
    return ShapeParams(identity=source.identity, expression=driver.expression)


def model_fingerprint(model: MorphableModel) -> str:
    """SHA-1 over the model arrays as stored (float32/int32)."""
    digest = hashlib.sha1()
    for name, array in sorted(model.to_arrays().items()):
        digest.update(name.encode("utf-8"))
        dtype = np.float32 if np.issubdtype(array.dtype, np.floating) else np.int32
        digest.update(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return digest.hexdigest()


# -----------------------------------------------------------------------------
# Synthetic model
# -----------------------------------------------------------------------------

def _grid_layout(N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Row-major grid with ceil(sqrt(N)) columns; the last row may be partial.

    Returns:
        (u, v, triangles) with u, v in [-1, 1] (v = +1 is the top row).
    """
    cols = math.ceil(math.sqrt(N))
    rows = math.ceil(N / cols)
    index = np.arange(N)
    row, col = index // cols, index % cols
    u = -1.0 + 2.0 * col / (cols - 1)
    v = 1.0 - 2.0 * row / max(rows - 1, 1)

    triangles = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a, b = i * cols + j, i * cols + j + 1
            c, d = (i + 1) * cols + j, (i + 1) * cols + j + 1
            if c < N:
                triangles.append((a, b, c))
            if d < N:
                triangles.append((b, d, c))
    return u, v, np.asarray(triangles, dtype=np.int64)


def _smooth_fields(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, count: int) -> np.ndarray:
    """Random low-frequency 3D displacement fields, one per column (3N, count)."""
    freqs = [(a, b) for a in range(4) for b in range(4)]
    funcs = np.stack([np.cos(np.pi * a * (u + 1) / 2) * np.cos(np.pi * b * (v + 1) / 2) for a, b in freqs], axis=1)
    columns = []
    for _ in range(count):
        coeffs = rng.normal(size=(len(freqs), 3)) / (1.0 + np.arange(len(freqs)))[:, None]
        field = funcs @ coeffs + 0.05 * rng.normal(size=(u.shape[0], 3))
        columns.append(field.reshape(-1))
    return np.stack(columns, axis=1)


def _orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Reduced QR with signs fixed so each column keeps its input direction."""
    q, r = np.linalg.qr(matrix)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def make_synthetic_model(seed: int, N: int = 300, n_id: int = 8, n_exp: int = 8) -> MorphableModel:
    """
    Build a deterministic face-like morphable model.

    Layout: vertices on a row-major grid (ceil(sqrt(N)) columns, u across,
    v top-to-bottom) lifted into a dome with a nose bump; two triangles per
    grid cell. The mouth region is |u| < 0.4, -0.75 < v < -0.3. The first
    expression column is a jaw-opening field (lower-lip vertices move down),
    the rest are mouth-weighted smooth random fields; identity columns are
    smooth random fields. Each basis is orthonormalized by QR.

    Args:
        seed: RNG seed; same seed gives bitwise-identical models.
        N: Vertex count (>= 4).
        n_id: Identity basis size (>= 1).
        n_exp: Expression basis size (>= 1).

    Raises:
        ShapeError: On infeasible dimensions.
    """
    if N < 4 or n_id < 1 or n_exp < 1 or 3 * N < n_id + n_exp:
        raise ShapeError(f"Infeasible model dimensions N={N}, n_id={n_id}, n_exp={n_exp}")

    rng = np.random.default_rng(seed)
    u, v, triangles = _grid_layout(N)

    x = 0.8 * u
    y = v
    z = 0.5 * np.sqrt(np.maximum(0.0, 1.0 - 0.6 * (u ** 2 + v ** 2)))
    z = z + 0.2 * np.exp(-(u ** 2 + (v - 0.05) ** 2) / 0.04)  # nose
    points = np.stack([x, y, z], axis=1)
    points -= points.mean(axis=0)

    mouth = np.flatnonzero((np.abs(u) < 0.4) & (v > -0.75) & (v < -0.3))
    if mouth.size == 0:
        mouth = np.array([int(np.argmin(u ** 2 + (v + 0.5) ** 2))])

    identity = _orthonormalize(_smooth_fields(rng, u, v, n_id))

    mouth_weight = np.exp(-(u ** 2 / 0.3 + (v + 0.5) ** 2 / 0.08)) + 0.15
    expr = _smooth_fields(rng, u, v, n_exp) * np.repeat(mouth_weight, 3)[:, None]
    jaw = np.zeros((N, 3))
    jaw[:, 1] = -np.exp(-(u ** 2 / 0.2 + (v + 0.6) ** 2 / 0.05)) * (v < -0.45)
    jaw[:, 2] = 0.2 * jaw[:, 1]
    if np.abs(jaw).sum() > 0:
        expr[:, 0] = jaw.reshape(-1) + 0.01 * expr[:, 0]
    expression = _orthonormalize(expr)

    return MorphableModel(
        mean_shape=_f32(points.reshape(-1)),
        identity_basis=_f32(identity),
        expression_basis=_f32(expression),
        triangles=triangles,
        mouth_vertex_indices=mouth.astype(np.int64),
    )


# -----------------------------------------------------------------------------
# Synthetic sequences
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticSequence:
    """A synthetic talking-head clip with its generating parameters."""

    identity: np.ndarray      # (n_id,) source identity
    expressions: np.ndarray   # (T, n_exp)
    rotations: np.ndarray     # (T, 3)
    translations: np.ndarray  # (T, 2)
    scales: np.ndarray        # (T,)
    audio: np.ndarray         # (T, samples_per_part) float32
    sample_rate: int
    frames: np.ndarray        # (T, H, W, 3) float32 in [-1, 1]
    face_maps: np.ndarray     # (T, H, W, 3) float32
    palette: np.ndarray       # (F, 3) per-triangle appearance in [-1, 1]
    background: np.ndarray    # (3,)
    reference_index: int
    seed: int
    model_fingerprint: str

    def __post_init__(self):
        T = self.T
        lengths = {
            "expressions": self.expressions.shape[0],
            "rotations": self.rotations.shape[0],
            "translations": self.translations.shape[0],
            "scales": self.scales.shape[0],
            "audio": self.audio.shape[0],
            "frames": self.frames.shape[0],
            "face_maps": self.face_maps.shape[0],
        }
        bad = {k: n for k, n in lengths.items() if n != T}
        if bad:
            raise ShapeError(f"Per-frame arrays disagree on length T={T}: {bad}")
        if not 0 <= self.reference_index < T:
            raise ShapeError(f"reference_index {self.reference_index} outside [0, {T})")

    @property
    def T(self) -> int:
        return int(self.expressions.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.frames.shape[1])

    def shape_params(self, t: int) -> ShapeParams:
        return ShapeParams(identity=self.identity, expression=self.expressions[t])

    def camera(self, t: int) -> CameraParams:
        return CameraParams(rotation=self.rotations[t], translation=self.translations[t], scale=self.scales[t])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "identity": self.identity,
            "expressions": self.expressions,
            "rotations": self.rotations,
            "translations": self.translations,
            "scales": self.scales,
            "audio": self.audio,
            "frames": self.frames,
            "face_maps": self.face_maps,
            "palette": self.palette,
            "background": self.background,
        }

    def save(self, path: str | Path) -> Path:
        attrs = {
            "kind": "synthetic_sequence",
            "sample_rate": int(self.sample_rate),
            "reference_index": int(self.reference_index),
            "seed": int(self.seed),
            "model_fingerprint": self.model_fingerprint,
        }
        return save_arrays(path, self.to_arrays(), attrs=attrs)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSequence":
        bundle = load_arrays(path)
        if bundle.attrs.get("kind") != "synthetic_sequence":
            raise DataError(f"Not a synthetic sequence container: {path}")
        a = bundle.arrays
        return cls(
            identity=a["identity"].astype(np.float64),
            expressions=a["expressions"].astype(np.float64),
            rotations=a["rotations"].astype(np.float64),
            translations=a["translations"].astype(np.float64),
            scales=a["scales"].astype(np.float64),
            audio=a["audio"],
            sample_rate=int(bundle.attrs["sample_rate"]),
            frames=a["frames"],
            face_maps=a["face_maps"],
            palette=a["palette"],
            background=a["background"],
            reference_index=int(bundle.attrs["reference_index"]),
            seed=int(bundle.attrs["seed"]),
            model_fingerprint=str(bundle.attrs["model_fingerprint"]),
        )


def _smooth_walk(
    rng: np.random.Generator,
    start: np.ndarray,
    T: int,
    step: float,
    limit: float,
    smoothing: float = 0.7,
) -> np.ndarray:
    """
    Band-limited random walk: AR(1)-filtered Gaussian increments, each
    clipped to [-step, step], positions clipped to [-limit, limit].
    """
    path = np.empty((T,) + start.shape)
    path[0] = np.clip(start, -limit, limit)
    velocity = np.zeros_like(start)
    for t in range(1, T):
        velocity = smoothing * velocity + (1.0 - smoothing) * rng.normal(scale=2.0 * step, size=start.shape)
        delta = np.clip(velocity, -step, step)
        path[t] = np.clip(path[t - 1] + delta, -limit, limit)
    return path


def _appearance(rng: np.random.Generator, model: MorphableModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle albedo (smooth over the mean shape, darker lips) and background."""
    centers = model.vertices[model.triangles].mean(axis=1)
    skin = rng.uniform([0.3, 0.0, -0.3], [0.8, 0.4, 0.1])
    freq = rng.uniform(1.5, 3.5, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    variation = 0.15 * np.sin(centers @ freq + phase)
    palette = skin + variation

    mouth = np.isin(model.triangles, model.mouth_vertex_indices).all(axis=1)
    lips = np.array([0.5, -0.5, -0.4])
    palette[mouth] = 0.5 * palette[mouth] + 0.5 * lips

    background = rng.uniform(-0.8, 0.8, size=3)
    background[0] = min(background[0], skin[0] - 0.5)  # keep the face separable
    return np.clip(palette, -1, 1).astype(np.float32), np.clip(background, -1, 1).astype(np.float32)


def _synthetic_audio(
    rng: np.random.Generator,
    expressions: np.ndarray,
    clip: float,
    sample_rate: int,
    samples_per_part: int,
) -> np.ndarray:
    """
    Sinusoid-mixture speech stand-in. The envelope follows the mouth-opening
    coefficient (expression column 0), so louder parts go with wider mouths.
    """
    T = expressions.shape[0]
    n = T * samples_per_part
    time = np.arange(n) / sample_rate

    opening = np.clip(expressions[:, 0], 0.0, clip) / clip
    frame_amp = 0.05 + 0.6 * opening
    # Linear ramp between frame amplitudes
    centers = (np.arange(T) + 0.5) * samples_per_part
    envelope = np.interp(np.arange(n), centers, frame_amp)

    f0 = rng.uniform(100.0, 160.0)
    formant = rng.uniform(500.0, 900.0)
    voice = sum(np.sin(2 * np.pi * f0 * h * time + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 5))
    voice = voice + 0.5 * np.sin(2 * np.pi * formant * time) * np.interp(np.arange(n), centers, opening)
    signal = envelope * voice / 2.5 + 0.01 * rng.normal(size=n)
    return signal.reshape(T, samples_per_part).astype(np.float32)


def make_synthetic_sequence(
    model: MorphableModel,
    seed: int,
    T: int,
    config: SynthConfig | None = None,
    threads: int = 1,
) -> SyntheticSequence:
    """
    Generate a deterministic synthetic clip.

    Expression and camera parameters follow band-limited random walks
    (see _smooth_walk); expression coefficients stay within
    +-config.expression_clip, per-axis rotation steps within
    config.rotation_step. Each frame gets an audio part of
    sample_rate / fps samples whose loudness tracks mouth opening. Frames
    and face maps are rendered by the rasterizer.

    Args:
        model: Morphable model to draw shapes from.
        seed: RNG seed; same seed gives an identical sequence.
        T: Frame count (>= 3).
        config: Walk/audio/resolution settings.
        threads: Parallel lanes for frame rendering.

    Raises:
        ShapeError: If T < 3.
    """
    if T < MIN_SEQUENCE_FRAMES:
        raise ShapeError(f"Sequences need at least {MIN_SEQUENCE_FRAMES} frames, got T={T}")
    config = config or SynthConfig()
    rng = np.random.default_rng(seed)
    res = config.resolution

    identity = _f32(np.clip(rng.normal(scale=2.0, size=model.n_id), -4.0, 4.0))
    start_expr = rng.normal(scale=0.8, size=model.n_exp)
    expressions = _f32(_smooth_walk(rng, start_expr, T, config.expression_step, config.expression_clip))
    rotations = _f32(_smooth_walk(rng, rng.normal(scale=0.1, size=3), T, config.rotation_step, config.rotation_limit))
    translations = _f32(_smooth_walk(rng, np.zeros(2), T, config.translation_step, 0.1))
    jitter = _smooth_walk(rng, np.zeros(1), T, config.scale_jitter / 4, config.scale_jitter)[:, 0]
    scales = _f32(config.scale * (1.0 + jitter))

    audio = _synthetic_audio(rng, expressions, config.expression_clip, config.sample_rate, config.samples_per_part)
    palette, background = _appearance(rng, model)
    reference_index = int(rng.integers(T))

    def render(t: int) -> tuple[np.ndarray, np.ndarray]:
        shape = synthesize_shape(model, ShapeParams(identity, expressions[t]))
        camera = CameraParams(rotations[t], translations[t], scales[t])
        mask, face_map = rasterizer.rasterize(shape, camera, model, res, res)
        frame = rasterizer.shade(mask, palette, background)
        return frame, face_map

    rendered = parallel_map(render, range(T), threads)
    frames = np.stack([r[0] for r in rendered])
    face_maps = np.stack([r[1] for r in rendered])

    return SyntheticSequence(
        identity=identity,
        expressions=expressions,
        rotations=rotations,
        translations=translations,
        scales=scales,
        audio=audio,
        sample_rate=config.sample_rate,
        frames=frames,
        face_maps=face_maps,
        palette=palette,
        background=background,
        reference_index=reference_index,
        seed=seed,
        model_fingerprint=model_fingerprint(model),
    )
