"""
Per-frame audio features.

The audio track is split into one part per video frame. The feature for
frame t is built from a window of 2L parts around t: 84 low-level values
computed over the whole window, followed by 27 character-logit values per
part, giving 84 + 2L*27 values (300 for L = 4).

Extractors are pluggable. The `toy` backend is deterministic and needs no
pretrained weights.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .config import EXTRACTORS, RESERVED_EXTRACTORS
from .errors import ConfigError, ShapeError
from .workers import parallel_map


LOW_LEVEL_DIM = 84
LOGIT_DIM = 27
N_FILTERS = 16
SUB_WINDOWS = 4
_EPS = 1e-8


def feature_dim(L: int) -> int:
    """Length of the combined feature for half window L."""
    return LOW_LEVEL_DIM + 2 * L * LOGIT_DIM


@dataclass(frozen=True)
class AudioPart:
    """Samples for one frame-aligned slice of audio."""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if self.samples.size == 0:
            raise ShapeError("AudioPart must contain at least one sample")
        if self.sample_rate <= 0:
            raise ShapeError(f"Sample rate must be > 0, got {self.sample_rate}")


@dataclass(frozen=True)
class AudioFeature:
    """Low-level (84) and logit (2L*27) parts of a frame's audio feature."""
    low_level: np.ndarray
    logits: np.ndarray

    @cached_property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.low_level, self.logits]).astype(np.float32)


def parts_from_array(audio: np.ndarray, sample_rate: int) -> list[AudioPart]:
    """Wrap a (T, samples_per_part) array as AudioParts."""
    return [AudioPart(row, sample_rate) for row in audio]


# -----------------------------------------------------------------------------
# Extractors
# -----------------------------------------------------------------------------

class LowLevelExtractor(ABC):
    """Window of parts -> fixed-length low-level descriptor."""
    dim = LOW_LEVEL_DIM

    @abstractmethod
    def __call__(self, parts: list[AudioPart]) -> np.ndarray:
        ...


class LogitExtractor(ABC):
    """One part -> character logits."""
    dim = LOGIT_DIM

    @abstractmethod
    def __call__(self, part: AudioPart) -> np.ndarray:
        ...


def _filterbank(n_fft_bins: int, n_filters: int = N_FILTERS) -> np.ndarray:
    """Triangular filters evenly spaced over [0, Nyquist], shape (n_filters, n_fft_bins)."""
    edges = np.linspace(0, n_fft_bins - 1, n_filters + 2)
    bins = np.arange(n_fft_bins)
    bank = np.zeros((n_filters, n_fft_bins))
    for i in range(n_filters):
        left, center, right = edges[i], edges[i + 1], edges[i + 2]
        rise = (bins - left) / max(center - left, _EPS)
        fall = (right - bins) / max(right - center, _EPS)
        bank[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return bank


def _power_spectrum(samples: np.ndarray) -> np.ndarray:
    windowed = samples * np.hanning(samples.size) if samples.size > 1 else samples
    return np.abs(np.fft.rfft(windowed)) ** 2 / max(samples.size, 1)


def log_filterbank(samples: np.ndarray) -> np.ndarray:
    """16 log triangular-filterbank energies."""
    power = _power_spectrum(samples)
    return np.log(_filterbank(power.size) @ power + _EPS)


def _frame_descriptor(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """21 values: energy, ZCR, centroid, spread, 16 log filterbank energies, spectral entropy."""
    energy = float(np.mean(samples ** 2))
    signs = np.signbit(samples)
    zcr = float(np.mean(signs[1:] != signs[:-1])) if samples.size > 1 else 0.0

    power = _power_spectrum(samples)
    freqs = np.linspace(0.0, 1.0, power.size)  # fraction of Nyquist
    total = power.sum()
    if total > _EPS:
        prob = power / total
        centroid = float(freqs @ prob)
        spread = float(np.sqrt(((freqs - centroid) ** 2) @ prob))
        entropy = float(-(prob * np.log(prob + _EPS)).sum() / np.log(max(power.size, 2)))
    else:
        centroid = spread = entropy = 0.0
    fb = np.log(_filterbank(power.size) @ power + _EPS)
    return np.concatenate([[energy, zcr, centroid, spread], fb, [entropy]])


class ToyLowLevelExtractor(LowLevelExtractor):
    """
    Short-time descriptors over SUB_WINDOWS equal slices of the window:
    4 slices x 21 values = 84. The first coordinate is the energy of the
    first slice.
    """

    def __call__(self, parts: list[AudioPart]) -> np.ndarray:
        samples = np.concatenate([p.samples for p in parts])
        rate = parts[0].sample_rate
        slices = np.array_split(samples, SUB_WINDOWS)
        return np.concatenate([_frame_descriptor(s, rate) for s in slices])


class ToyLogitExtractor(LogitExtractor):
    """Softmax of a fixed seeded linear map over a part's log filterbank."""

    def __init__(self, seed: int = 27):
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(scale=1.0 / np.sqrt(N_FILTERS), size=(LOGIT_DIM, N_FILTERS))
        self.bias = rng.normal(scale=0.1, size=LOGIT_DIM)

    def __call__(self, part: AudioPart) -> np.ndarray:
        z = self.weights @ (log_filterbank(part.samples) / 10.0) + self.bias
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass(frozen=True)
class Extractors:
    low_level: LowLevelExtractor
    logit: LogitExtractor


def build_extractors(name: str = "toy") -> Extractors:
    """
    Create the extractor pair for a config name.

    Raises:
        ConfigError: For reserved or unknown names.
    """
    if name in RESERVED_EXTRACTORS:
        raise ConfigError(f"Extractor '{name}' is reserved and not available in this build")
    if name not in EXTRACTORS:
        raise ConfigError(f"Unknown extractor '{name}'. Available: {', '.join(EXTRACTORS)}")
    return Extractors(low_level=ToyLowLevelExtractor(), logit=ToyLogitExtractor())


# -----------------------------------------------------------------------------
# Windowing and assembly
# -----------------------------------------------------------------------------

def window_indices(t: int, T: int, L: int) -> list[int]:
    """Indices t-L .. t+L-1 clamped to [0, T-1] (2L entries)."""
    if L < 1:
        raise ShapeError(f"Half window L must be >= 1, got {L}")
    if T < 1:
        raise ShapeError("Cannot window an empty part list")
    return [min(max(i, 0), T - 1) for i in range(t - L, t + L)]


def window(parts: list[AudioPart], t: int, L: int) -> list[AudioPart]:
    """
    The 2L parts around frame t (L before it, then t and L-1 after),
    with out-of-range indices clamped to the sequence edges.

    Raises:
        ShapeError: If parts is empty or L < 1.
    """
    if not parts:
        raise ShapeError("Cannot window an empty part list")
    return [parts[i] for i in window_indices(t, len(parts), L)]


def extract(parts: list[AudioPart], t: int, L: int, extractors: Extractors) -> AudioFeature:
    """
    Assemble the audio feature for frame t.

    Raises:
        ShapeError: If an extractor returns the wrong number of values.
    """
    win = window(parts, t, L)
    low = np.asarray(extractors.low_level(win), dtype=np.float64).reshape(-1)
    if low.shape[0] != LOW_LEVEL_DIM:
        raise ShapeError(f"Low-level extractor returned {low.shape[0]} values, expected {LOW_LEVEL_DIM}")
    logits = []
    for part in win:
        out = np.asarray(extractors.logit(part), dtype=np.float64).reshape(-1)
        if out.shape[0] != LOGIT_DIM:
            raise ShapeError(f"Logit extractor returned {out.shape[0]} values, expected {LOGIT_DIM}")
        logits.append(out)
    return AudioFeature(low_level=low, logits=np.concatenate(logits))


def extract_sequence(
    parts: list[AudioPart],
    L: int,
    extractors: Extractors,
    threads: int = 1,
) -> np.ndarray:
    """Features for every frame as a (T, 84 + 2L*27) float32 array."""
    features = parallel_map(lambda t: extract(parts, t, L, extractors).combined, range(len(parts)), threads)
    return np.stack(features).astype(np.float32)
