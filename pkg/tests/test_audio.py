"""
Tests for audio windowing and feature extraction.

Run directly:
    python tests/test_audio.py

Or with pytest:
    pytest tests/test_audio.py -v
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.audio import (
    LOGIT_DIM, LOW_LEVEL_DIM, AudioPart, Extractors, LogitExtractor, LowLevelExtractor,
    ToyLogitExtractor, build_extractors, extract, extract_sequence, feature_dim, parts_from_array,
    window, window_indices,
)
from src.errors import ConfigError, ShapeError


RATE = 16000


def _parts(T: int, n: int = 640, seed: int = 0) -> list[AudioPart]:
    rng = np.random.default_rng(seed)
    return [AudioPart(rng.normal(scale=0.1, size=n), RATE) for _ in range(T)]


def test_feature_dimension():
    assert feature_dim(4) == 300
    extractors = build_extractors("toy")
    feature = extract(_parts(12), 6, 4, extractors)
    assert feature.low_level.shape == (LOW_LEVEL_DIM,)
    assert feature.logits.shape == (8 * LOGIT_DIM,)
    assert feature.combined.shape == (300,)
    assert feature.combined.dtype == np.float32


def test_window_interior_and_clamping():
    assert window_indices(6, 20, 4) == [2, 3, 4, 5, 6, 7, 8, 9]
    assert window_indices(0, 20, 4) == [0, 0, 0, 0, 0, 1, 2, 3]
    assert window_indices(19, 20, 4) == [15, 16, 17, 18, 19, 19, 19, 19]
    assert window_indices(0, 1, 2) == [0, 0, 0, 0]


def test_window_returns_parts():
    parts = _parts(5)
    win = window(parts, 0, 2)
    assert len(win) == 4
    assert win[0] is parts[0] and win[1] is parts[0] and win[3] is parts[1]


def test_window_errors():
    with pytest.raises(ShapeError):
        window([], 0, 4)
    with pytest.raises(ShapeError):
        window(_parts(3), 0, 0)


def test_feature_is_local():
    """Changing a part outside the window leaves the feature unchanged."""
    extractors = build_extractors()
    parts = _parts(20, seed=1)
    before = extract(parts, 6, 4, extractors).combined
    changed = list(parts)
    changed[15] = AudioPart(np.ones(640), RATE)
    after = extract(changed, 6, 4, extractors).combined
    assert np.array_equal(before, after)
    changed[9] = AudioPart(np.ones(640), RATE)
    assert not np.array_equal(before, extract(changed, 6, 4, extractors).combined)


def test_logits_are_distributions():
    logits = ToyLogitExtractor()(AudioPart(np.sin(np.arange(640) / 5.0), RATE))
    assert logits.shape == (LOGIT_DIM,)
    assert logits.min() > 0
    assert logits.sum() == pytest.approx(1.0)


def test_energy_tracks_loudness():
    extractors = build_extractors()
    quiet = [AudioPart(0.01 * np.sin(np.arange(640) / 3.0), RATE) for _ in range(8)]
    loud = [AudioPart(0.5 * np.sin(np.arange(640) / 3.0), RATE) for _ in range(8)]
    assert extract(loud, 4, 4, extractors).low_level[0] > extract(quiet, 4, 4, extractors).low_level[0]


def test_silence_is_finite():
    extractors = build_extractors()
    parts = [AudioPart(np.zeros(640), RATE) for _ in range(3)]
    assert np.isfinite(extract(parts, 1, 4, extractors).combined).all()


def test_bad_extractor_output_rejected():
    class Short(LowLevelExtractor):
        def __call__(self, parts):
            return np.zeros(10)

    class Toy(LogitExtractor):
        def __call__(self, part):
            return np.full(LOGIT_DIM, 1.0 / LOGIT_DIM)

    with pytest.raises(ShapeError, match="Low-level"):
        extract(_parts(4), 1, 2, Extractors(Short(), Toy()))


def test_build_extractors_names():
    with pytest.raises(ConfigError, match="reserved"):
        build_extractors("pyaudioanalysis")
    with pytest.raises(ConfigError, match="Unknown"):
        build_extractors("whisper")


def test_audio_part_validation():
    with pytest.raises(ShapeError):
        AudioPart(np.array([]), RATE)
    with pytest.raises(ShapeError):
        AudioPart(np.zeros(4), 0)


def test_sequence_features_deterministic_across_threads(sequence):
    parts = parts_from_array(sequence.audio, sequence.sample_rate)
    extractors = build_extractors()
    single = extract_sequence(parts, 4, extractors, threads=1)
    multi = extract_sequence(parts, 4, extractors, threads=3)
    assert single.shape == (sequence.T, 300)
    assert np.array_equal(single, multi)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
