"""
Tests for expression and camera recovery by render-and-compare.

Run directly:
    python tests/test_fitting.py

Or with pytest:
    pytest tests/test_fitting.py -v
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.config import SynthConfig
from src.errors import ShapeError
from src.fitting import compass_search, decode_triangles, fit_facemap, fit_frame
from src.morphable import ShapeParams, make_synthetic_model, make_synthetic_sequence, synthesize_shape
from src.rasterizer import BACKGROUND, rasterize


def _face_map(model, sequence, t, expression=None):
    params = sequence.shape_params(t)
    if expression is not None:
        params = ShapeParams(identity=params.identity, expression=expression)
    H = W = sequence.resolution
    return rasterize(synthesize_shape(model, params), sequence.camera(t), model, H, W)


def test_fixed_point(model, sequence):
    _, target = _face_map(model, sequence, 1)
    init = (sequence.expressions[1], sequence.camera(1))
    fit = fit_facemap(target, model, sequence.identity, init)
    assert fit.residual == 0.0
    assert fit.converged
    assert np.array_equal(fit.expression, sequence.expressions[1])
    assert fit.history == [0.0]


def test_fixed_point_rgb_frame(model, sequence):
    init = (sequence.expressions[0], sequence.camera(0))
    fit = fit_frame(sequence.frames[0], model, sequence.identity, sequence.palette, sequence.background, init)
    assert fit.residual == 0.0
    assert fit.converged


def test_all_background_is_flagged(model, sequence):
    init = (np.zeros(model.n_exp), sequence.camera(0))
    blank = np.zeros((16, 16, 3), dtype=np.float32)
    fit = fit_facemap(blank, model, sequence.identity, init)
    assert not fit.converged
    assert np.isfinite(fit.residual)

    background = np.broadcast_to(sequence.background, (16, 16, 3)).astype(np.float32)
    fit = fit_frame(background, model, sequence.identity, sequence.palette, sequence.background, init)
    assert not fit.converged


def test_history_is_non_increasing(model, sequence):
    _, target = _face_map(model, sequence, 2)
    rng = np.random.default_rng(0)
    expr0 = sequence.expressions[2] + rng.uniform(-0.3, 0.3, size=model.n_exp)
    fit = fit_facemap(target, model, sequence.identity, (expr0, sequence.camera(2)), max_evals=200)
    assert len(fit.history) >= 2
    assert all(b <= a for a, b in zip(fit.history, fit.history[1:]))
    assert fit.residual == fit.history[-1]
    assert fit.evaluations > 0


def test_wrong_init_size(model, sequence):
    _, target = _face_map(model, sequence, 0)
    with pytest.raises(ShapeError):
        fit_facemap(target, model, sequence.identity, (np.zeros(model.n_exp + 1), sequence.camera(0)))
    with pytest.raises(ShapeError):
        fit_facemap(target[..., :2], model, sequence.identity, (np.zeros(model.n_exp), sequence.camera(0)))


def test_decode_triangles(model, sequence):
    mask, target = _face_map(model, sequence, 0)
    ids = decode_triangles(target, model.semantic_colors)
    assert np.array_equal(ids, mask)
    assert np.any(ids != BACKGROUND)


def test_compass_search_quadratic():
    center = np.array([0.3, -0.2, 0.05])

    def fun(x):
        return float(np.sum((x - center) ** 2))

    x, fx, history = compass_search(fun, np.zeros(3), np.full(3, 0.1), max_evals=2000)
    assert fx < 1e-6
    assert np.allclose(x, center, atol=1e-3)
    assert all(b <= a for a, b in zip(history, history[1:]))


@pytest.mark.slow
def test_recovery_from_perturbed_init():
    config = SynthConfig()
    model = make_synthetic_model(seed=3, N=config.n_vertices)
    for i in range(20):
        seq = make_synthetic_sequence(model, seed=100 + i, T=3, config=config)
        _, target = _face_map(model, seq, 0)
        rng = np.random.default_rng(i)
        expr0 = seq.expressions[0] + rng.uniform(-0.1, 0.1, size=model.n_exp)
        fit = fit_facemap(target, model, seq.identity, (expr0, seq.camera(0)))
        error = np.abs(fit.expression - seq.expressions[0]).sum()
        assert error < 1e-2, f"map {i}: expression L1 {error:.4f}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
