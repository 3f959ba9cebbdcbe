"""
Tests for the morphable model, parameter types and synthetic data.

Run directly:
    python tests/test_morphable.py

Or with pytest:
    pytest tests/test_morphable.py -v
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.config import SynthConfig
from src.errors import DataError, ShapeError
from src.morphable import (
    CameraParams, MorphableModel, ShapeParams, SyntheticSequence, adapt_identity,
    make_synthetic_model, make_synthetic_sequence, model_fingerprint, synthesize_shape,
)


def _loop_shape(model: MorphableModel, params: ShapeParams) -> np.ndarray:
    out = np.zeros(3 * model.N)
    for i in range(3 * model.N):
        value = model.mean_shape[i]
        for j in range(model.n_id):
            value += model.identity_basis[i, j] * params.identity[j]
        for j in range(model.n_exp):
            value += model.expression_basis[i, j] * params.expression[j]
        out[i] = value
    return out


def test_synthesize_matches_scalar_loop():
    rng = np.random.default_rng(5)
    for seed in range(50):
        model = make_synthetic_model(seed, N=16, n_id=3, n_exp=2)
        params = ShapeParams(rng.normal(size=3), rng.normal(size=2))
        shape = synthesize_shape(model, params)
        assert np.allclose(shape.vertices, _loop_shape(model, params), atol=1e-6)


def test_zero_params_give_mean_shape(model):
    shape = synthesize_shape(model, ShapeParams(np.zeros(model.n_id), np.zeros(model.n_exp)))
    assert np.array_equal(shape.vertices, model.mean_shape)


def test_synthesis_is_linear(model):
    rng = np.random.default_rng(0)
    a = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    b = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    alpha, beta = 0.3, -1.7
    combo = ShapeParams(alpha * a.identity + beta * b.identity, alpha * a.expression + beta * b.expression)
    lhs = synthesize_shape(model, combo).vertices - model.mean_shape
    rhs = alpha * (synthesize_shape(model, a).vertices - model.mean_shape) + beta * (
        synthesize_shape(model, b).vertices - model.mean_shape
    )
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_parameter_size_mismatch(model):
    with pytest.raises(ShapeError, match="mismatch"):
        synthesize_shape(model, ShapeParams(np.zeros(model.n_id + 1), np.zeros(model.n_exp)))


def test_bases_orthonormal(model):
    for basis in (model.identity_basis, model.expression_basis):
        assert np.allclose(basis.T @ basis, np.eye(basis.shape[1]), atol=1e-5)


def test_model_validation_rejects_bad_basis(model):
    arrays = model.to_arrays()
    arrays["expression_basis"] = arrays["expression_basis"] * 2.0
    with pytest.raises(DataError, match="orthonormal"):
        MorphableModel.from_arrays(arrays)
    arrays = model.to_arrays()
    arrays["triangles"] = arrays["triangles"].copy()
    arrays["triangles"][0, 0] = model.N
    with pytest.raises(DataError, match="triangle index"):
        MorphableModel.from_arrays(arrays)


def test_synthetic_model_is_deterministic():
    a = make_synthetic_model(7, N=64)
    b = make_synthetic_model(7, N=64)
    c = make_synthetic_model(8, N=64)
    assert model_fingerprint(a) == model_fingerprint(b)
    assert model_fingerprint(a) != model_fingerprint(c)
    assert a.mouth_vertex_indices.size > 0


def test_semantic_colors_in_unit_cube(model):
    colors = model.semantic_colors
    assert colors.shape == (model.n_triangles, 3)
    assert colors.min() > 0 and colors.max() < 1


def test_adapt_identity(model):
    rng = np.random.default_rng(1)
    source = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    driver = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    adapted = adapt_identity(source, driver)
    assert np.array_equal(adapted.identity, source.identity)
    assert np.array_equal(adapted.expression, driver.expression)
    same = adapt_identity(source, source)
    assert np.array_equal(same.identity, source.identity)
    assert np.array_equal(same.expression, source.expression)
    with pytest.raises(ShapeError):
        adapt_identity(source, ShapeParams(np.zeros(2), np.zeros(model.n_exp)))


def test_identity_recovered_by_basis_projection(model):
    rng = np.random.default_rng(2)
    source = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    driver = ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp))
    shape = synthesize_shape(model, adapt_identity(source, driver))
    residual = shape.vertices - model.mean_shape - model.expression_basis @ driver.expression
    recovered = model.identity_basis.T @ residual
    assert np.allclose(recovered, source.identity, atol=1e-5)


def test_adapt_identity_idempotent(model):
    rng = np.random.default_rng(3)
    source, first, second = (
        ShapeParams(rng.normal(size=model.n_id), rng.normal(size=model.n_exp)) for _ in range(3)
    )
    twice = adapt_identity(adapt_identity(source, first), second)
    once = adapt_identity(source, second)
    assert np.array_equal(twice.identity, once.identity)
    assert np.array_equal(twice.expression, once.expression)


def test_camera_vector_round_trip():
    camera = CameraParams(np.array([0.1, -0.2, 0.05]), np.array([0.02, -0.01]), 0.8)
    back = CameraParams.from_vector(camera.to_vector())
    assert np.allclose(back.rotation, camera.rotation)
    assert np.allclose(back.translation, camera.translation)
    assert back.scale == pytest.approx(0.8)
    assert np.allclose(CameraParams.identity().matrix, np.eye(3))
    with pytest.raises(ShapeError):
        CameraParams(np.zeros(3), np.zeros(2), 0.0)


def test_model_save_load_exact(tmp_path, model):
    path = model.save(tmp_path / "model.hgar")
    loaded = MorphableModel.load(path)
    assert model_fingerprint(loaded) == model_fingerprint(model)
    assert np.array_equal(loaded.mean_shape, model.mean_shape)
    assert np.array_equal(loaded.triangles, model.triangles)


def test_sequence_properties(model, sequence, synth_config):
    assert sequence.T == 5
    assert sequence.resolution == synth_config.resolution
    assert sequence.frames.shape == (5, 16, 16, 3)
    assert sequence.audio.shape == (5, synth_config.samples_per_part)
    assert np.abs(sequence.expressions).max() <= synth_config.expression_clip
    steps = np.abs(np.diff(sequence.rotations, axis=0))
    assert steps.max() <= synth_config.rotation_step + 1e-6
    assert sequence.frames.min() >= -1 and sequence.frames.max() <= 1
    assert sequence.model_fingerprint == model_fingerprint(model)


def test_sequence_deterministic(model, synth_config):
    a = make_synthetic_sequence(model, seed=4, T=3, config=synth_config)
    b = make_synthetic_sequence(model, seed=4, T=3, config=synth_config, threads=2)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.audio, b.audio)
    assert a.reference_index == b.reference_index


def test_sequence_minimum_length(model):
    with pytest.raises(ShapeError, match="at least 3"):
        make_synthetic_sequence(model, seed=0, T=2, config=SynthConfig(resolution=16))


def test_sequence_save_load_exact(tmp_path, sequence):
    loaded = SyntheticSequence.load(sequence.save(tmp_path / "seq.hgar"))
    for name, array in sequence.to_arrays().items():
        assert np.array_equal(getattr(loaded, name), array), name
    assert loaded.reference_index == sequence.reference_index
    assert loaded.model_fingerprint == sequence.model_fingerprint


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
