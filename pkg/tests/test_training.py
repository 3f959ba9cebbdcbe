"""
Tests for the dataset, sampling, training step, checkpoints and loss log.

Run directly:
    python tests/test_training.py

Or with pytest:
    pytest tests/test_training.py -v
"""

import dataclasses
import math
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from src.config import LossWeights, SynthConfig, TrainConfig
from src.container import save_arrays
from src.errors import CheckpointMismatchError, ContainerError, DataError, ModelMismatchError, NonFiniteLossError
from src.inference import DriverClip, SourceBundle, reenact
from src.morphable import make_synthetic_model, make_synthetic_sequence
from src.rasterizer import MouthBox
from src.training import (
    FINAL_CHECKPOINT, LOSS_LOG_NAME, LossLog, SequenceDataset, build_models, build_optimizers,
    crop_mouths, driving_indices, load_checkpoint, read_loss_log, sample_batch, save_checkpoint,
    step_rng, train, train_step,
)


def _shorten(sequence, T):
    per_frame = ("expressions", "rotations", "translations", "scales", "audio", "frames", "face_maps")
    return dataclasses.replace(
        sequence, reference_index=0, **{name: getattr(sequence, name)[:T] for name in per_frame}
    )


def _states_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.fixture
def dataset(model, sequence, other_sequence, tiny_config):
    return SequenceDataset(model, [sequence, other_sequence], tiny_config)


# -----------------------------------------------------------------------------
# Dataset and sampling
# -----------------------------------------------------------------------------

def test_driving_indices():
    assert driving_indices(0, 2) == [0, 0, 0]
    assert driving_indices(1, 2) == [0, 0, 1]
    assert driving_indices(4, 2) == [2, 3, 4]
    assert driving_indices(3, 0) == [3]


def test_dataset_load(dataset_dir, tiny_config, sequence):
    ds = SequenceDataset.load(dataset_dir, tiny_config)
    assert len(ds) == 2
    item = ds.items[0]
    assert item.T == sequence.T
    assert np.array_equal(item.condition_maps, sequence.face_maps)
    assert item.audio_features.shape == (sequence.T, tiny_config.audio_dim)
    assert all(box.size == tiny_config.arch.mouth_size for box in item.mouth_boxes)


def test_dataset_load_missing(tmp_path, tiny_config):
    with pytest.raises(DataError, match="model.hgar"):
        SequenceDataset.load(tmp_path, tiny_config)


def test_short_sequences_skipped(model, sequence, tiny_config):
    ds = SequenceDataset(model, [sequence, _shorten(sequence, 2)], tiny_config)
    assert len(ds) == 1
    with pytest.raises(DataError, match="No usable"):
        SequenceDataset(model, [_shorten(sequence, 2)], tiny_config)


def test_dataset_rejects_mismatches(model, sequence, tiny_config):
    with pytest.raises(DataError, match="resolution"):
        SequenceDataset(model, [sequence], TrainConfig(preset="desk"))
    with pytest.raises(ModelMismatchError):
        SequenceDataset(make_synthetic_model(seed=9, N=100), [sequence], tiny_config)


def test_landmark_ablation_uses_landmark_maps(model, sequence, tiny_config):
    config = tiny_config.with_overrides(ablation="landmarks")
    item = SequenceDataset(model, [sequence], config).items[0]
    assert item.condition_maps.shape == sequence.face_maps.shape
    assert not np.array_equal(item.condition_maps, sequence.face_maps)


def test_sample_batch(dataset, tiny_config):
    a = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 7))
    b = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 7))
    assert torch.equal(a.driving_curr, b.driving_curr)
    assert [s.t for s in a.samples] == [s.t for s in b.samples]
    assert a.driving_curr.shape == (2, 9, 16, 16)
    assert a.reference_image.shape == (2, 3, 16, 16)
    assert a.audio_curr.shape == (2, tiny_config.audio_dim)
    for s in a.samples:
        T = dataset.items[s.sequence_index].T
        assert 1 <= s.t < T
        assert 0 <= s.reference_index < T


def test_reference_index_is_uniform(model, sequence):
    config = TrainConfig(preset="tiny", batch_size=8)
    dataset = SequenceDataset(model, [sequence], config)
    counts = np.zeros(sequence.T)
    for step in range(250):
        for s in sample_batch(dataset, config, step_rng(0, step)).samples:
            counts[s.reference_index] += 1
    assert counts.sum() == 2000
    assert chisquare(counts).pvalue > 1e-3


def test_sample_pair_is_consecutive(dataset):
    rng = np.random.default_rng(0)
    config = TrainConfig(preset="tiny", batch_size=8)
    batch = sample_batch(dataset, config, rng)
    for i, s in enumerate(batch.samples):
        frames = dataset.items[s.sequence_index].sequence.frames
        assert np.array_equal(batch.target_prev[i].permute(1, 2, 0).numpy(), frames[s.t - 1])
        assert np.array_equal(batch.target_curr[i].permute(1, 2, 0).numpy(), frames[s.t])


def test_crop_mouths():
    frames = torch.arange(2 * 3 * 8 * 8, dtype=torch.float32).view(2, 3, 8, 8)
    crops = crop_mouths(frames, [MouthBox(1, 2, 4), MouthBox(4, 4, 4)])
    assert crops.shape == (2, 3, 4, 4)
    assert torch.equal(crops[0], frames[0, :, 2:6, 1:5])
    assert torch.equal(crops[1], frames[1, :, 4:8, 4:8])


# -----------------------------------------------------------------------------
# Step
# -----------------------------------------------------------------------------

def test_train_step_record(dataset, tiny_config):
    models = build_models(tiny_config)
    optimizers = build_optimizers(models, tiny_config)
    batch = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 0))
    record = train_step(models, batch, optimizers, tiny_config.loss_weights)
    expected = {"d_adv", "dm_adv", "g_adv", "g_l1", "g_vgg", "g_fm", "g_warp_l1", "g_warp_vgg", "g_temp", "g_total"}
    assert set(record) == expected
    assert all(math.isfinite(v) for v in record.values())
    assert record["d_adv"] >= 0 and record["g_l1"] >= 0


def test_ablations_share_initial_weights(tiny_config):
    full = build_models(tiny_config)
    ablated = build_models(tiny_config.with_overrides(ablation="no_flow"))
    assert _states_equal(full.image_disc, ablated.image_disc)
    assert _states_equal(full.mouth_disc, ablated.mouth_disc)
    assert _states_equal(full.generator.render_net, ablated.generator.render_net)
    assert _states_equal(full.generator.flow_net.encoder, ablated.generator.flow_net.encoder)
    assert ablated.generator.flow_net.decoder is None


def test_every_parameter_group_gets_gradient(dataset, tiny_config):
    models = build_models(tiny_config)
    optimizers = build_optimizers(models, tiny_config)
    batch = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 0))
    train_step(models, batch, optimizers, tiny_config.loss_weights)
    groups = models.parameter_groups()
    assert {"G.flow_net", "G.render_net", "D.layers", "Dm.layers"} <= set(groups)
    for name, params in groups.items():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in params), name


def test_frozen_generator_only_updates_discriminators(dataset, tiny_config):
    models = build_models(tiny_config)
    optimizers = build_optimizers(models, tiny_config)
    before = {k: v.clone() for k, v in models.generator.state_dict().items()}
    batch = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 0))
    record = train_step(models, batch, optimizers, LossWeights(0, 0, 0, 0), freeze_generator=True)
    assert set(record) == {"d_adv", "dm_adv"}
    after = models.generator.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_non_finite_loss_raises(dataset, tiny_config):
    models = build_models(tiny_config)
    optimizers = build_optimizers(models, tiny_config)
    with torch.no_grad():
        models.generator.render_net.out.bias.fill_(float("nan"))
    batch = sample_batch(dataset, tiny_config, step_rng(tiny_config.seed, 0))
    with pytest.raises(NonFiniteLossError) as excinfo:
        train_step(models, batch, optimizers, tiny_config.loss_weights, step=4)
    assert excinfo.value.exit_code == 5


# -----------------------------------------------------------------------------
# Checkpoints and loop
# -----------------------------------------------------------------------------

def test_zero_steps_writes_init_checkpoint(dataset, tiny_config, tmp_path):
    result = train(tiny_config.with_overrides(steps=0), dataset, tmp_path / "run")
    assert result.step == 0
    assert result.checkpoint == tmp_path / "run" / FINAL_CHECKPOINT
    assert not list((tmp_path / "run" / "checkpoints").iterdir())
    assert read_loss_log(result.loss_log) == []
    ckpt = load_checkpoint(result.checkpoint)
    assert ckpt.step == 0
    assert _states_equal(ckpt.models.generator, build_models(tiny_config).generator)


def test_checkpoint_round_trip(dataset, tiny_config, tmp_path):
    result = train(tiny_config, dataset, tmp_path / "run")
    assert sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir()) == [
        "step_000001.hgar", "step_000002.hgar",
    ]
    ckpt = load_checkpoint(result.checkpoint, tiny_config)
    assert ckpt.step == 2
    for name, module in result.models.trainable().items():
        assert _states_equal(module, ckpt.models.trainable()[name]), name
    assert ckpt.optimizers.g.state_dict()["state"]


def test_training_is_deterministic(dataset, tiny_config, tmp_path):
    a = train(tiny_config, dataset, tmp_path / "a")
    b = train(tiny_config, dataset, tmp_path / "b")
    assert _states_equal(a.models.generator, b.models.generator)
    assert read_loss_log(a.loss_log) == read_loss_log(b.loss_log)


def test_resume_matches_unbroken_run(dataset, tiny_config, tmp_path):
    full = train(tiny_config, dataset, tmp_path / "full")
    resumed = train(
        tiny_config, dataset, tmp_path / "resumed",
        resume=tmp_path / "full" / "checkpoints" / "step_000001.hgar",
    )
    assert resumed.step == 2
    for name, module in full.models.trainable().items():
        assert _states_equal(module, resumed.models.trainable()[name]), name
    tail = [r for r in read_loss_log(full.loss_log) if r["step"] == 2]
    assert read_loss_log(resumed.loss_log) == tail


def test_checkpoint_mismatch(dataset, tiny_config, tmp_path):
    path = train(tiny_config.with_overrides(steps=0), dataset, tmp_path / "run").checkpoint
    with pytest.raises(CheckpointMismatchError, match="preset"):
        load_checkpoint(path, TrainConfig(preset="desk"))
    with pytest.raises(CheckpointMismatchError, match="ablation"):
        load_checkpoint(path, tiny_config.with_overrides(ablation="no_audio"))


def test_checkpoint_missing_or_wrong_kind(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "nope.hgar")
    other = save_arrays(tmp_path / "other.hgar", {"x": np.zeros(3)}, {"kind": "sequence"})
    with pytest.raises(ContainerError):
        load_checkpoint(other)


def test_save_checkpoint_attrs(tiny_config, tmp_path):
    models = build_models(tiny_config)
    path = save_checkpoint(tmp_path / "c.hgar", models, build_optimizers(models, tiny_config), 5, tiny_config)
    ckpt = load_checkpoint(path)
    assert ckpt.step == 5
    assert ckpt.config.preset == "tiny"
    assert ckpt.config.seed == tiny_config.seed


# -----------------------------------------------------------------------------
# Loss log
# -----------------------------------------------------------------------------

def test_loss_log(tmp_path):
    log = LossLog(tmp_path / LOSS_LOG_NAME)
    log.append(1, {"a": 1.0, "b": 2.0})
    log.append(2, {"a": 0.5})
    log.append(3, {"a": 0.25})
    records = read_loss_log(log.path)
    assert records[0] == {"step": 1, "name": "a", "value": 1.0}
    assert len(records) == 4
    log.truncate_after(2)
    assert [r["step"] for r in read_loss_log(log.path)] == [1, 1, 2]


def test_loss_log_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        read_loss_log(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"step": 1, "name": "a", "value": 1.0}\n{oops\n', encoding="utf-8")
    with pytest.raises(DataError, match="line 2"):
        read_loss_log(bad)


# -----------------------------------------------------------------------------
# Longer runs
# -----------------------------------------------------------------------------

@pytest.mark.slow
def test_discriminator_hinge_decreases_on_frozen_generator(dataset, tiny_config):
    config = tiny_config.with_overrides(batch_size=4)
    models = build_models(config)
    optimizers = build_optimizers(models, config)
    losses = []
    for step in range(50):
        batch = sample_batch(dataset, config, step_rng(config.seed, step))
        record = train_step(models, batch, optimizers, LossWeights(0, 0, 0, 0), step, freeze_generator=True)
        losses.append(record["d_adv"])
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


@pytest.mark.slow
def test_overfit_lowers_reconstruction(dataset, tiny_config, tmp_path):
    config = tiny_config.with_overrides(steps=200, checkpoint_every=200, log_every=50)
    result = train(config, dataset, tmp_path / "run")
    l1 = [r["value"] for r in read_loss_log(result.loss_log) if r["name"] == "g_l1"]
    assert np.mean(l1[-20:]) < np.mean(l1[:20])


def _self_reenactment_l1(model, sequence, ablation: str, out_dir: Path) -> float:
    config = TrainConfig(preset="desk", ablation=ablation, steps=500, checkpoint_every=500, log_every=100, seed=0)
    result = train(config, SequenceDataset(model, [sequence], config), out_dir)
    checkpoint = load_checkpoint(result.checkpoint, config)
    frames = reenact(checkpoint, SourceBundle.from_sequence(sequence), DriverClip.from_sequence(sequence), model).frames
    return float(np.abs(frames - sequence.frames).mean())


@pytest.mark.slow
def test_desk_overfit_beats_flow_ablation(tmp_path):
    model = make_synthetic_model(seed=0, N=300)
    sequence = make_synthetic_sequence(model, seed=1, T=8, config=SynthConfig())
    full = _self_reenactment_l1(model, sequence, "full", tmp_path / "full")
    no_flow = _self_reenactment_l1(model, sequence, "no_flow", tmp_path / "no_flow")
    assert full <= 0.08
    assert no_flow > full


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
