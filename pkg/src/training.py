"""
Self-reenactment training over synthetic sequences.

Each step samples, per batch entry, a sequence, a frame t >= 1 and a
reference frame from the same sequence. The generator runs on frames t-1
and t (the pair feeds the temporal term). The discriminators are updated
first on detached fakes, then the generator through the full objective.

Batches come from np.random.default_rng([seed, step]), so a resumed run
sees the same data as an unbroken one.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import console
from .audio import build_extractors, extract_sequence, parts_from_array
from .config import ArchPreset, TrainConfig
from .container import load_arrays, save_arrays
from .errors import (
    CheckpointMismatchError, ContainerError, DataError, ModelMismatchError, NonFiniteLossError,
)
from .losses import (
    GeneratorTerms, PerceptualExtractor, feature_match, hinge_g, perceptual, recon_l1,
    temporal_loss, total_d, total_dm, total_g, warp_losses,
)
from .morphable import MorphableModel, SyntheticSequence, model_fingerprint, synthesize_shape
from .networks import Generator, GeneratorInput, ImageDiscriminator, MouthDiscriminator
from .rasterizer import MouthBox, mouth_box, render_landmarks
from .workers import parallel_map


MIN_SEQUENCE_LENGTH = 3
LOSS_LOG_NAME = "losses.jsonl"
FINAL_CHECKPOINT = "final.hgar"


# -----------------------------------------------------------------------------
# Dataset
# -----------------------------------------------------------------------------

@dataclass
class PreparedSequence:
    """A sequence plus its cached per-frame training inputs."""
    sequence: SyntheticSequence
    condition_maps: np.ndarray   # (T, H, W, 3) face maps or landmark images
    audio_features: np.ndarray   # (T, audio_dim)
    mouth_boxes: list[MouthBox]

    @property
    def T(self) -> int:
        return self.sequence.T


def driving_indices(t: int, k: int) -> list[int]:
    """Frames t-k .. t, oldest first, clamped at the clip start."""
    return [max(i, 0) for i in range(t - k, t + 1)]


def prepare_sequence(
    model: MorphableModel,
    sequence: SyntheticSequence,
    config: TrainConfig,
    extractors=None,
) -> PreparedSequence:
    """
    Cache audio features, mouth boxes and conditioning maps for one sequence.

    Raises:
        ModelMismatchError: If the sequence was made with another model.
        DataError: If the resolution doesn't match the preset.
    """
    arch = config.arch
    if sequence.model_fingerprint != model_fingerprint(model):
        raise ModelMismatchError(f"Sequence (seed {sequence.seed}) was generated with a different morphable model")
    res = sequence.resolution
    if res != arch.resolution:
        raise DataError(f"Sequence resolution {res} does not match preset '{arch.name}' ({arch.resolution})")

    extractors = extractors or build_extractors(config.extractor)
    parts = parts_from_array(sequence.audio, sequence.sample_rate)
    features = extract_sequence(parts, config.audio_half_window, extractors)

    boxes = []
    landmarks = []
    for t in range(sequence.T):
        shape = synthesize_shape(model, sequence.shape_params(t))
        camera = sequence.camera(t)
        boxes.append(mouth_box(shape, camera, model, res, res, arch.mouth_size))
        if config.ablation == "landmarks":
            landmarks.append(render_landmarks(shape, camera, model, res, res))
    maps = np.stack(landmarks) if landmarks else sequence.face_maps
    return PreparedSequence(sequence, maps, features, boxes)


class SequenceDataset:
    """Training sequences with cached per-frame inputs."""

    def __init__(
        self,
        model: MorphableModel,
        sequences: list[SyntheticSequence],
        config: TrainConfig,
        threads: int = 1,
    ):
        self.model = model
        self.config = config
        usable = []
        for seq in sequences:
            if seq.T < MIN_SEQUENCE_LENGTH:
                console.warn(f"Skipping sequence (seed {seq.seed}): {seq.T} frames < {MIN_SEQUENCE_LENGTH}")
                continue
            usable.append(seq)
        if not usable:
            raise DataError("No usable training sequences")
        extractors = build_extractors(config.extractor)
        self.items: list[PreparedSequence] = parallel_map(
            lambda s: prepare_sequence(model, s, config, extractors), usable, threads
        )

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def load(cls, data_dir: str | Path, config: TrainConfig, threads: int = 1) -> "SequenceDataset":
        """
        Load a `synth` output directory (model.hgar + sequences/*.hgar).

        Raises:
            DataError: If the directory or its files are missing.
        """
        data_dir = Path(data_dir)
        model_path = data_dir / "model.hgar"
        if not model_path.exists():
            raise DataError(f"No model.hgar in dataset directory: {data_dir}")
        paths = sorted((data_dir / "sequences").glob("seq_*.hgar"))
        if not paths:
            raise DataError(f"No sequences found in {data_dir / 'sequences'}")
        model = MorphableModel.load(model_path)
        sequences = parallel_map(SyntheticSequence.load, paths, threads)
        console.debug(f"Loaded {len(sequences)} sequences from {data_dir}")
        return cls(model, sequences, config, threads)


# -----------------------------------------------------------------------------
# Sampling
# -----------------------------------------------------------------------------

@dataclass
class TrainSample:
    """One self-reenactment example: frames t-1 and t with a shared reference."""
    sequence_index: int
    t: int
    reference_index: int
    reference_image: np.ndarray   # (H, W, 3)
    reference_map: np.ndarray
    driving_prev: np.ndarray      # (H, W, 3(k+1))
    driving_curr: np.ndarray
    target_prev: np.ndarray       # (H, W, 3)
    target_curr: np.ndarray
    map_curr: np.ndarray          # x_t
    audio_prev: np.ndarray
    audio_curr: np.ndarray
    mouth_curr: MouthBox


def _chw(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(array, -1, -3), dtype=np.float32))


@dataclass
class TrainBatch:
    """Collated samples as (B, C, H, W) / (B, D) tensors."""
    reference_image: torch.Tensor
    reference_map: torch.Tensor
    driving_prev: torch.Tensor
    driving_curr: torch.Tensor
    target_prev: torch.Tensor
    target_curr: torch.Tensor
    map_curr: torch.Tensor
    audio_prev: torch.Tensor
    audio_curr: torch.Tensor
    mouth_boxes: list[MouthBox]
    samples: list[TrainSample] = field(default_factory=list, repr=False)

    @classmethod
    def collate(cls, samples: list[TrainSample]) -> "TrainBatch":
        def stack(name: str) -> torch.Tensor:
            return _chw(np.stack([getattr(s, name) for s in samples]))

        return cls(
            reference_image=stack("reference_image"),
            reference_map=stack("reference_map"),
            driving_prev=stack("driving_prev"),
            driving_curr=stack("driving_curr"),
            target_prev=stack("target_prev"),
            target_curr=stack("target_curr"),
            map_curr=stack("map_curr"),
            audio_prev=torch.from_numpy(np.stack([s.audio_prev for s in samples]).astype(np.float32)),
            audio_curr=torch.from_numpy(np.stack([s.audio_curr for s in samples]).astype(np.float32)),
            mouth_boxes=[s.mouth_curr for s in samples],
            samples=samples,
        )

    def input_prev(self) -> GeneratorInput:
        return GeneratorInput(self.driving_prev, self.reference_image, self.reference_map, self.audio_prev)

    def input_curr(self) -> GeneratorInput:
        return GeneratorInput(self.driving_curr, self.reference_image, self.reference_map, self.audio_curr)


def make_sample(item: PreparedSequence, sequence_index: int, t: int, reference_index: int, k: int) -> TrainSample:
    """Build the sample for frame pair (t-1, t) of one prepared sequence."""
    seq = item.sequence
    maps = item.condition_maps

    def stack(frame: int) -> np.ndarray:
        return np.concatenate([maps[i] for i in driving_indices(frame, k)], axis=-1)

    return TrainSample(
        sequence_index=sequence_index,
        t=t,
        reference_index=reference_index,
        reference_image=seq.frames[reference_index],
        reference_map=maps[reference_index],
        driving_prev=stack(t - 1),
        driving_curr=stack(t),
        target_prev=seq.frames[t - 1],
        target_curr=seq.frames[t],
        map_curr=maps[t],
        audio_prev=item.audio_features[t - 1],
        audio_curr=item.audio_features[t],
        mouth_curr=item.mouth_boxes[t],
    )


def sample_batch(dataset: SequenceDataset, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """
    Draw batch_size samples: uniform sequence, uniform t in [1, T), uniform
    reference index in [0, T) from the same sequence.
    """
    k = config.arch.k
    samples = []
    for _ in range(config.batch_size):
        s = int(rng.integers(len(dataset)))
        item = dataset.items[s]
        t = int(rng.integers(1, item.T))
        ref = int(rng.integers(item.T))
        samples.append(make_sample(item, s, t, ref, k))
    return TrainBatch.collate(samples)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Data RNG for one step; independent of how the run was split."""
    return np.random.default_rng([seed, step])


# -----------------------------------------------------------------------------
# Models and optimizers
# -----------------------------------------------------------------------------

@dataclass
class HeadGanModels:
    generator: Generator
    image_disc: ImageDiscriminator
    mouth_disc: MouthDiscriminator
    perceptual: PerceptualExtractor
    arch: ArchPreset
    ablation: str

    def parameter_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        """Trainable parameters by top-level submodule."""
        groups = {}
        for prefix, module in (("G", self.generator), ("D", self.image_disc), ("Dm", self.mouth_disc)):
            for name, child in module.named_children():
                params = [p for p in child.parameters() if p.requires_grad]
                if params:
                    groups[f"{prefix}.{name}"] = params
        return groups

    def trainable(self) -> dict[str, torch.nn.Module]:
        return {"G": self.generator, "D": self.image_disc, "Dm": self.mouth_disc}


@dataclass
class Optimizers:
    g: torch.optim.Adam
    d: torch.optim.Adam
    dm: torch.optim.Adam

    def as_dict(self) -> dict[str, torch.optim.Adam]:
        return {"opt_g": self.g, "opt_d": self.d, "opt_dm": self.dm}


def build_models(config: TrainConfig) -> HeadGanModels:
    """
    Initialize all networks deterministically from config.seed. Each network
    draws from its own seed, so the discriminators do not depend on the
    ablation.
    """
    arch = config.arch
    torch.manual_seed(config.seed)
    generator = Generator(arch, config.ablation)
    torch.manual_seed(config.seed + 1)
    image_disc = ImageDiscriminator(arch)
    torch.manual_seed(config.seed + 2)
    mouth_disc = MouthDiscriminator(arch)
    return HeadGanModels(
        generator=generator,
        image_disc=image_disc,
        mouth_disc=mouth_disc,
        perceptual=PerceptualExtractor(config.perceptual_seed),
        arch=arch,
        ablation=config.ablation,
    )


def build_optimizers(models: HeadGanModels, config: TrainConfig) -> Optimizers:
    def adam(module: torch.nn.Module) -> torch.optim.Adam:
        return torch.optim.Adam(
            module.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2)
        )

    return Optimizers(adam(models.generator), adam(models.image_disc), adam(models.mouth_disc))


# -----------------------------------------------------------------------------
# Step
# -----------------------------------------------------------------------------

def crop_mouths(frames: torch.Tensor, boxes: list[MouthBox]) -> torch.Tensor:
    """Crop each frame's mouth box: (B, 3, H, W) -> (B, 3, s, s)."""
    return torch.stack([
        frames[i, :, b.y0:b.y0 + b.size, b.x0:b.x0 + b.size] for i, b in enumerate(boxes)
    ])


def _check_finite(step: int, record: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in record.values()):
        raise NonFiniteLossError(step, record)


def train_step(
    models: HeadGanModels,
    batch: TrainBatch,
    optimizers: Optimizers,
    weights,
    step: int = 0,
    freeze_generator: bool = False,
) -> dict[str, float]:
    """
    One discriminator update (D and D_m on detached fakes) followed by one
    generator update.

    Returns:
        Loss record {term name: value}.

    Raises:
        NonFiniteLossError: If any loss is NaN/Inf; no update is applied
            for the failing network.
    """
    G, D, Dm = models.generator, models.image_disc, models.mouth_disc
    G.train()
    D.train()
    Dm.train()

    out_prev = G(batch.input_prev())
    out_curr = G(batch.input_curr())
    fake = out_curr.frame
    real = batch.target_curr
    audio_dm = torch.zeros_like(batch.audio_curr) if models.ablation == "no_audio" else batch.audio_curr
    mouth_real = crop_mouths(real, batch.mouth_boxes)

    # Discriminators
    optimizers.d.zero_grad(set_to_none=True)
    optimizers.dm.zero_grad(set_to_none=True)
    d_real = D(batch.map_curr, real)[-1]
    d_fake = D(batch.map_curr, fake.detach())[-1]
    loss_d = total_d(d_real, d_fake)
    dm_real = Dm(audio_dm, mouth_real)[-1]
    dm_fake = Dm(audio_dm, crop_mouths(fake.detach(), batch.mouth_boxes))[-1]
    loss_dm = total_dm(dm_real, dm_fake)
    record = {"d_adv": float(loss_d.detach()), "dm_adv": float(loss_dm.detach())}
    _check_finite(step, record)
    (loss_d + loss_dm).backward()
    optimizers.d.step()
    optimizers.dm.step()

    if freeze_generator:
        return record

    # Generator
    optimizers.g.zero_grad(set_to_none=True)
    with torch.no_grad():
        real_feats = D(batch.map_curr, real)
        real_mouth_feats = Dm(audio_dm, mouth_real)
    fake_feats = D(batch.map_curr, fake)
    fake_mouth_feats = Dm(audio_dm, crop_mouths(fake, batch.mouth_boxes))
    warp_l1, warp_vgg = warp_losses(out_curr.pyramid.warped_reference, real, models.perceptual)
    terms = GeneratorTerms(
        adv=hinge_g(fake_feats[-1], fake_mouth_feats[-1]),
        l1=recon_l1(fake, real),
        vgg=perceptual(fake, real, models.perceptual),
        fm=feature_match(real_feats[:-1], fake_feats[:-1]) + feature_match(real_mouth_feats[:-1], fake_mouth_feats[:-1]),
        warp_l1=warp_l1,
        warp_vgg=warp_vgg,
        temp=temporal_loss(out_prev.pyramid, out_curr.pyramid),
    )
    loss_g = total_g(terms, weights)
    record.update(terms.as_record())
    record["g_total"] = float(loss_g.detach())
    _check_finite(step, record)
    loss_g.backward()
    optimizers.g.step()
    return record


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    models: HeadGanModels,
    optimizers: Optimizers,
    step: int,
    config: TrainConfig,
) -> Path:
    """Write all network and optimizer state plus run attributes to a container."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in models.trainable().items():
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    for prefix, opt in optimizers.as_dict().items():
        for index, state in opt.state_dict()["state"].items():
            for key, value in state.items():
                arrays[f"{prefix}/{index}/{key}"] = np.asarray(torch.as_tensor(value).detach().cpu().numpy())
    attrs = {
        "kind": "checkpoint",
        "preset": models.arch.name,
        "ablation": models.ablation,
        "seed": int(config.seed),
        "step": int(step),
        "config": config.to_yaml(),
    }
    return save_arrays(path, arrays, attrs)


def _module_state(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    head = prefix + "/"
    return {name[len(head):]: torch.from_numpy(a.copy()) for name, a in arrays.items() if name.startswith(head)}


def _optimizer_state(arrays: dict[str, np.ndarray], prefix: str) -> dict[int, dict[str, torch.Tensor]]:
    state: dict[int, dict[str, torch.Tensor]] = {}
    head = prefix + "/"
    for name, a in arrays.items():
        if not name.startswith(head):
            continue
        index, key = name[len(head):].split("/", 1)
        state.setdefault(int(index), {})[key] = torch.from_numpy(a.copy())
    return state


@dataclass
class Checkpoint:
    models: HeadGanModels
    optimizers: Optimizers
    step: int
    config: TrainConfig
    path: Path


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> Checkpoint:
    """
    Restore networks and optimizers from a checkpoint.

    Args:
        path: Checkpoint container.
        config: If given, the checkpoint must match its preset and ablation;
            otherwise the config stored in the checkpoint is used.

    Raises:
        DataError: If the file is missing or not a checkpoint.
        CheckpointMismatchError: If it doesn't match the config.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    bundle = load_arrays(path)
    if bundle.attrs.get("kind") != "checkpoint":
        raise ContainerError(f"Not a checkpoint container: {path}")

    stored = TrainConfig.from_dict(yaml.safe_load(bundle.attrs["config"]) or {})
    if config is None:
        config = stored
    else:
        stored_arch, arch = stored.arch, config.arch
        if stored_arch.name != arch.name or stored_arch.to_dict() != arch.to_dict():
            raise CheckpointMismatchError(
                f"Checkpoint {path} was trained with preset '{stored_arch.name}', config uses '{arch.name}'"
            )
        if stored.ablation != config.ablation:
            raise CheckpointMismatchError(
                f"Checkpoint {path} was trained with ablation '{stored.ablation}', config uses '{config.ablation}'"
            )

    models = build_models(config)
    for prefix, module in models.trainable().items():
        try:
            module.load_state_dict(_module_state(bundle.arrays, prefix))
        except RuntimeError as e:
            raise CheckpointMismatchError(f"Checkpoint {path} does not fit the {prefix} network: {e}") from e

    optimizers = build_optimizers(models, config)
    for prefix, opt in optimizers.as_dict().items():
        state = _optimizer_state(bundle.arrays, prefix)
        if state:
            opt.load_state_dict({"state": state, "param_groups": opt.state_dict()["param_groups"]})
    return Checkpoint(models, optimizers, int(bundle.attrs["step"]), config, path)


# -----------------------------------------------------------------------------
# Loss log
# -----------------------------------------------------------------------------

class LossLog:
    """Line-delimited {"step", "name", "value"} records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, step: int, record: dict[str, float]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            for name, value in record.items():
                f.write(json.dumps({"step": step, "name": name, "value": value}) + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop records with step > `step` (used when resuming)."""
        if not self.path.exists():
            return
        kept = [r for r in read_loss_log(self.path) if r["step"] <= step]
        with open(self.path, "w", encoding="utf-8") as f:
            for r in kept:
                f.write(json.dumps(r) + "\n")


def read_loss_log(path: str | Path) -> list[dict]:
    """
    Raises:
        DataError: If the log is missing or has a malformed line.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Loss log not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {number}: malformed record ({e.msg})") from e
    return records


# -----------------------------------------------------------------------------
# Loop
# -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    step: int
    models: HeadGanModels


def train(
    config: TrainConfig,
    dataset: SequenceDataset,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> TrainResult:
    """
    Run training up to config.steps and write checkpoints plus the loss log.

    Checkpoints go to out_dir/checkpoints/step_XXXXXX.hgar every
    checkpoint_every steps; the last state is always written to
    out_dir/final.hgar (with steps=0 that is the initialization).

    Raises:
        DataError: On I/O failures (naming the path).
        NonFiniteLossError: If a step diverges.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    log = LossLog(out_dir / LOSS_LOG_NAME)

    if resume is not None:
        ckpt = load_checkpoint(resume, config)
        models, optimizers, start = ckpt.models, ckpt.optimizers, ckpt.step
        log.truncate_after(start)
        console.info(f"Resuming from {resume} at step {start}")
    else:
        models = build_models(config)
        optimizers = build_optimizers(models, config)
        start = 0
        log.path.write_text("", encoding="utf-8")

    weights = config.loss_weights
    for step in range(start, config.steps):
        batch = sample_batch(dataset, config, step_rng(config.seed, step))
        record = train_step(models, batch, optimizers, weights, step=step)
        log.append(step + 1, record)
        done = step + 1
        if done % config.log_every == 0 or done == config.steps:
            summary = "  ".join(f"{k}={v:.4f}" for k, v in record.items() if k in ("d_adv", "dm_adv", "g_l1", "g_total"))
            console.info(f"[{done}/{config.steps}] {summary}")
        if done % config.checkpoint_every == 0:
            path = save_checkpoint(out_dir / "checkpoints" / f"step_{done:06d}.hgar", models, optimizers, done, config)
            console.debug(f"Saved {path}")

    final_step = max(start, config.steps)
    final = save_checkpoint(out_dir / FINAL_CHECKPOINT, models, optimizers, final_step, config)
    return TrainResult(checkpoint=final, loss_log=log.path, step=final_step, models=models)
