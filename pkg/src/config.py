"""
Central configuration for HeadGAN Lab.

Loads training settings from a YAML file into a TrainConfig dataclass.
Architecture presets work like named profiles: built-ins ship with the
package, a config file may add or override them under `presets:` and picks
one with `preset:`.
"""

import os
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


# Env var consulted when --threads is not given
THREADS_ENV_VAR = "HEADGAN_LAB_THREADS"

ABLATIONS = ("full", "no_flow", "no_audio", "landmarks")
EXTRACTORS = ("toy",)
RESERVED_EXTRACTORS = ("pyaudioanalysis", "deepspeech")


@dataclass(frozen=True)
class ArchPreset:
    """Network sizes for one architecture scale."""

    name: str
    resolution: int
    widths: tuple[int, int, int]  # (C1, C2, C3) at full/half/quarter resolution
    hidden: int = 128             # SPADE/AdaIN head width
    k: int = 2                    # past driving frames
    audio_dim: int = 300
    disc_base: int = 64
    disc_layers: int = 4
    mouth_size: int = 64

    @property
    def driving_channels(self) -> int:
        return 3 * (self.k + 1)

    def validate(self) -> None:
        """
        Check the preset is buildable.

        Raises:
            ConfigError: If sizes are inconsistent.
        """
        c1, c2, c3 = self.widths
        if c3 != 4 * c2 or c2 != 4 * c1:
            raise ConfigError(
                f"Preset '{self.name}': widths {self.widths} must satisfy C3 = 4*C2 and C2 = 4*C1 "
                "(each PixelShuffle divides channels by 4)"
            )
        if self.resolution % 4 != 0 or self.resolution < 8:
            raise ConfigError(f"Preset '{self.name}': resolution {self.resolution} must be a multiple of 4, >= 8")
        if not 0 < self.mouth_size <= self.resolution:
            raise ConfigError(f"Preset '{self.name}': mouth_size {self.mouth_size} outside (0, resolution]")
        if self.k < 0 or self.hidden < 1 or self.disc_layers < 2 or self.disc_base < 1:
            raise ConfigError(f"Preset '{self.name}': k, hidden, disc_layers, disc_base out of range")

    @classmethod
    def from_dict(cls, name: str, data: dict[str, Any]) -> "ArchPreset":
        """
        Build a preset from a `presets:` entry.

        Raises:
            ConfigError: Naming the key path (presets.<name>.<key>).
        """
        if not isinstance(data, dict):
            raise ConfigError(f"presets.{name} must be a mapping of settings, got {type(data).__name__}")
        known = {f.name for f in fields(cls)} - {"name"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown key(s) in preset '{name}': {', '.join(sorted(unknown))}")
        values = dict(data)
        if "widths" in values:
            widths = values["widths"]
            try:
                values["widths"] = tuple(int(w) for w in widths)
            except (TypeError, ValueError):
                raise ConfigError(f"presets.{name}.widths must be a list of 3 integers, got {widths!r}") from None
            if len(values["widths"]) != 3:
                raise ConfigError(f"presets.{name}.widths must be a list of 3 integers, got {widths!r}")
        for key, value in values.items():
            if key != "widths" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"presets.{name}.{key} must be an integer, got {value!r}")
        try:
            preset = cls(name=name, **values)
        except TypeError as e:
            raise ConfigError(f"Preset '{name}': {e}") from e
        preset.validate()
        return preset

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("name")
        data["widths"] = list(self.widths)
        return data


PRESETS: dict[str, ArchPreset] = {
    "paper": ArchPreset("paper", resolution=256, widths=(32, 128, 512), disc_base=64, mouth_size=64),
    "desk": ArchPreset("desk", resolution=64, widths=(8, 32, 128), disc_base=16, mouth_size=16),
    # Test-only scale; keeps unit tests fast
    "tiny": ArchPreset("tiny", resolution=16, widths=(2, 8, 32), hidden=16, disc_base=8, mouth_size=4),
}


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective."""
    l1: float = 50.0
    vgg: float = 10.0
    fm: float = 10.0
    temp: float = 30.0

    def __post_init__(self):
        for name in ("l1", "vgg", "fm", "temp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight '{name}' must be >= 0")


@dataclass
class TrainConfig:
    """Training configuration loaded from YAML."""

    # Optimizer
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999

    # Schedule
    batch_size: int = 4
    steps: int = 500
    checkpoint_every: int = 100
    log_every: int = 10
    seed: int = 0
    threads: int = 1

    # Model
    preset: str = "desk"
    ablation: str = "full"   # full | no_flow | no_audio | landmarks

    # Loss weights
    lambda_l1: float = 50.0
    lambda_vgg: float = 10.0
    lambda_fm: float = 10.0
    lambda_temp: float = 30.0

    # Audio
    audio_half_window: int = 4   # L; window holds 2L parts
    extractor: str = "toy"
    perceptual_seed: int = 1234

    # Extra presets declared in the config file
    presets: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """
        Check field values.

        Raises:
            ConfigError: Naming the offending field.
        """
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.audio_half_window < 1:
            raise ConfigError("audio_half_window must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"Unknown ablation '{self.ablation}'. Available: {', '.join(ABLATIONS)}")
        if self.extractor in RESERVED_EXTRACTORS:
            raise ConfigError(f"Extractor '{self.extractor}' is reserved and not available in this build")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"Unknown extractor '{self.extractor}'. Available: {', '.join(EXTRACTORS)}")
        # Raises ConfigError on bad weights or unknown preset
        self.loss_weights
        arch = self.arch
        if arch.audio_dim != self.audio_dim:
            raise ConfigError(
                f"audio_half_window={self.audio_half_window} gives {self.audio_dim} audio values "
                f"but preset '{arch.name}' expects audio_dim={arch.audio_dim}"
            )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_vgg, self.lambda_fm, self.lambda_temp)

    @property
    def arch(self) -> ArchPreset:
        """Resolve the active preset (config-declared presets win over built-ins)."""
        available = dict(PRESETS)
        for name, data in self.presets.items():
            base = PRESETS.get(name)
            if not isinstance(data, dict):
                raise ConfigError(f"presets.{name} must be a mapping of settings, got {type(data).__name__}")
            merged = {**base.to_dict(), **data} if base else dict(data)
            available[name] = ArchPreset.from_dict(name, merged)

        if self.preset not in available:
            names = ", ".join(available.keys())
            raise ConfigError(
                f"Unknown preset '{self.preset}'. "
                f"Available: {names}"
            )
        preset = available[self.preset]
        preset.validate()
        return preset

    @property
    def audio_dim(self) -> int:
        return 84 + 2 * self.audio_half_window * 27

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        """
        Load config from a YAML file.

        Example:
            preset: desk
            steps: 500
            learning_rate: 0.0002

        Args:
            path: Path to the config file.

        Returns:
            TrainConfig with defaults for keys the file leaves out.

        Raises:
            ConfigError: On a missing file, malformed YAML (with line number),
                unknown keys or invalid values.
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")

        text = path.read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            problem = getattr(e, "problem", None) or str(e)
            raise ConfigError(f"Malformed config {path}: {problem}", line=line) from e

        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a mapping of key: value lines", line=1)
        return cls.from_dict(data, lines=_key_lines(text))

    @classmethod
    def from_dict(cls, data: dict[str, Any], lines: dict[str, int] | None = None) -> "TrainConfig":
        """Build a config from a plain mapping, rejecting unknown keys."""
        lines = lines or {}
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key '{key}'", line=lines.get(key))

        values = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if f.name == "presets":
                if not isinstance(value, dict):
                    raise ConfigError("'presets' must be a mapping of name -> settings", line=lines.get(f.name))
                values[f.name] = value
                continue
            default = f.default
            try:
                if isinstance(default, bool):
                    values[f.name] = bool(value)
                elif isinstance(default, int):
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError(f"expected an integer, got {value}")
                    values[f.name] = int(value)
                elif isinstance(default, float):
                    values[f.name] = float(value)
                else:
                    values[f.name] = str(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid value for '{f.name}': {e}", line=lines.get(f.name)) from e
        return cls(**values)

    def to_yaml(self) -> str:
        """Dump as YAML (round-trips through from_yaml)."""
        data = asdict(self)
        if not data["presets"]:
            data.pop("presets")
        return yaml.safe_dump(data, sort_keys=False)

    def with_overrides(self, **changes: Any) -> "TrainConfig":
        """Copy with some fields replaced (validated)."""
        return replace(self, **changes)

    def __repr__(self) -> str:
        return (
            f"TrainConfig(preset={self.preset!r}, "
            f"ablation={self.ablation!r}, "
            f"steps={self.steps}, "
            f"batch_size={self.batch_size}, "
            f"seed={self.seed})"
        )


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the synthetic morphable model and sequences."""

    n_vertices: int = 300
    n_id: int = 8
    n_exp: int = 8
    resolution: int = 64
    sample_rate: int = 16000
    fps: int = 25
    expression_clip: float = 3.0
    expression_step: float = 0.35
    rotation_step: float = 0.05     # radians per frame, per axis
    rotation_limit: float = 0.5     # radians, per axis
    translation_step: float = 0.01  # image units per frame
    scale: float = 0.8
    scale_jitter: float = 0.02

    @property
    def samples_per_part(self) -> int:
        return self.sample_rate // self.fps


def _key_lines(text: str) -> dict[str, int]:
    """Map top-level YAML keys to their 1-based line numbers."""
    lines = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if isinstance(node, yaml.MappingNode):
        for key_node, _ in node.value:
            lines[str(key_node.value)] = key_node.start_mark.line + 1
    return lines


def resolve_threads(flag: int | None, fallback: int = 1) -> int:
    """
    Pick the thread count: --threads flag, else HEADGAN_LAB_THREADS, else
    `fallback` (a config file's `threads`).

    Raises:
        ConfigError: If the env var isn't a positive integer.
    """
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads must be >= 1")
        return flag
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
    return value
