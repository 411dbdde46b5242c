"""Configuration dataclasses, presets, and the flat ``key = value`` config format.

Grammar of a config file, one entry per line::

    # comment
    model.input_resolution = 64
    model.tcb.stage_dims = 4,8,16,32
    model.coefficients = 1/3,1/3,1/3
    sweep.groups = 0.8,0.1,0.1; 0.6,0.2,0.2

Keys are dotted paths into ``RunConfig``. A bare key (``epochs``) is accepted
when it is the unique suffix of one full key. Lists are comma separated,
lists of coefficient groups are ``;`` separated, floats accept ``a/b``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

from .errors import ConfigError, ValidationError

BRANCHES = ("SD1", "SD2", "SD3")
COEFF_TOL = 1e-9


@dataclass(frozen=True)
class EnsembleCoefficients:
    """Convex fusion weights for the three decoder branches."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name, v in zip(("alpha", "beta", "gamma"), self.as_tuple()):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"coefficient {name}={v} outside [0, 1]")
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > COEFF_TOL:
            raise ValidationError(f"coefficients must sum to 1, got alpha+beta+gamma={total!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)

    @classmethod
    def of(cls, values) -> "EnsembleCoefficients":
        values = tuple(float(v) for v in values)
        if len(values) != 3:
            raise ValidationError(f"expected three coefficients, got {len(values)}")
        return cls(*values)


THIRD = 1.0 / 3.0

# default sweep order
DEFAULT_GROUPS = tuple(
    EnsembleCoefficients(*g)
    for g in (
        (0.8, 0.1, 0.1),
        (0.6, 0.2, 0.2),
        (0.1, 0.8, 0.1),
        (0.2, 0.6, 0.2),
        (0.1, 0.1, 0.8),
        (0.2, 0.2, 0.6),
        (THIRD, THIRD, THIRD),
    )
)


@dataclass(frozen=True)
class TcbConfig:
    patch_size: int = 4
    window_size: int = 7
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_dims: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("stage_depths", "stage_dims", "heads"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"model.tcb.{name} needs 4 entries, got {getattr(self, name)}")
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("model.tcb.patch_size and window_size must be >= 1")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"model.tcb.stage_depths must be >= 1, got {self.stage_depths}")
        for i in range(1, 4):
            if self.stage_dims[i] != 2 * self.stage_dims[i - 1]:
                raise ConfigError(f"model.tcb.stage_dims must double at each stage, got {self.stage_dims}")
        for i, (d, h) in enumerate(zip(self.stage_dims, self.heads)):
            if h < 1 or d % h:
                raise ConfigError(f"stage {i + 1}: {h} heads do not divide dim {d}")
        if self.mlp_ratio <= 0:
            raise ConfigError("model.tcb.mlp_ratio must be positive")

    def stage_grids(self, resolution: int) -> list[int]:
        grid = resolution // self.patch_size
        return [grid >> i for i in range(4)]

    def stage_windows(self, resolution: int) -> list[int]:
        """Window per stage; shrinks to the whole grid once the grid is smaller."""
        return [min(self.window_size, g) for g in self.stage_grids(resolution)]


@dataclass(frozen=True)
class CectConfig:
    input_resolution: int = 224
    input_channels: int = 3
    encoder_channels: tuple[int, ...] = (64, 48, 32)
    decoder_hidden: int = 32
    decoder_channels: int = 3
    coefficients: EnsembleCoefficients = EnsembleCoefficients(THIRD, THIRD, THIRD)
    enabled_branches: tuple[str, ...] = BRANCHES
    ln_eps: float = 1e-5
    tcb: TcbConfig = field(default_factory=TcbConfig)

    def __post_init__(self):
        r = self.input_resolution
        if r < 32 or r % 32:
            raise ConfigError(f"model.input_resolution must be a positive multiple of 32, got {r}")
        if len(self.encoder_channels) != 3 or min(self.encoder_channels) < 1:
            raise ConfigError(f"model.encoder_channels needs 3 positive widths, got {self.encoder_channels}")
        if self.decoder_hidden < 1 or self.decoder_channels < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        unknown = set(self.enabled_branches) - set(BRANCHES)
        if unknown or not self.enabled_branches or len(set(self.enabled_branches)) != len(self.enabled_branches):
            raise ConfigError(f"model.enabled_branches must be a non-empty subset of {BRANCHES}, got {self.enabled_branches}")
        check_token_grids(self.tcb, r)
        self.active_coefficients()

    def active_coefficients(self) -> EnsembleCoefficients:
        """Coefficients with disabled branches zeroed and the rest renormalized."""
        raw = self.coefficients.as_tuple()
        kept = [c if b in self.enabled_branches else 0.0 for b, c in zip(BRANCHES, raw)]
        if kept == list(raw):
            return self.coefficients
        total = sum(kept)
        if total <= 0:
            raise ConfigError(f"enabled branches {self.enabled_branches} all have zero coefficient in {raw}")
        return EnsembleCoefficients(*(c / total for c in kept))


def check_token_grids(tcb: TcbConfig, resolution: int) -> None:
    if resolution % tcb.patch_size:
        raise ConfigError(f"resolution {resolution} not divisible by patch size {tcb.patch_size}")
    grid = resolution // tcb.patch_size
    if grid % 8:
        raise ConfigError(
            f"token grid {grid} after patch embedding must be divisible by 8 for three patch merges"
        )
    for i, (g, w) in enumerate(zip(tcb.stage_grids(resolution), tcb.stage_windows(resolution))):
        if g % w:
            raise ConfigError(f"stage {i + 1}: token grid {g} not divisible by window {w}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    initial_lr: float = 0.003
    batch_size: int = 64
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    eval_batch_size: int = 64
    max_steps: int = 0  # 0 means no cap

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.initial_lr <= 0:
            raise ConfigError(f"train.initial_lr must be > 0, got {self.initial_lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"train.plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 0:
            raise ConfigError(f"train.plateau_patience must be >= 0, got {self.plateau_patience}")
        if self.max_steps < 0:
            raise ConfigError(f"train.max_steps must be >= 0, got {self.max_steps}")


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: tuple[float, ...] = (0.6, 1.0)
    crop_ratio: tuple[float, ...] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"augment.crop_scale must lie in (0, 1], got {self.crop_scale}")
        rlo, rhi = self.crop_ratio
        if not 0 < rlo <= rhi:
            raise ConfigError(f"augment.crop_ratio must be positive and ordered, got {self.crop_ratio}")
        if not 0 <= self.flip_p <= 1:
            raise ConfigError(f"augment.flip_p must be in [0, 1], got {self.flip_p}")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("augment.mean/std need three entries with std > 0")


@dataclass(frozen=True)
class DataConfig:
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    synth_n: int = 16

    def __post_init__(self):
        if len(self.ratios) not in (2, 3) or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1) > 1e-9:
            raise ConfigError(f"data.ratios must be 2 or 3 positive values summing to 1, got {self.ratios}")
        if self.synth_n < 1:
            raise ConfigError("data.synth_n must be >= 1")


@dataclass(frozen=True)
class SweepSpec:
    groups: tuple[EnsembleCoefficients, ...] = DEFAULT_GROUPS

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("sweep.groups must not be empty")


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 250

    def __post_init__(self):
        if self.perplexity < 2:
            raise ConfigError(f"tsne.perplexity must be >= 2, got {self.perplexity}")
        if self.iterations < 1:
            raise ConfigError("tsne.iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("tsne.learning_rate must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    model: CectConfig = field(default_factory=CectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    tsne: TsneConfig = field(default_factory=TsneConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


# presets ----------------------------------------------------------------

def _tiny() -> dict[str, Any]:
    return {
        "model.input_resolution": 64,
        "model.encoder_channels": (8, 8, 8),
        "model.decoder_hidden": 8,
        "model.tcb.patch_size": 4,
        "model.tcb.window_size": 4,
        "model.tcb.stage_depths": (1, 1, 1, 1),
        "model.tcb.stage_dims": (4, 8, 16, 32),
        "model.tcb.heads": (1, 1, 2, 4),
        "model.tcb.mlp_ratio": 2.0,
        "train.batch_size": 16,
        "train.eval_batch_size": 32,
        "data.synth_n": 32,
        "tsne.perplexity": 10.0,
    }


def _micro() -> dict[str, Any]:
    return {
        "model.input_resolution": 32,
        "model.encoder_channels": (4, 4, 4),
        "model.decoder_hidden": 4,
        "model.tcb.patch_size": 2,
        "model.tcb.window_size": 4,
        "model.tcb.stage_depths": (1, 1, 1, 1),
        "model.tcb.stage_dims": (2, 4, 8, 16),
        "model.tcb.heads": (1, 1, 2, 2),
        "model.tcb.mlp_ratio": 2.0,
        "train.batch_size": 8,
        "train.eval_batch_size": 8,
        "data.synth_n": 8,
        "tsne.perplexity": 5.0,
    }


PRESETS = {"reference": dict, "tiny": _tiny, "micro": _micro}


# flat key-value machinery -------------------------------------------------

def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _flat_types(cls=RunConfig, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp) and tp is not EnsembleCoefficients:
            out.update(_flat_types(tp, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = tp
    return out


FLAT_TYPES = _flat_types()


def _parse_float(text: str) -> float:
    text = text.strip()
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


def _parse_int(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError as exc:
        raise ValueError(f"not an integer: {text!r}") from exc


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(tp, text: str):
    origin = typing.get_origin(tp)
    if tp is int:
        return _parse_int(text)
    if tp is float:
        return _parse_float(text)
    if tp is bool:
        return _parse_bool(text)
    if tp is str:
        return text.strip()
    if tp is EnsembleCoefficients:
        parts = [p for p in text.split(",")]
        return EnsembleCoefficients.of(_parse_float(p) for p in parts)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        return parse_value(args[0], text)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        if inner is EnsembleCoefficients:
            return tuple(parse_value(inner, g) for g in text.split(";") if g.strip())
        return tuple(parse_value(inner, p) for p in text.split(",") if p.strip())
    raise TypeError(f"unsupported config type {tp}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, EnsembleCoefficients):
        return ",".join(repr(v) for v in value.as_tuple())
    if isinstance(value, tuple):
        if value and isinstance(value[0], EnsembleCoefficients):
            return "; ".join(format_value(v) for v in value)
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_key(key: str) -> str:
    key = key.strip()
    if key in FLAT_TYPES:
        return key
    matches = [k for k in FLAT_TYPES if k.endswith("." + key)]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: could be {', '.join(sorted(matches))}")


def to_flat(cfg, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value) and not isinstance(value, EnsembleCoefficients):
            out.update(to_flat(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def from_flat(flat: dict[str, Any], cls=RunConfig, prefix: str = ""):
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(tp) and tp is not EnsembleCoefficients:
            kwargs[f.name] = from_flat(flat, tp, key + ".")
        elif key in flat:
            kwargs[f.name] = flat[key]
    return cls(**kwargs)


def _coerce(key: str, value):
    """Type-check a preset/override value that is already a Python object."""
    if isinstance(value, str):
        return parse_value(FLAT_TYPES[key], value)
    tp = FLAT_TYPES[key]
    if tp is EnsembleCoefficients and not isinstance(value, EnsembleCoefficients):
        return EnsembleCoefficients.of(value)
    if isinstance(value, list):
        return tuple(value)
    return value


def parse_lines(lines, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, text = line.split("=", 1)
        full = resolve_key(key)
        try:
            out[full] = parse_value(FLAT_TYPES[full], text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: key {full!r} expects {_type_name(FLAT_TYPES[full])}: {exc}") from exc
    return out


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp)).replace("typing.", "")


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | dict[str, Any] | None = None,
    preset: str = "reference",
) -> RunConfig:
    """Build a ``RunConfig``: preset defaults, then the file, then overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    flat = to_flat(RunConfig())
    for key, value in PRESETS[preset]().items():
        flat[key] = value
    if path is not None:
        text = Path(path).read_text()
        flat.update(parse_lines(text.splitlines(), str(path)))
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else (_split_override(o) for o in overrides)
        for key, value in items:
            full = resolve_key(key)
            try:
                flat[full] = _coerce(full, value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"override {key!r} expects {_type_name(FLAT_TYPES[full])}: {exc}") from exc
    try:
        return from_flat(flat)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc


def _split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key, value


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in to_flat(cfg).items())


def config_digest(cfg: CectConfig) -> bytes:
    """SHA-256 over the canonical flat rendering of the architecture config."""
    import hashlib

    text = "".join(f"{k}={format_value(v)}\n" for k, v in to_flat(cfg).items())
    return hashlib.sha256(text.encode("utf-8")).digest()
