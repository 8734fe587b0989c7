"""Run configuration: a strict YAML schema over nested dataclasses."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml


class ConfigError(ValueError):
    """Schema or value violation; ``field`` names the offending dotted key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class DatasetConfig:
    kind: str = "synthetic-shapes"
    num_classes: int = 8
    samples_per_class: int = 64
    test_samples_per_class: int = 32
    image_size: int = 32
    seed: int = 0
    root: Optional[str] = None


@dataclass
class EncoderConfig:
    arch: str = "tiny-vit"
    patch_size: int = 4
    depth: int = 3
    width: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    mlp_input_size: int = 16
    mlp_width: int = 256
    mlp_layers: int = 3


@dataclass
class HeadConfig:
    hidden: int = 512
    bottleneck: int = 64
    out_dim: int = 256


@dataclass
class DistillConfig:
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    ema_momentum: float = 0.996


@dataclass
class StudentOptimConfig:
    kind: str = "adamw"
    base_lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_fraction: float = 0.1
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    clip_grad: float = 3.0


@dataclass
class PolicyOptimConfig:
    kind: str = "adam"
    lr: float = 6e-5
    betas: List[float] = field(default_factory=lambda: [0.5, 0.999])
    decay_milestones: List[float] = field(default_factory=lambda: [0.5, 0.8])
    decay_factor: float = 0.5


@dataclass
class PolicyConfig:
    num_layers: int = 2
    levels: int = 3
    lambda_cat: float = 1.0
    lambda_bern: float = 0.5
    p_init: float = 0.5
    gumbel: bool = False
    hierarchical: bool = True
    search_prob: bool = True
    search_weights: bool = True
    shared: bool = True
    include_geometric: bool = False
    kinds: Optional[List[str]] = None
    magnitudes: Optional[Dict[str, List[float]]] = None
    ops: Optional[List[Dict[str, Any]]] = None


@dataclass
class AugmentConfig:
    mode: str = "autoview"  # autoview | randaug | none
    randaug_n: int = 2
    randaug_m: int = 1
    crop_scale: List[float] = field(default_factory=lambda: [0.4, 1.0])
    flip: bool = True


@dataclass
class ProgressiveConfig:
    enabled: bool = False
    num_stages: int = 4
    min_size: int = 16
    max_size: int = 32


@dataclass
class EvalConfig:
    k_values: List[int] = field(default_factory=lambda: [5, 10, 20])
    temperature: float = 0.07
    crop_ratio: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 64
    alpha: float = 1.0
    symmetrize: bool = True
    precision: str = "float32"
    log_interval: int = 50
    checkpoint_interval: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    student_optim: StudentOptimConfig = field(default_factory=StudentOptimConfig)
    policy_pi_optim: PolicyOptimConfig = field(default_factory=PolicyOptimConfig)
    policy_p_optim: PolicyOptimConfig = field(
        default_factory=lambda: PolicyOptimConfig(lr=1e-5, decay_milestones=[]))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    progressive: ProgressiveConfig = field(default_factory=ProgressiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# ---------------------------------------------------------------------------
# dict <-> dataclass

def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return _from_dict(tp, value, path + ".")
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return [_coerce(v, args[0], f"{path}[{i}]") if args else v for i, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        return {str(k): _coerce(v, args[1], f"{path}.{k}") if args else v for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def _from_dict(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(prefix + str(unknown[0]), "unknown key")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: Optional[dict]) -> RunConfig:
    cfg = _from_dict(RunConfig, data or {})
    validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# validation

def _positive(path: str, value) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ConfigError(path, f"must be > 0 (got {value!r})")


def validate(cfg: RunConfig) -> None:
    from .augment import GEOMETRIC_KINDS, KINDS

    _positive("steps", cfg.steps)
    _positive("batch_size", cfg.batch_size)
    _positive("log_interval", cfg.log_interval)
    if cfg.checkpoint_interval < 0:
        raise ConfigError("checkpoint_interval", "must be >= 0")
    if not (math.isfinite(cfg.alpha) and cfg.alpha >= 0):
        raise ConfigError("alpha", f"must be >= 0 (got {cfg.alpha})")
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError("precision", "must be float32 or float64")
    d = cfg.dataset
    if d.kind not in ("synthetic-shapes", "folder-of-images"):
        raise ConfigError("dataset.kind", "must be synthetic-shapes or folder-of-images")
    if d.kind == "folder-of-images" and not d.root:
        raise ConfigError("dataset.root", "required for folder-of-images")
    for name in ("num_classes", "samples_per_class", "test_samples_per_class", "image_size"):
        _positive(f"dataset.{name}", getattr(d, name))
    e = cfg.encoder
    if e.arch not in ("tiny-vit", "mlp"):
        raise ConfigError("encoder.arch", "must be tiny-vit or mlp")
    for name in ("patch_size", "depth", "width", "heads", "mlp_hidden", "mlp_input_size", "mlp_width", "mlp_layers"):
        _positive(f"encoder.{name}", getattr(e, name))
    if e.width % e.heads:
        raise ConfigError("encoder.width", "must be divisible by encoder.heads")
    if e.arch == "tiny-vit" and e.width % 4:
        raise ConfigError("encoder.width", "must be divisible by 4")
    for name in ("hidden", "bottleneck", "out_dim"):
        _positive(f"head.{name}", getattr(cfg.head, name))
    t = cfg.distill
    _positive("distill.teacher_temp", t.teacher_temp)
    if not t.teacher_temp < t.student_temp:
        raise ConfigError("distill.teacher_temp", "must be smaller than distill.student_temp")
    if not 0 <= t.center_momentum < 1:
        raise ConfigError("distill.center_momentum", "must be in [0, 1)")
    if not 0 <= t.ema_momentum <= 1:
        raise ConfigError("distill.ema_momentum", "must be in [0, 1]")
    s = cfg.student_optim
    if s.kind != "adamw":
        raise ConfigError("student_optim.kind", "only adamw is supported")
    _positive("student_optim.base_lr", s.base_lr)
    if s.min_lr < 0:
        raise ConfigError("student_optim.min_lr", "must be >= 0")
    if not 0 <= s.warmup_fraction < 1:
        raise ConfigError("student_optim.warmup_fraction", "must be in [0, 1)")
    _check_betas("student_optim.betas", s.betas)
    for name in ("policy_pi_optim", "policy_p_optim"):
        po = getattr(cfg, name)
        if po.kind != "adam":
            raise ConfigError(f"{name}.kind", "only adam is supported")
        if not (math.isfinite(po.lr) and po.lr >= 0):
            raise ConfigError(f"{name}.lr", "must be >= 0")
        _check_betas(f"{name}.betas", po.betas)
        if any(not 0 < m < 1 for m in po.decay_milestones):
            raise ConfigError(f"{name}.decay_milestones", "fractions must lie in (0, 1)")
    p = cfg.policy
    if p.num_layers < 1:
        raise ConfigError("policy.num_layers", "must be >= 1")
    if p.levels < 1:
        raise ConfigError("policy.levels", "must be >= 1")
    _positive("policy.lambda_cat", p.lambda_cat)
    _positive("policy.lambda_bern", p.lambda_bern)
    if not 0 < p.p_init < 1:
        raise ConfigError("policy.p_init", "must be in (0, 1)")
    allowed = set(KINDS) | set(GEOMETRIC_KINDS)
    for k in p.kinds or []:
        if k not in allowed:
            raise ConfigError("policy.kinds", f"unknown kind {k!r}")
    for k in (p.magnitudes or {}):
        if k not in allowed:
            raise ConfigError("policy.magnitudes", f"unknown kind {k!r}")
    a = cfg.augment
    if a.mode not in ("autoview", "randaug", "none"):
        raise ConfigError("augment.mode", "must be autoview, randaug or none")
    if a.randaug_n < 0 or a.randaug_m < 0:
        raise ConfigError("augment.randaug_n", "must be >= 0")
    if len(a.crop_scale) != 2 or not 0 < a.crop_scale[0] <= a.crop_scale[1] <= 1:
        raise ConfigError("augment.crop_scale", "must be [lo, hi] with 0 < lo <= hi <= 1")
    g = cfg.progressive
    if g.enabled:
        _positive("progressive.num_stages", g.num_stages)
        if not 0 < g.min_size <= g.max_size:
            raise ConfigError("progressive.min_size", "must satisfy 0 < min_size <= max_size")
        if g.max_size > d.image_size:
            raise ConfigError("progressive.max_size", "cannot exceed dataset.image_size")
    sizes = [cfg.dataset.image_size] if not g.enabled else [g.min_size, g.max_size]
    if e.arch == "tiny-vit":
        for sz in sizes:
            if sz % e.patch_size:
                raise ConfigError("encoder.patch_size", f"image size {sz} not divisible by patch size")
    ev = cfg.eval
    if not ev.k_values or any(k <= 0 for k in ev.k_values):
        raise ConfigError("eval.k_values", "must be a non-empty list of positive integers")
    _positive("eval.temperature", ev.temperature)
    if not 0 < ev.crop_ratio <= 1:
        raise ConfigError("eval.crop_ratio", "must be in (0, 1]")


def _check_betas(path: str, betas) -> None:
    if len(betas) != 2 or not all(0 <= b < 1 for b in betas):
        raise ConfigError(path, "must be two numbers in [0, 1)")


# ---------------------------------------------------------------------------
# files

def parse_text(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigParseError(str(getattr(exc, "problem", exc)), line) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigParseError("top level must be a mapping", 1)
    return data


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    return from_dict(parse_text(text))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def write_effective_config(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "effective_config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def set_dotted(data: dict, key: str, value) -> None:
    """Apply an override ``a.b.c = value`` to a plain-dict config."""
    parts = key.split(".")
    cur = data
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(key, "cannot override inside a non-mapping value")
        cur = nxt
    cur[parts[-1]] = value


def with_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    data = to_dict(cfg)
    for k, v in overrides.items():
        set_dotted(data, k, v)
    return from_dict(data)
