"""Model and training configuration, plus the ``key=value`` text format.

The same text format serves config files, ``--set`` overrides and the config
block embedded in checkpoints. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass

from .tensor import ConfigError

TASKS = ("classification", "part_seg", "scene_seg")
TASK_K = {"classification": 16, "part_seg": 40, "scene_seg": 40}
TASK_DEPTH = {"classification": 3, "part_seg": 3, "scene_seg": 5}

ENUMS = {
    "task": TASKS,
    "domains": ("both", "spatial", "feature"),
    "pooling": ("max", "avg", "attention"),
    "gate": ("tanh", "sigmoid"),
    "attention": ("offset", "sa"),
    "cpt_bias": ("contextual", "none", "position"),
    "dtype": ("float64", "float32"),
}


@dataclass
class ModelConfig:
    task: str = "classification"
    channels: int = 64
    dkff_layers: int | None = None
    k: int | None = None
    num_classes: int = 40
    num_parts: int = 50
    category_count: int = 16
    dropout_rate: float = 0.5
    global_width: int = 1024
    cls_hidden: tuple[int, ...] = (512, 256)
    seg_hidden: tuple[int, ...] = (512, 256, 128)
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    include_self: bool = False
    use_cpt: bool = True
    domains: str = "both"
    edge_distance: bool = True
    pooling: str = "max"
    gate: str = "tanh"
    attention: str = "offset"
    cpt_bias: str = "contextual"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        _check_enums(self)
        if self.dkff_layers is None:
            self.dkff_layers = TASK_DEPTH[self.task]
        if self.k is None:
            self.k = TASK_K[self.task]
        if self.dkff_layers < 1:
            raise ConfigError(f"dkff_layers must be >= 1, got {self.dkff_layers}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.channels < 1 or self.global_width < 1:
            raise ConfigError("channel widths must be positive")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")
        if self.task != "classification" and self.num_parts < 2:
            raise ConfigError("segmentation needs num_parts >= 2")

    @property
    def uses_category(self) -> bool:
        return self.task == "part_seg"

    @property
    def edge_width(self) -> int:
        return self.channels + (5 if self.edge_distance else 3)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    displacement: bool = True
    scaling: bool = True
    perturbation: bool = True
    shift_range: float = 0.2
    scale_low: float = 2.0 / 3.0
    scale_high: float = 1.5
    jitter_std: float = 0.01
    jitter_clip: float = 0.05
    eval_every: int = 1
    target_val_oa: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be positive")


def _check_enums(cfg) -> None:
    for key, allowed in ENUMS.items():
        if hasattr(cfg, key) and getattr(cfg, key) not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {getattr(cfg, key)!r}")


# ---------------------------------------------------------------------------
# key=value text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, hint, key: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def to_kv(cfg) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_kv_lines(text: str) -> dict[str, str]:
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cls, values: dict[str, str], base=None, strict: bool = True):
    """Build ``cls`` from string values layered over ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {}
    if base is not None:
        kwargs = {n: getattr(base, n) for n in names}
    for key, raw in values.items():
        if key in names:
            kwargs[key] = _parse_value(raw, hints[key], key)
    return cls(**kwargs)


def from_kv(cls, text: str):
    return apply_overrides(cls, parse_kv_lines(text))


def split_overrides(values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    """Route keys to (model, train) configs; unknown keys raise."""
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    model, train = {}, {}
    for key, value in values.items():
        if key in train_keys:
            train[key] = value
        if key in model_keys:
            model[key] = value
        if key not in model_keys and key not in train_keys:
            raise ConfigError(f"unknown config key: {key}")
    return model, train


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


__all__ = [
    "ModelConfig",
    "TrainConfig",
    "to_kv",
    "from_kv",
    "parse_kv_lines",
    "apply_overrides",
    "split_overrides",
    "replace",
]
