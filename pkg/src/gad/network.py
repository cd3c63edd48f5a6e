"""Full network: shared stem (CPT + cascaded DKFF) and the two task branches.

Also owns parameter initialization and the checkpoint file format.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig, from_kv, to_kv
from .layers import CptParams, DkffParams, Linear, Stage, _dtype, cpt_forward, dkff_forward, neighbor_index
from .tensor import BatchNormState, ConfigError, Tensor

CHECKPOINT_MAGIC = b"GADC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Head:
    hidden: list[Stage]
    out: Linear


@dataclass
class ModelParams:
    cpt: CptParams
    dkff: list[DkffParams]
    global_mlp: Stage
    cls_head: Head | None = None
    seg_head: Head | None = None


@dataclass
class ForwardTrace:
    cpt_out: Tensor
    dkff_outs: list[Tensor]
    global_vector: Tensor | None = None
    spatial_index: np.ndarray | None = None


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Linear weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases 0; BN gamma 1, beta 0."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    c = cfg.channels
    cpt = CptParams.create(cfg, rng)
    dkff = [DkffParams.create(cfg, rng) for _ in range(cfg.dkff_layers)]
    global_mlp = Stage.create(cfg.dkff_layers * c, cfg.global_width, rng, cfg)
    cls_head = seg_head = None
    if cfg.task == "classification":
        widths = [c + cfg.global_width, *cfg.cls_hidden]
        hidden = [Stage.create(a, b, rng, cfg) for a, b in zip(widths[:-1], widths[1:])]
        cls_head = Head(hidden, Linear.create(widths[-1], cfg.num_classes, rng, cfg))
    else:
        cat = cfg.category_count if cfg.uses_category else 0
        widths = [c + cfg.dkff_layers * c + cfg.global_width + cat, *cfg.seg_hidden]
        hidden = [Stage.create(a, b, rng, cfg) for a, b in zip(widths[:-1], widths[1:])]
        seg_head = Head(hidden, Linear.create(widths[-1], cfg.num_parts, rng, cfg))
    return ModelParams(cpt, dkff, global_mlp, cls_head, seg_head)


def _walk(obj, prefix: str) -> Iterator[tuple[str, object]]:
    if isinstance(obj, (Tensor, BatchNormState)):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None or isinstance(value, bool):
                continue
            yield from _walk(value, f"{prefix}.{f.name}" if prefix else f.name)


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t in _walk(params, "") if isinstance(t, Tensor)]


def named_bn_states(params: ModelParams) -> list[tuple[str, BatchNormState]]:
    return [(n, s) for n, s in _walk(params, "") if isinstance(s, BatchNormState)]


def parameters(params: ModelParams) -> list[Tensor]:
    return [t for _, t in named_parameters(params)]


def parameter_count(params: ModelParams) -> int:
    return int(sum(t.data.size for t in parameters(params)))


def named_tensors(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Every array that defines the model: learnable weights and BN running stats."""
    out = [(n, t.data) for n, t in named_parameters(params)]
    for n, s in named_bn_states(params):
        out.append((f"{n}.running_mean", s.running_mean))
        out.append((f"{n}.running_var", s.running_var))
    return out


# ---------------------------------------------------------------------------
# forward


def as_coords(cloud, cfg: ModelConfig) -> Tensor:
    """Accept a PointCloud, a list of equal-size PointClouds, an array or a Tensor."""
    if isinstance(cloud, Tensor):
        data = cloud.data
    elif isinstance(cloud, (list, tuple)):
        data = np.stack([np.asarray(getattr(c, "coords", c)) for c in cloud])
    else:
        data = np.asarray(getattr(cloud, "coords", cloud))
    if data.shape[-1] != 3 or data.ndim not in (2, 3):
        raise ConfigError(f"coordinates must be (N, 3) or (B, N, 3), got {data.shape}")
    return Tensor(data.astype(_dtype(cfg), copy=False))


def stem_forward(coords: Tensor, params: ModelParams, cfg: ModelConfig, training: bool = False) -> ForwardTrace:
    """CPT embedding followed by the DKFF cascade; records every level."""
    n = coords.shape[-2]
    available = n if cfg.include_self else n - 1
    if cfg.k > available:
        raise ConfigError(f"k={cfg.k} too large for clouds of {n} points")
    f = cpt_forward(coords, params.cpt, cfg, training)
    spatial_index = None
    if cfg.domains in ("both", "spatial"):
        spatial_index = neighbor_index(coords.data, cfg.k, cfg.include_self)
    outs = []
    h = f
    for block in params.dkff:
        h = dkff_forward(coords, h, block, cfg, training, spatial_index=spatial_index)
        outs.append(h)
    return ForwardTrace(f, outs, spatial_index=spatial_index)


def _global_vector(trace: ForwardTrace, params: ModelParams, cfg: ModelConfig, training: bool) -> Tensor:
    h = T.concat_channels(trace.dkff_outs) if len(trace.dkff_outs) > 1 else trace.dkff_outs[0]
    h = params.global_mlp(h, training, cfg.leaky_slope)
    g, _ = T.max_over_axis(h, axis=-2)
    trace.global_vector = g
    return g


def classify_forward(
    coords: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace_out: list | None = None,
) -> Tensor:
    """Logits (B, num_classes), or (num_classes,) for a single cloud."""
    if params.cls_head is None:
        raise ConfigError("model was built without a classification head")
    single = coords.ndim == 2
    if single:
        coords = Tensor(coords.data[None])
    trace = stem_forward(coords, params, cfg, training)
    g0, _ = T.max_over_axis(trace.cpt_out, axis=-2)
    g1 = _global_vector(trace, params, cfg, training)
    h = T.concat_channels([g0, g1])
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    for stage in params.cls_head.hidden:
        h = stage(h, training, cfg.leaky_slope)
        h = T.dropout(h, cfg.dropout_rate, training, rng)
    logits = params.cls_head.out(h)
    if trace_out is not None:
        trace_out.append(trace)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def segment_forward(
    coords: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    category_onehot: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace_out: list | None = None,
) -> Tensor:
    """Per-point logits (B, N, num_parts), or (N, num_parts) for a single cloud."""
    if params.seg_head is None:
        raise ConfigError("model was built without a segmentation head")
    single = coords.ndim == 2
    if single:
        coords = Tensor(coords.data[None])
        if category_onehot is not None:
            category_onehot = np.asarray(category_onehot)[None]
    b, n, _ = coords.shape
    trace = stem_forward(coords, params, cfg, training)
    g = _global_vector(trace, params, cfg, training)
    parts = [trace.cpt_out, *trace.dkff_outs, T.expand(g, -2, n)]
    if cfg.uses_category:
        if category_onehot is None:
            raise ConfigError("part segmentation needs a category one-hot vector")
        onehot = np.asarray(category_onehot, dtype=coords.dtype)
        if onehot.shape != (b, cfg.category_count):
            raise ConfigError(f"category vector shape {onehot.shape} != ({b}, {cfg.category_count})")
        parts.append(Tensor(np.repeat(onehot[:, None, :], n, axis=1)))
    elif category_onehot is not None and cfg.task == "scene_seg":
        raise ConfigError("scene segmentation takes no category vector")
    h = T.concat_channels(parts)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    for i, stage in enumerate(params.seg_head.hidden):
        h = stage(h, training, cfg.leaky_slope)
        if i == 0:
            h = T.dropout(h, cfg.dropout_rate, training, rng)
    logits = params.seg_head.out(h)
    if trace_out is not None:
        trace_out.append(trace)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def model_forward(coords: Tensor, params: ModelParams, cfg: ModelConfig, category_onehot=None, training=False, rng=None):
    if cfg.task == "classification":
        return classify_forward(coords, params, cfg, training, rng)
    return segment_forward(coords, params, cfg, category_onehot, training, rng)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: ModelParams, cfg: ModelConfig) -> None:
    """Write ``GADC`` v1: config block then named little-endian f64 tensors."""
    cfg_bytes = to_kv(cfg).encode("utf-8")
    tensors = named_tensors(params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)), cfg_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a GADC checkpoint (bad magic)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = from_kv(ModelConfig, r.take(r.u32("config length"), "config").decode("utf-8"))
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count, f"{name} payload"), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return cfg, tensors


def load_params(path, cfg: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Rebuild parameters; if ``cfg`` is given, shapes are checked against it."""
    stored_cfg, tensors = read_checkpoint(path)
    cfg = cfg or stored_cfg
    params = init_params(cfg, np.random.default_rng(0))
    dt = _dtype(cfg)
    expected = named_tensors(params)
    names = {n for n, _ in expected}
    missing = names - set(tensors)
    extra = set(tensors) - names
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors disagree with config: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, arr in expected:
        if tensors[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name}: checkpoint shape {tensors[name].shape} != expected {arr.shape}")
    by_name = dict(named_parameters(params))
    for name, t in by_name.items():
        t.data = tensors[name].astype(dt)
    for name, s in named_bn_states(params):
        s.running_mean = tensors[f"{name}.running_mean"].astype(dt)
        s.running_var = tensors[f"{name}.running_var"].astype(dt)
    return params, cfg
