"""Central-difference gradient checks for every op, both blocks and a tiny model.

Relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``. The
floor tracks the rounding noise of the difference quotient,
``64 * ulp(max(|f|, 1)) / (eps * tol)`` (never below 1e-6), so gradients that
are structurally zero are judged on absolute error instead of noise. A
coordinate whose forward and backward one-sided slopes disagree by at least
half the mismatch sits on a kink (LeakyReLU corner, max-pool switch, KNN
reordering); it carries no derivative and is skipped. A coordinate that
disagrees at ``eps`` is re-probed at ``eps/10`` and ``eps/100`` first, which
separates non-smoothness inside a coarse step from a wrong derivative. An
item that hits kinks is rebuilt from the next seed, up to three attempts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import CptParams, DkffParams, cpt_forward, dkff_forward, edge_features
from .network import classify_forward, init_params, named_parameters, segment_forward
from .tensor import BatchNormState, Tensor
from .training import cross_entropy

TOLERANCE = 1e-4
DENOM_FLOOR = 1e-6
ATTEMPTS = 3
NOISE_ULPS = 64


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst: str
    checked: int
    kinks: int
    attempts: int
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    fn: Callable[[], Tensor],
    inputs: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "",
    tol: float = TOLERANCE,
) -> GradReport:
    """Compare tape gradients of scalar ``fn()`` against central differences."""
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    with T.Tape() as tape:
        loss = fn()
        tape.backward(loss)
    f0 = float(loss.data)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}

    def value() -> float:
        with T.no_tape():
            return float(fn().data)

    floor = max(DENOM_FLOOR, NOISE_ULPS * float(np.spacing(max(abs(f0), 1.0))) / (eps * tol))
    worst, where, checked, kinks = 0.0, "-", 0, 0
    for key, t in inputs.items():
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            picks = np.sort(rng.choice(flat.size, max_coords, replace=False))
        a_flat = analytic[key].reshape(-1)
        for i in picks:
            a = float(a_flat[i])
            orig = flat[i]
            best, best_num, kinked = math.inf, math.nan, False
            for step in (eps, eps / 10, eps / 100):
                flat[i] = orig + step
                fp = value()
                flat[i] = orig - step
                fm = value()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                diff = abs(a - num)
                err = diff / max(abs(a) + abs(num), floor)
                kinked = abs((fp - f0) / step - (f0 - fm) / step) >= 0.5 * diff
                if err < best:
                    best, best_num = err, num
                if err < tol:
                    break
            checked += 1
            if best >= tol and kinked:
                kinks += 1
                continue
            if best > worst:
                worst, where = best, f"{key}[{tuple(int(j) for j in np.unravel_index(i, t.shape))}] analytic={a:.6g} numeric={best_num:.6g}"
    return GradReport(name, worst, where, checked, kinks, 1, tol)


# ---------------------------------------------------------------------------
# suite items: each builder maps an rng to (fn, inputs)


def _t(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, r: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(r)))


def _unary(op):
    def build(rng):
        if op in (T.abs_, T.leaky_relu):
            x = _away_from_zero(rng, 3, 4)
        elif op is T.sqrt:
            x = _t(rng, 3, 4, low=0.3, high=2.0)
        else:
            x = _t(rng, 3, 4)
        r = rng.normal(size=(3, 4))
        return (lambda: _project(op(x), r)), {"x": x}

    return build


def _binary(op):
    def build(rng):
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
        r = rng.normal(size=(2, 3, 4))
        return (lambda: _project(op(a, b), r)), {"a": a, "b": b}

    return build


def _shape_item(make, in_shape):
    def build(rng):
        x = _t(rng, *in_shape)
        probe = make(Tensor(x.data))
        r = rng.normal(size=probe.shape)
        return (lambda: _project(make(x), r)), {"x": x}

    return build


def _concat(rng):
    a, b = _t(rng, 2, 5, 3), _t(rng, 2, 5, 4)
    r = rng.normal(size=(2, 5, 7))
    return (lambda: _project(T.concat_channels([a, b]), r)), {"a": a, "b": b}


def _gather(rng):
    v = _t(rng, 2, 6, 3)
    idx = rng.integers(0, 6, size=(2, 6, 4))
    r = rng.normal(size=(2, 6, 4, 3))
    return (lambda: _project(T.gather_rows(v, idx), r)), {"values": v}


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    r = rng.normal(size=(2, 3, 5))
    return (lambda: _project(T.matmul(a, b), r)), {"a": a, "b": b}


def _linear(rng):
    x, w, b = _t(rng, 2, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    r = rng.normal(size=(2, 5, 3))
    return (lambda: _project(T.linear(x, w, b), r)), {"x": x, "weight": w, "bias": b}


def _softmax(rng):
    x = _t(rng, 3, 5, low=-2, high=2)
    r = rng.normal(size=(3, 5))
    return (lambda: _project(T.softmax_rows(x), r)), {"x": x}


def _max_axis(rng):
    x = _t(rng, 3, 5, 4)
    r = rng.normal(size=(3, 4))
    return (lambda: _project(T.max_over_axis(x, axis=-2)[0], r)), {"x": x}


def _batch_norm(training):
    def build(rng):
        x, g, b = _t(rng, 2, 6, 3), _t(rng, 3, low=0.5, high=1.5), _t(rng, 3)
        state = BatchNormState.create(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        r = rng.normal(size=(2, 6, 3))
        return (lambda: _project(T.batch_norm(x, state, g, b, training), r)), {"x": x, "gamma": g, "beta": b}

    return build


def _mlp_stage(training, act=True):
    def build(rng):
        x, w = _t(rng, 2, 6, 4), _t(rng, 4, 3)
        g, b = _t(rng, 3, low=0.5, high=1.5), _t(rng, 3)
        state = BatchNormState.create(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = rng.uniform(0.5, 2.0, size=3)
        r = rng.normal(size=(2, 6, 3))
        slope = T.LEAKY_SLOPE if act else None
        fn = lambda: _project(T.mlp_stage(x, w, g, b, state, slope, training), r)  # noqa: E731
        return fn, {"x": x, "weight": w, "gamma": g, "beta": b}

    return build


def _dropout(rng):
    x = _t(rng, 4, 5)
    r = rng.normal(size=(4, 5))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(T.dropout(x, 0.5, True, np.random.default_rng(seed)), r)), {"x": x}


def _edge_features(use_distance):
    def build(rng):
        x, f = _t(rng, 2, 7, 3), _t(rng, 2, 7, 4)
        idx = np.stack([np.stack([rng.permutation([j for j in range(7) if j != i])[:3] for i in range(7)]) for _ in range(2)])
        r = rng.normal(size=(2, 7, 3, 4 + (5 if use_distance else 3)))
        return (lambda: _project(edge_features(x, f, idx, use_distance), r)), {"coords": x, "features": f}

    return build


def _cross_entropy(rng):
    z = _t(rng, 4, 5, low=-2, high=2)
    y = rng.integers(0, 5, size=4)
    return (lambda: cross_entropy(z, y)), {"logits": z}


def _cross_entropy_points(rng):
    z = _t(rng, 2, 3, 4, low=-2, high=2)
    y = rng.integers(0, 4, size=(2, 3))
    return (lambda: cross_entropy(z, y)), {"logits": z}


def _tiny_cfg(**kw) -> ModelConfig:
    base = dict(channels=4, k=3, num_classes=2, global_width=8, cls_hidden=(8, 8), seg_hidden=(8, 8), seed=0)
    base.update(kw)
    return ModelConfig(**base)


def _param_inputs(obj, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{n}": t for n, t in named_parameters(obj)}


def _cpt(**kw):
    def build(rng):
        cfg = _tiny_cfg(**kw)
        params = CptParams.create(cfg, rng)
        x = _t(rng, 2, 8, 3)
        r = rng.normal(size=(2, 8, 4))
        inputs = {"coords": x, **_param_inputs(params, "cpt")}
        return (lambda: _project(cpt_forward(x, params, cfg, True), r)), inputs

    return build


def _dkff(**kw):
    def build(rng):
        cfg = _tiny_cfg(**kw)
        params = DkffParams.create(cfg, rng)
        x, f = _t(rng, 2, 8, 3), _t(rng, 2, 8, 4)
        r = rng.normal(size=(2, 8, 4))
        inputs = {"coords": x, "f_in": f, **_param_inputs(params, "dkff")}
        return (lambda: _project(dkff_forward(x, f, params, cfg, True), r)), inputs

    return build


def _classifier(rng):
    cfg = _tiny_cfg()
    params = init_params(cfg, rng)
    x = _t(rng, 3, 8, 3)
    y = rng.integers(0, 2, size=3)
    seed = int(rng.integers(1 << 31))
    fn = lambda: cross_entropy(classify_forward(x, params, cfg, True, np.random.default_rng(seed)), y)  # noqa: E731
    return fn, {"coords": x, **_param_inputs(params, "model")}


def _segmenter(rng):
    cfg = _tiny_cfg(task="part_seg", num_parts=3, category_count=2, dkff_layers=2)
    params = init_params(cfg, rng)
    x = _t(rng, 2, 8, 3)
    y = rng.integers(0, 3, size=(2, 8))
    onehot = np.eye(2)[[0, 1]]
    seed = int(rng.integers(1 << 31))
    fn = lambda: cross_entropy(segment_forward(x, params, cfg, onehot, True, np.random.default_rng(seed)), y)  # noqa: E731
    return fn, {"coords": x, **_param_inputs(params, "model")}


SUITE: list[tuple[str, Callable, int | None]] = [
    ("add", _binary(T.add), None),
    ("sub", _binary(T.sub), None),
    ("mul", _binary(T.mul), None),
    ("scale", _shape_item(lambda x: T.scale(x, -1.7), (3, 4)), None),
    ("leaky_relu", _unary(T.leaky_relu), None),
    ("tanh", _unary(T.tanh), None),
    ("sigmoid", _unary(T.sigmoid), None),
    ("abs", _unary(T.abs_), None),
    ("sqrt", _unary(T.sqrt), None),
    ("square", _unary(T.square), None),
    ("reshape", _shape_item(lambda x: T.reshape(x, (4, 6)), (2, 3, 4)), None),
    ("transpose", _shape_item(T.transpose, (2, 3, 4)), None),
    ("swapaxes", _shape_item(lambda x: T.swapaxes(x, 0, 2), (2, 3, 4)), None),
    ("sum_all", _shape_item(T.sum_all, (3, 4)), None),
    ("sum_axis", _shape_item(lambda x: T.sum_axis(x, 1), (2, 3, 4)), None),
    ("mean_axis", _shape_item(lambda x: T.mean_axis(x, -1), (2, 3, 4)), None),
    ("expand", _shape_item(lambda x: T.expand(x, -2, 3), (2, 4)), None),
    ("max_over_axis", _max_axis, None),
    ("concat", _concat, None),
    ("gather_rows", _gather, None),
    ("matmul", _matmul, None),
    ("linear", _linear, None),
    ("softmax", _softmax, None),
    ("batch_norm[train]", _batch_norm(True), None),
    ("batch_norm[eval]", _batch_norm(False), None),
    ("mlp_stage[train]", _mlp_stage(True), None),
    ("mlp_stage[eval]", _mlp_stage(False), None),
    ("mlp_stage[no_act]", _mlp_stage(True, act=False), None),
    ("dropout", _dropout, None),
    ("edge_features", _edge_features(True), None),
    ("edge_features[no_dist]", _edge_features(False), None),
    ("cross_entropy", _cross_entropy, None),
    ("cross_entropy[points]", _cross_entropy_points, None),
    ("cpt", _cpt(), None),
    ("cpt[sa]", _cpt(attention="sa"), None),
    ("cpt[position_bias]", _cpt(cpt_bias="position"), None),
    ("dkff", _dkff(), None),
    ("dkff[avg]", _dkff(pooling="avg"), None),
    ("dkff[attention_pool]", _dkff(pooling="attention"), None),
    ("dkff[sigmoid]", _dkff(gate="sigmoid"), None),
    ("dkff[spatial_only]", _dkff(domains="spatial"), None),
    ("classifier_end_to_end", _classifier, 48),
    ("segmenter_end_to_end", _segmenter, 24),
]


def run_item(name: str, build, max_coords, eps: float, seed: int, tol: float = TOLERANCE) -> GradReport:
    report = None
    for attempt in range(ATTEMPTS):
        rng = np.random.default_rng([seed, attempt, _stable_hash(name)])
        fn, inputs = build(rng)
        report = grad_check(fn, inputs, eps, max_coords, rng, name, tol)
        report.attempts = attempt + 1
        if report.kinks == 0 or not report.passed:
            break
    return report


def _stable_hash(s: str) -> int:
    return sum((i + 1) * b for i, b in enumerate(s.encode())) % 100003


def run_suite(eps: float = 1e-5, seed: int = 0, tol: float = TOLERANCE, only=None, log=None) -> list[GradReport]:
    reports = []
    for name, build, cap in SUITE:
        if only and not any(o in name for o in only):
            continue
        rep = run_item(name, build, cap, eps, seed, tol)
        reports.append(rep)
        if log is not None:
            log(rep)
    return reports


def format_report(rep: GradReport) -> str:
    status = "PASS" if rep.passed else "FAIL"
    err = f"{rep.max_rel_error:.3e}" if math.isfinite(rep.max_rel_error) else "nan"
    return f"{status}  {rep.name:<26} max_rel_err={err}  coords={rep.checked} kinks={rep.kinks}  worst: {rep.worst}"
