"""``gad`` command line: train, eval, gradcheck, knn-bench, synth, ablate.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
``GAD_THREADS`` caps BLAS/numba threads (read before numpy loads).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

ABLATION_AXES = {
    "cpt": ("use_cpt", ("true", "false")),
    "domains": ("domains", ("both", "spatial", "feature")),
    "depth": ("dkff_layers", ("1", "2", "3", "4")),
    "pooling": ("pooling", ("max", "avg", "attention")),
    "gate": ("gate", ("tanh", "sigmoid")),
    "attention": ("attention", ("offset", "sa")),
    "cpt_bias": ("cpt_bias", ("contextual", "none", "position")),
    "edge_distance": ("edge_distance", ("true", "false")),
}


class UsageError(Exception):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("GAD_THREADS")
    if cap:
        for var in THREAD_VARS:
            os.environ.setdefault(var, cap)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_configs(config_file, flag_values: dict[str, str], sets: dict[str, str], data_defaults=None):
    """Layer data-derived defaults < config file < flags < --set; return (model, train)."""
    from .config import ModelConfig, TrainConfig, apply_overrides, parse_kv_lines, split_overrides

    raw: dict[str, str] = dict(data_defaults or {})
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        raw.update(parse_kv_lines(path.read_text()))
    raw.update(flag_values)
    raw.update(sets)
    model_raw, train_raw = split_overrides(raw)
    return apply_overrides(ModelConfig, model_raw), apply_overrides(TrainConfig, train_raw)


def snapshot_text(cfg, tcfg) -> str:
    from .config import to_kv

    model = to_kv(cfg)
    train = "".join(line + "\n" for line in to_kv(tcfg).splitlines() if not line.startswith("seed="))
    return "# resolved model config\n" + model + "# resolved training config\n" + train


def load_data(source: str, data_seed: int = 0):
    """``synth:NAME`` or a manifest path -> {split: Dataset}."""
    from .data import load_manifest, synth_dataset

    if source.startswith("synth:"):
        try:
            return synth_dataset(source.split(":", 1)[1], data_seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    path = Path(source)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise UsageError(f"dataset manifest not found: {path}")
    return load_manifest(path)[1]


def _data_defaults(ds) -> dict[str, str]:
    out = {"task": ds.task}
    if ds.task == "classification":
        out["num_classes"] = str(ds.num_classes)
    else:
        out["num_parts"] = str(ds.num_parts)
        if ds.category_count:
            out["category_count"] = str(ds.category_count)
    return out


def _val_split(splits):
    for name in ("test", "val"):
        if name in splits:
            return splits[name]
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .training import train

    splits = load_data(args.data, args.data_seed)
    if "train" not in splits:
        raise UsageError("dataset has no 'train' split")
    flags = {}
    if args.task:
        flags["task"] = args.task
    if args.epochs is not None:
        flags["epochs"] = str(args.epochs)
    if args.seed is not None:
        flags["seed"] = str(args.seed)
    cfg, tcfg = resolve_configs(args.config, flags, _parse_sets(args.set), _data_defaults(splits["train"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(snapshot_text(cfg, tcfg))

    def progress(row):
        if not args.quiet:
            shown = "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
            print(shown, file=sys.stderr, flush=True)

    result = train(cfg, tcfg, splits["train"], _val_split(splits), out_dir=out, progress=progress)
    print(f"wrote {out / 'metrics.csv'} ({len(result.rows)} epochs), best epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .network import load_params
    from .training import evaluate

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    params, cfg = load_params(ckpt)
    splits = load_data(args.data, args.data_seed)
    if args.split not in splits:
        raise UsageError(f"dataset has no {args.split!r} split (have {sorted(splits)})")
    ds = splits[args.split]
    if args.shuffle is not None:
        ds = ds.subset(np.random.default_rng(args.shuffle).permutation(len(ds)))
    m = evaluate(params, cfg, ds, args.batch_size)
    row = m.as_row()
    width = max(len(k) for k in row)
    print(f"{'metric':<{width}}  value")
    for k, v in row.items():
        print(f"{k:<{width}}  {v:.4f}")
    csv_text = ",".join(row) + "\n" + ",".join(repr(v) for v in row.values()) + "\n"
    print()
    print(csv_text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import tensor as T
    from .gradcheck import format_report, run_suite

    def log(rep):
        print(format_report(rep), flush=True)

    if args.inject_fault:
        with T.inject_fault(args.inject_fault):
            reports = run_suite(args.eps, args.seed, only=args.only, log=log)
    else:
        reports = run_suite(args.eps, args.seed, only=args.only, log=log)
    if not reports:
        raise UsageError("no gradient-check items selected")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(reports)} items passed (max relative error < {reports[0].tol:g})")
    return EXIT_OK


def cmd_knn_bench(args) -> int:
    import time

    import numpy as np

    from .knn import KDTree, knn_brute

    rng = np.random.default_rng(args.seed)
    rows = ["N,k,domain,method,ms"]
    mismatches = []
    timing = {}
    for n in args.sizes:
        clouds = [rng.uniform(-1.0, 1.0, size=(n, 3)) for _ in range(args.instances)]
        for k in args.ks:
            for method in ("brute", "kdtree"):
                total = 0.0
                results = []
                for pts in clouds:
                    t0 = time.perf_counter()
                    idx = knn_brute(pts, k).indices if method == "brute" else KDTree(pts).self_knn(k)
                    total += time.perf_counter() - t0
                    results.append(idx)
                ms = 1000.0 * total / len(clouds)
                timing[(n, k, method)] = (ms, results)
                rows.append(f"{n},{k},spatial,{method},{ms:.3f}")
            brute, kd = timing[(n, k, "brute")][1], timing[(n, k, "kdtree")][1]
            if any(not np.array_equal(a, b) for a, b in zip(brute, kd)):
                mismatches.append((n, k))
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    big = max(args.sizes)
    for k in args.ks:
        if timing[(big, k, "kdtree")][0] >= timing[(big, k, "brute")][0]:
            print(f"warning: kdtree not faster than brute at N={big}, k={k}", file=sys.stderr)
    if mismatches:
        print(f"FAILED: kdtree and brute force disagree at {mismatches}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import write_synth

    try:
        path = write_synth(args.name, args.out, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {path}")
    return EXIT_OK


def ablation_grid(axes, grid_items) -> list[dict[str, str]]:
    """Cartesian product of the requested axes -> list of override dicts."""
    import itertools

    columns: list[tuple[str, tuple[str, ...]]] = []
    for name in axes or []:
        if name not in ABLATION_AXES:
            raise UsageError(f"unknown ablation axis {name!r}; choose from {sorted(ABLATION_AXES)}")
        columns.append(ABLATION_AXES[name])
    for item in grid_items or []:
        if "=" not in item:
            raise UsageError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        columns.append((key.strip(), tuple(v.strip() for v in values.split(",") if v.strip())))
    if not columns:
        raise UsageError("ablate needs at least one --axes entry or --grid key=values")
    keys = [k for k, _ in columns]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in columns))]


def run_ablation(splits, grid, seeds, base_flags, sets, config_file=None, log=None):
    """Train every grid row for every seed; return rows with per-seed test OA."""
    from .training import train

    val = _val_split(splits)
    rows = []
    for variant in grid:
        scores = {}
        for seed in seeds:
            layered = {**sets, **variant, "seed": str(seed)}
            cfg, tcfg = resolve_configs(config_file, base_flags, layered, _data_defaults(splits["train"]))
            result = train(cfg, tcfg, splits["train"], val)
            scores[seed] = result.rows[-1].get("val_OA", float("nan"))
            if log is not None:
                log(variant, seed, scores[seed])
        rows.append({"variant": variant, "scores": scores})
    return rows


def ablation_csv(rows, seeds) -> str:
    keys = list(rows[0]["variant"]) if rows else []
    lines = [",".join(keys + [f"OA_seed{s}" for s in seeds] + ["OA_mean"])]
    for r in rows:
        vals = [r["scores"][s] for s in seeds]
        mean = sum(vals) / len(vals)
        lines.append(",".join([r["variant"][k] for k in keys] + [repr(v) for v in vals] + [repr(mean)]))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    splits = load_data(args.data, args.data_seed)
    grid = ablation_grid(args.axes, args.grid)
    flags = {"epochs": str(args.epochs)} if args.epochs is not None else {}

    def log(variant, seed, oa):
        if not args.quiet:
            tag = " ".join(f"{k}={v}" for k, v in variant.items())
            print(f"{tag} seed={seed} OA={oa:.4f}", file=sys.stderr, flush=True)

    rows = run_ablation(splits, grid, args.seeds, flags, _parse_sets(args.set), args.config, log)
    text = ablation_csv(rows, args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(text)
    header = text.splitlines()[0].split(",")
    widths = [max(len(h), 8) for h in header]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for line in text.splitlines()[1:]:
        cells = line.split(",")
        shown = [c if i < len(grid[0]) else f"{float(c):.4f}" for i, c in enumerate(cells)]
        print("  ".join(c.rjust(w) for c, w in zip(shown, widths)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gad", description="Point-cloud classification and segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--data", default="synth:cls4", help="synth:NAME or a manifest path (default synth:cls4)")
        sp.add_argument("--data-seed", type=int, default=0, help="seed for synthetic data generation")

    sp = sub.add_parser("train", help="train a model and write metrics.csv plus checkpoints")
    common_config(sp)
    sp.add_argument("--task", choices=("classification", "part_seg", "scene_seg"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs/train")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default="synth:cls4")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--split", default="test")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--shuffle", type=int, metavar="SEED", help="permute the dataset before evaluating")
    sp.add_argument("--csv", help="also write the metrics CSV here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--only", action="append", help="run items whose name contains this text")
    sp.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("knn-bench", help="time and cross-check brute force vs kd-tree KNN")
    sp.add_argument("--sizes", type=_int_list, default=[1000, 4000, 16000])
    sp.add_argument("--ks", type=_int_list, default=[8, 12, 16, 20, 24])
    sp.add_argument("--instances", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="timing CSV path (default stdout)")
    sp.set_defaults(func=cmd_knn_bench)

    sp = sub.add_parser("synth", help="write a synthetic dataset as GADB files plus a manifest")
    sp.add_argument("--name", default="cls4")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ablate", help="train a grid of model variants and tabulate test OA")
    common_config(sp)
    sp.add_argument("--axes", type=lambda s: [a for a in s.split(",") if a], default=[],
                    help=f"comma list from {','.join(ABLATION_AXES)}")
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="explicit axis (repeatable)")
    sp.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", default="runs/ablate")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    from .data import DataFormatError
    from .network import CheckpointError
    from .tensor import ConfigError
    from .training import DataError

    try:
        return args.func(args)
    except (UsageError, ConfigError, DataFormatError, DataError, CheckpointError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except BrokenPipeError:
        # reader went away (e.g. `gad gradcheck | head`); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
