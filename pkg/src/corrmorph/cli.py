"""Command-line entry point.

One binary with subcommands mapping 1:1 onto the library: gen-data, train,
simulate, evaluate, ablate, gradcheck, convert. Options may come from a JSON
config file (--config) with flags taking precedence; unknown config keys are
rejected. Exit codes: 0 success, 2 usage/config error, 3 runtime failure, each
with a one-line machine-parsable `error category=<cat>: <message>` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.category = category
        self.code = code


_CONFIG_SECTIONS = ("gen", "train", "paths")
_PATH_KEYS = {"data", "out"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    from .synthdata import GenParams
    from .trainer import TrainConfig

    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise CliError("config", f"config file not found: {path}", EXIT_USAGE) from e
    except json.JSONDecodeError as e:
        raise CliError("config", f"config file is not valid JSON: {e}", EXIT_USAGE) from e
    if not isinstance(raw, dict):
        raise CliError("config", "config root must be a JSON object", EXIT_USAGE)
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        raise CliError("config", f"unknown config sections: {sorted(unknown)}", EXIT_USAGE)
    allowed = {
        "gen": {f.name for f in dc_fields(GenParams)},
        "train": {f.name for f in dc_fields(TrainConfig)},
        "paths": _PATH_KEYS,
    }
    for section, keys in allowed.items():
        bad = set(raw.get(section, {})) - keys
        if bad:
            raise CliError(
                "config", f"unknown keys in config section {section!r}: {sorted(bad)}", EXIT_USAGE
            )
    return raw


def _pick(args_value, config: dict, section: str, key: str, default):
    """Flag > config file > default."""
    if args_value is not None:
        return args_value
    return config.get(section, {}).get(key, default)


# ---------------------------------------------------------------------------
# Subcommand handlers


def cmd_gen_data(args) -> int:
    from .synthdata import GenParams, build_dataset

    config = load_config(args.config)
    out = _pick(args.out, config, "paths", "data", None)
    if out is None:
        raise CliError("config", "gen-data needs --out (or paths.data in the config)", EXIT_USAGE)
    gen_cfg = dict(config.get("gen", {}))
    gen_cfg["seed"] = _pick(args.seed, {"gen": gen_cfg}, "gen", "seed", 7)
    gen_cfg["sample_points"] = _pick(args.points, {"gen": gen_cfg}, "gen", "sample_points", 512)
    gen_cfg["subdivisions"] = _pick(args.subdiv, {"gen": gen_cfg}, "gen", "subdivisions", 3)
    try:
        params = GenParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in gen_cfg.items()})
    except (TypeError, ValueError) as e:
        raise CliError("config", f"bad generator parameters: {e}", EXIT_USAGE) from e
    manifest = build_dataset(out, args.cases, args.folds, params, jobs=args.jobs)
    print(f"wrote {len(manifest['cases'])} cases, {len(manifest['folds'])} folds -> {out}")
    return EXIT_OK


def _train_config(args, config: dict):
    from .losses import LossWeights
    from .trainer import TrainConfig

    tr = dict(config.get("train", {}))
    if "weights" in tr and isinstance(tr["weights"], dict):
        tr["weights"] = LossWeights(**tr["weights"])
    for key, val in (
        ("epochs", args.epochs),
        ("batch_size", getattr(args, "batch_size", None)),
        ("lr", getattr(args, "lr", None)),
        ("preset", getattr(args, "preset", None)),
        ("variant", getattr(args, "variant", None)),
        ("seed", args.seed),
    ):
        if val is not None:
            tr[key] = val
    if getattr(args, "no_holdout", False):
        tr["fold"] = None
    elif args.fold is not None:
        tr["fold"] = args.fold
    try:
        return TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise CliError("config", f"bad training configuration: {e}", EXIT_USAGE) from e


def cmd_train(args) -> int:
    from .trainer import TrainingDiverged, train

    config = load_config(args.config)
    data = _pick(args.data, config, "paths", "data", None)
    out = _pick(args.out, config, "paths", "out", None)
    if data is None or out is None:
        raise CliError("config", "train needs --data and --out", EXIT_USAGE)
    cfg = _train_config(args, config)
    try:
        _, history = train(cfg, data, out, log_every=args.log_every)
    except TrainingDiverged as e:
        raise CliError("divergence", str(e)) from e
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {cfg.variant}/{cfg.preset} for {cfg.epochs} epochs, final loss {final:.6f}")
    print(f"checkpoint -> {Path(out) / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .fileio import write_mesh
    from .trainer import load_case, load_params, simulate

    params, _ = load_params(args.checkpoint)
    case = load_case(args.case)
    mesh, seconds = simulate(params, case)
    write_mesh(args.out, mesh)
    print(f"simulated {case.name} in {seconds:.3f}s -> {args.out}")
    return EXIT_OK


def _error_colors(err: np.ndarray) -> np.ndarray:
    """Blue (0) -> red (max) per-vertex colormap for external mesh viewers."""
    top = err.max() if err.max() > 0 else 1.0
    t = np.clip(err / top, 0.0, 1.0)
    rgb = np.stack([t, 0.2 * (1.0 - np.abs(2 * t - 1.0)), 1.0 - t], axis=1)
    return (rgb * 255).astype(np.uint8)


def cmd_evaluate(args) -> int:
    from .fileio import read_mesh, write_ply
    from .trainer import (
        CaseMetrics,
        MetricsReport,
        evaluate_case,
        evaluate_mesh,
        gt_skin_mesh,
        load_case,
        load_params,
        _fold_case_ids,
    )
    from .synthdata import load_manifest

    if args.pred is not None:
        if args.case is None:
            raise CliError("config", "evaluate --pred also needs --case", EXIT_USAGE)
        pred = read_mesh(args.pred)
        _, gt, labels = gt_skin_mesh(args.case)
        entire, regions, err = evaluate_mesh(pred, gt, labels)
        report = MetricsReport([CaseMetrics(Path(args.case).name, entire, regions, 0.0, err)])
        if args.error_ply:
            write_ply(args.error_ply, pred, colors=_error_colors(err))
    elif args.checkpoint is not None:
        if args.data is None:
            raise CliError("config", "evaluate --checkpoint also needs --data", EXIT_USAGE)
        params, header = load_params(args.checkpoint)
        manifest = load_manifest(args.data)
        fold = header["train"].get("fold") if args.fold is None else args.fold
        ids = _fold_case_ids(manifest, fold, train_split=False)
        if not ids:
            raise CliError("config", "no held-out cases for this fold", EXIT_USAGE)
        report = MetricsReport(
            [evaluate_case(params, load_case(Path(args.data) / manifest["cases"][i])) for i in ids]
        )
    else:
        raise CliError("config", "evaluate needs either --pred or --checkpoint", EXIT_USAGE)
    report.write_csv(args.out)
    agg = report.aggregate()
    print(f"entire-surface deviation: {agg['entire'][0]:.4f}±{agg['entire'][1]:.4f} mm")
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import run_ablation_suite

    config = load_config(args.config)
    data = _pick(args.data, config, "paths", "data", None)
    out = _pick(args.out, config, "paths", "out", None)
    if data is None or out is None:
        raise CliError("config", "ablate needs --data and --out", EXIT_USAGE)
    cfg = _train_config(args, config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    summary = run_ablation_suite(data, cfg, seeds, out, jobs=args.jobs)
    for variant, row in summary["table"].items():
        m, s = row["entire"]
        print(f"{variant:<10s} entire {m:.4f}±{s:.4f} mm")
    print(f"table -> {Path(out) / 'ablation_table.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    ok = run_all(n_seeds=args.seeds, e2e_probes=args.probes)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_convert(args) -> int:
    from .fileio import read_mesh, write_mesh

    mesh = read_mesh(args.input)
    write_mesh(args.output, mesh)
    print(f"{args.input} -> {args.output} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="corrmorph",
        description="Learned point-to-point correspondence for surface movement transfer.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset with fold lists")
    g.add_argument("--out", help="dataset directory")
    g.add_argument("--cases", type=int, default=40, help="number of cases (default 40)")
    g.add_argument("--folds", type=int, default=5, help="number of folds (default 5)")
    g.add_argument("--seed", type=int, help="master seed (default 7)")
    g.add_argument("--points", type=int, help="surface sample points per case (default 512)")
    g.add_argument("--subdiv", type=int, help="mesh subdivision level (default 3)")
    g.add_argument("--jobs", type=int, default=1, help="parallel case-generation workers")
    g.add_argument("--config", help="JSON config file")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant on the training folds")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="output directory for checkpoint and curves")
    t.add_argument("--fold", type=int, help="held-out fold id (default 0)")
    t.add_argument("--no-holdout", action="store_true", help="train on every case")
    t.add_argument("--variant", choices=("attention", "no_corr", "closest"))
    t.add_argument("--preset", choices=("toy", "full"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=0, help="print progress every N epochs")
    t.add_argument("--config", help="JSON config file")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="predict a post-movement surface mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--case", required=True, help="case directory")
    s.add_argument("--out", required=True, help="output mesh (.ply or .obj)")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="surface deviation of predictions vs ground truth")
    e.add_argument("--pred", help="predicted mesh file (single-case mode)")
    e.add_argument("--case", help="case directory (with --pred)")
    e.add_argument("--checkpoint", help="checkpoint file (held-out fold mode)")
    e.add_argument("--data", help="dataset directory (with --checkpoint)")
    e.add_argument("--fold", type=int, help="override the checkpoint's fold")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--error-ply", help="write the predicted mesh with color-coded error")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare all three variants")
    a.add_argument("--data", help="dataset directory")
    a.add_argument("--out", help="output directory")
    a.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    a.add_argument("--fold", type=int, help="held-out fold id (default 0)")
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    a.add_argument("--jobs", type=int, default=1, help="parallel training workers")
    a.add_argument("--config", help="JSON config file")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    c.add_argument("--seeds", type=int, default=20, help="random seeds per primitive")
    c.add_argument("--probes", type=int, default=4, help="FD probes per parameter block")
    c.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("convert", help="convert a mesh between OBJ and PLY")
    v.add_argument("input")
    v.add_argument("output")
    v.set_defaults(func=cmd_convert)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error category={e.category}: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error category=io: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as e:
        print(f"error category=runtime: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
