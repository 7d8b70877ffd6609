"""``uda-lab`` command line: gen-data, train, analyze, sweep, grad-check.

Exit codes: 0 ok, 1 gradient check failed, 2 invalid config, 3 training
diverged, 4 diagnostic incompatible with the data, 5 some sweep run failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, checks
from .datasets import DomainPair, load_csv, save_csv
from .nn import load_checkpoint
from .trainer import ConfigError, RunConfig, TrainingDiverged, load_data, run

EXIT_OK, EXIT_GRAD, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_SWEEP = 0, 1, 2, 3, 4, 5
DIAGNOSTICS = ("jacobian", "trajectory", "adaptability", "fourier", "embeddings")
SUMMARY_COLUMNS = (
    "preset",
    "status",
    "source_acc",
    "target_acc",
    "d_A",
    "lambda_estimate",
    "jacobian_source",
    "jacobian_target",
    "data_digest",
)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values parse as JSON, else stay strings."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[leaf] = _coerce(value)
    return d


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    d = RunConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p} must hold a JSON object")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict) and key != "dataset":
                d[key].update(value)
            else:
                d[key] = value
    return RunConfig.from_dict(apply_overrides(d, overrides))


def _out_root() -> Path:
    return Path(os.environ.get("UDA_LAB_OUT", "runs"))


def run_dir(config: RunConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if config.out_dir:
        return Path(config.out_dir)
    return _out_root() / f"{config.digest()}-{time.strftime('%Y%m%d-%H%M%S')}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
        pair = load_data(cfg)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_csv(pair, args.out)
    print(f"wrote {len(pair.x_s)} source and {len(pair.x_t)} target rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = run_dir(cfg, args.out)
    print(f"training {cfg.method} on {cfg.dataset['name']} into {out}")
    try:
        _, history, _ = run(cfg, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    last = history[-1]
    print(f"done: source acc {last.source_acc:.3f}, target acc {last.target_acc:.3f}")
    return EXIT_OK


def load_pair(path: str, overrides: list[str]) -> DomainPair:
    """A dataset CSV written by gen-data, or a run config to regenerate from."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"data file not found: {p}")
    if p.suffix == ".csv":
        return load_csv(p)
    return load_data(load_config(str(p), overrides))


def _trajectories(bundle, pair: DomainPair, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    curves = {}
    for name, same in (("same_class", True), ("cross_class", False)):
        anchors = analysis.choose_anchors(bundle, pair.x_s, pair.y_s, same, rng)
        curves[name] = analysis.trajectory_sensitivity(bundle, anchors)
    return curves


def run_diagnostics(bundle, pair: DomainPair, which: list[str], out: Path, seed: int = 0) -> list[Path]:
    """Compute the requested diagnostics and write one file per diagnostic."""
    if "fourier" in which and pair.modality != "image":
        raise analysis.IncompatibleDiagnostic(f"fourier needs image data, got {pair.modality!r}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "jacobian" in which:
        rep = analysis.sensitivity_report(bundle, pair.x_s, pair.x_t)
        written.append(analysis.write_sensitivity(rep, out / "sensitivity.csv"))
    if "trajectory" in which:
        written.append(analysis.write_trajectories(_trajectories(bundle, pair, seed), out / "trajectory.csv"))
    if "adaptability" in which:
        rep = analysis.adaptability_report(bundle, pair, seed)
        written.append(analysis.write_adaptability(rep, out / "adaptability.json"))
    if "fourier" in which:
        maps = {d: analysis.fourier_sensitivity(bundle, pair, d, seed=seed) for d in ("source", "target")}
        written.append(analysis.write_fourier(maps, out / "fourier.csv"))
    if "embeddings" in which:
        written.append(analysis.export_embeddings(bundle, pair, out / "embeddings.csv"))
    return written


def _resolve_which(which: list[str], modality: str) -> list[str]:
    if which == ["all"]:
        return [d for d in DIAGNOSTICS if d != "fourier" or modality == "image"]
    bad = sorted(set(which) - set(DIAGNOSTICS))
    if bad:
        raise ConfigError(f"unknown diagnostics {bad}; choose from {list(DIAGNOSTICS)} or all")
    return which


def cmd_analyze(args) -> int:
    try:
        bundle = load_checkpoint(args.checkpoint)
        pair = load_pair(args.data, args.set)
        which = _resolve_which(args.which, pair.modality)
    except (ConfigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        written = run_diagnostics(bundle, pair, which, Path(args.out), args.seed)
    except ValueError as exc:
        # IncompatibleDiagnostic, or a model too degenerate for the diagnostic (e.g. no anchors)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def sweep_one(config_dict: dict, out: str, seed: int) -> dict:
    """Train one preset and summarise it; failures become a status string."""
    cfg = RunConfig.from_dict(config_dict)
    row = dict.fromkeys(SUMMARY_COLUMNS, "")
    row["preset"] = cfg.method
    try:
        bundle, history, pair = run(cfg, out)
    except (TrainingDiverged, ValueError) as exc:
        row["status"] = f"failed: {exc}".replace("\n", " ")
        return row
    sens = analysis.sensitivity_report(bundle, pair.x_s, pair.x_t)
    row.update(
        status="ok",
        source_acc=repr(history[-1].source_acc),
        target_acc=repr(history[-1].target_acc),
        d_A=repr(analysis.a_distance(bundle, pair.x_s, pair.x_t, seed)),
        lambda_estimate=repr(analysis.ideal_joint_risk(bundle, pair, seed)),
        jacobian_source=repr(sens.mean_jacobian_norm_source),
        jacobian_target=repr(sens.mean_jacobian_norm_target),
        data_digest=pair.digest(),
    )
    return row


def cmd_sweep(args) -> int:
    try:
        base = load_config(args.config, args.set)
        configs = [RunConfig.from_dict(dict(base.to_dict(), method=p, out_dir=None)) for p in args.presets]
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(args.out) if args.out else _out_root() / f"sweep-{base.digest()}-{time.strftime('%Y%m%d-%H%M%S')}"
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(c.to_dict(), str(root / c.method.replace("+", "_")), base.seed.data) for c in configs]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            rows = list(pool.map(sweep_one, *zip(*jobs)))
    else:
        rows = []
        for job in jobs:
            print(f"sweep: {job[0]['method']}")
            rows.append(sweep_one(*job))
    with (root / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['preset']:>14}  {row['status']:<6}  target acc {row['target_acc'][:6]}")
    print(f"wrote {root / 'summary.csv'}")
    return EXIT_SWEEP if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_grad_check(args, battery=None) -> int:
    reports = checks.run_battery(battery)
    failed = [name for name, r in reports.items() if not r.max_rel_error < args.tolerance]
    print(f"{'loss':<12}{'max_abs_error':>16}{'max_rel_error':>16}  status")
    for name, r in reports.items():
        status = "FAIL" if name in failed else "ok"
        print(f"{name:<12}{r.max_abs_error:>16.3e}{r.max_rel_error:>16.3e}  {status}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRAD
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uda-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")

    p = sub.add_parser("gen-data", help="generate a dataset CSV")
    with_config(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one run")
    with_config(p)
    p.add_argument("--out", help="run directory (default: $UDA_LAB_OUT/<hash>-<time>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="diagnostics on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset CSV or run config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--which", nargs="+", default=["all"], help=f"any of {', '.join(DIAGNOSTICS)}, or all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train several method presets on shared seeds")
    with_config(p)
    p.add_argument("--presets", nargs="+", default=["source_only", "dann", "dann+tc", "cliv", "cliv+tc"])
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
