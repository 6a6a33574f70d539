"""Command-line entry points.

Run configs are TOML documents::

    [run]            # RunConfig keys: epochs, alpha, window, gap, tau, eps, lam0, ...
    epochs = 40

    [model]
    arch = "desk-resnet"   # builtin name or path to an architecture TOML

    [data]
    kind = "synth"         # synth | mnist | cifar10
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import reports
from .data import DatasetError, load_cifar10_batches, load_mnist_idx, synth_dataset
from .graph import GraphError, build_model, init_params
from .groups import build_groups, group_table, verify_group
from .orchestrator import ConfigError, RunConfig, run_one_cycle

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

_DATA_KEYS = {
    "synth": {"kind", "seed", "classes", "samples", "shape", "noise", "eval_samples"},
    "mnist": {"kind", "path", "mean", "std"},
    "cifar10": {"kind", "train", "eval", "mean", "std"},
}


def load_run_config(path, seed: int | None = None):
    """Parse a run config file into ``(RunConfig, model source, data table)``."""
    try:
        doc = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError([f"config: {e}"]) from None
    problems = [f"{k}: unknown section" for k in sorted(set(doc) - {"run", "model", "data"})]
    run = dict(doc.get("run", {}))
    if seed is not None:
        run["seed"] = seed
    model = doc.get("model", {}).get("arch")
    if model is None:
        problems.append("model.arch: missing")
    elif (Path(path).parent / model).is_file():
        model = str(Path(path).parent / model)
    data = dict(doc.get("data", {"kind": "synth"}))
    kind = data.get("kind", "synth")
    if kind not in _DATA_KEYS:
        problems.append(f"data.kind: must be one of {sorted(_DATA_KEYS)}, got {kind!r}")
    else:
        problems += [f"data.{k}: unknown key" for k in sorted(set(data) - _DATA_KEYS[kind])]
    try:
        config = RunConfig.from_dict(run)
    except ConfigError as e:
        problems += [f"run.{p}" for p in e.problems]
        config = None
    except TypeError as e:
        problems.append(f"run: {e}")
        config = None
    if problems:
        raise ConfigError(problems)
    return config, model, data


def load_dataset(data: dict):
    kind = data.get("kind", "synth")
    if kind == "mnist":
        kw = {k: data[k] for k in ("mean", "std") if k in data}
        return load_mnist_idx(data["path"], **kw)
    if kind == "cifar10":
        kw = {k: data[k] for k in ("mean", "std") if k in data}
        return load_cifar10_batches(data["train"], data["eval"], **kw)
    kw = {k: v for k, v in data.items() if k != "kind"}
    if "shape" in kw:
        kw["shape"] = tuple(kw["shape"])
    return synth_dataset(**kw)


def _train_prune(args) -> int:
    config, model, data = load_run_config(args.config, args.seed)
    dataset = load_dataset(data)
    out = Path(args.out_dir)
    result = run_one_cycle(config, model, dataset, out_dir=out, resume=args.resume,
                           checkpoint_every=args.checkpoint_every, stop_after=args.stop_after)
    summary = result.record.summary()
    print(json.dumps(summary, indent=2))
    if result.record.diagnostic:
        print(f"warning: {result.record.diagnostic}", file=sys.stderr)
    return 0


def _verify_groups(args) -> int:
    graph = build_model(args.spec)
    params = init_params(graph, args.seed)
    groups = build_groups(graph)
    print(group_table(groups), end="")
    failures = 0
    worst = 0.0
    for g in groups:
        for c in range(g.channels):
            rep = verify_group(graph, params, g, c, tolerance=args.tolerance)
            worst = max(worst, rep.max_abs_diff)
            if not rep.passed:
                failures += 1
                print(f"FAIL group {g.id} channel {c}: {rep.detail}")
    total = sum(g.channels for g in groups)
    print(f"{total - failures}/{total} (group, channel) pairs pass; max |dlogit| = {worst:.3g}")
    return 1 if failures else 0


def _replay(args) -> int:
    st = reports.replay_stability(args.log)
    print(json.dumps({"t_sl_start": st.sl_start, "t_star": st.stable_epoch}))
    return 0


def _report(args) -> int:
    tables = reports.render_report(args.run_dir, args.out)
    for name, rows in tables.items():
        print(f"== {name} ({len(rows)} rows)")
        if not args.quiet:
            print(reports.format_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocsprune", description="One-cycle structured pruning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    tp = sub.add_parser("train-prune", help="train, prune and fine-tune in one run")
    tp.add_argument("--config", required=True)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--out-dir", required=True)
    tp.add_argument("--resume", help="checkpoint file to continue from")
    tp.add_argument("--checkpoint-every", type=int, default=0)
    tp.add_argument("--stop-after", type=int, help="stop after this epoch and write a checkpoint")
    tp.set_defaults(func=_train_prune)

    vg = sub.add_parser("verify-groups", help="zero-then-remove check for every group channel")
    vg.add_argument("--spec", required=True, help="builtin name or architecture TOML")
    vg.add_argument("--seed", type=int, default=0)
    vg.add_argument("--tolerance", type=float, default=1e-5)
    vg.set_defaults(func=_verify_groups)

    rs = sub.add_parser("replay-stability", help="recompute stability events from a signature log")
    rs.add_argument("log")
    rs.set_defaults(func=_replay)

    rp = sub.add_parser("report", help="render run logs into plot-ready tables")
    rp.add_argument("run_dir")
    rp.add_argument("--out", help="directory for the rendered CSV tables")
    rp.add_argument("-q", "--quiet", action="store_true")
    rp.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print("invalid configuration:", file=sys.stderr)
        for p in e.problems:
            print(f"  {p}", file=sys.stderr)
        return 2
    except (GraphError, DatasetError, reports.SchemaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
