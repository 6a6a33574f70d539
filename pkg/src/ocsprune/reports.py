"""CSV/JSON run logs, strict-schema parsing, stability replay and plot-ready tables."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

EPOCH_SCHEMA = {
    "epoch": int, "phase": str, "lr": float, "train_loss": float, "train_acc": float,
    "penalty": float, "eval_loss": float, "eval_acc": float, "j": float, "j_avg": float,
    "lam": float, "temp_ratio": float, "n_pruned": int, "n_params": int, "flops_ratio": float,
    "flags": str,
}
PARTITION_SCHEMA = {"layer": str, "group": int, "total": int, "retained": int, "pruned": int}
NORM_SCHEMA = {"epoch": int, "group": int, "channel": int, "norm": float, "prune": int}
STABILITY_TABLE = {"epoch": int, "j": float, "j_avg": float, "lam": float, "flags": str}


class SchemaError(ValueError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _append(path: Path, schema: dict, rows: list[dict]):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(list(schema))
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in schema])


def append_row(path, row: dict):
    _append(Path(path), EPOCH_SCHEMA, [row])


def write_rows(path, rows, schema):
    path = Path(path)
    if path.exists():
        path.unlink()
    _append(path, schema, rows)


def append_group_norms(path, epoch, norms, prune):
    _append(Path(path), NORM_SCHEMA,
            [{"epoch": epoch, "group": g, "channel": c, "norm": n, "prune": int((g, c) in prune)}
             for g, c, n in norms])


def read_csv(path, schema: dict) -> list[dict]:
    """Parse a CSV under a strict schema: exact header, typed columns, empty -> None."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(schema):
            raise SchemaError(f"{path}: header {header} does not match {list(schema)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(schema):
                raise SchemaError(f"{path}:{lineno}: expected {len(schema)} fields, got {len(rec)}")
            row = {}
            for (k, typ), v in zip(schema.items(), rec):
                if v == "" and typ is not str:
                    row[k] = None
                    continue
                try:
                    row[k] = typ(v)
                except ValueError:
                    raise SchemaError(f"{path}:{lineno}: column {k!r} value {v!r} is not {typ.__name__}") from None
            rows.append(row)
    return rows


def write_summary(path, record):
    payload = {"summary": record.summary(), "config": record.config}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


# -- signature log -------------------------------------------------------------

def write_signature_header(path, config):
    header = {"window": config.window, "gap": config.gap, "tau": config.tau, "eps": config.eps,
              "sl_start": config.sl_start}
    Path(path).write_text(json.dumps({"header": header}) + "\n")


def append_signature(path, epoch, sig):
    with open(path, "a") as fh:
        fh.write(json.dumps({"epoch": epoch, "signature": {k: sorted(v) for k, v in sig.items()}}) + "\n")


def read_signature_log(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])["header"]
    entries = []
    for line in lines[1:]:
        d = json.loads(line)
        entries.append((d["epoch"], {k: frozenset(v) for k, v in d["signature"].items()}))
    return header, entries


def replay_stability(path):
    """Recompute J, J_avg, t_sl-start and t* from a signature log."""
    from .stability import StabilityState, update

    header, entries = read_signature_log(path)
    fixed = header["sl_start"] != "auto"
    st = StabilityState(header["window"], header["gap"], header["tau"], header["eps"],
                        "fixed" if fixed else "auto", int(header["sl_start"]) if fixed else None)
    for epoch, sig in entries:
        update(st, epoch, sig)
        if st.stable_epoch is not None:
            break
    return st


# -- report rendering ----------------------------------------------------------

def render_report(run_dir, out_dir=None) -> dict[str, list[dict]]:
    """Turn a run directory's logs into plot-ready tables (pure function of the logs)."""
    run_dir = Path(run_dir)
    epochs = read_csv(run_dir / "epochs.csv", EPOCH_SCHEMA)
    tables = {
        "stability": [{k: r[k] for k in STABILITY_TABLE} for r in epochs],
        "accuracy": [{"epoch": r["epoch"], "phase": r["phase"], "train_acc": r["train_acc"],
                      "eval_acc": r["eval_acc"], "flops_ratio": r["flops_ratio"]} for r in epochs],
    }
    if (run_dir / "partition.csv").exists():
        tables["layers"] = read_csv(run_dir / "partition.csv", PARTITION_SCHEMA)
    if (run_dir / "group_norms.csv").exists():
        norms = read_csv(run_dir / "group_norms.csv", NORM_SCHEMA)
        tables["norm_histogram"] = _histogram(norms)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            if rows:
                write_rows(out / f"{name}.csv", rows, {k: type(v) for k, v in rows[0].items()})
    return tables


def _histogram(norms, bins=20):
    """Per-epoch counts of group norms in equal-width bins, split by prune membership."""
    if not norms:
        return []
    top = max(r["norm"] for r in norms) or 1.0
    width = top / bins
    counts: dict[tuple, int] = {}
    for r in norms:
        b = min(int(r["norm"] / width), bins - 1)
        key = (r["epoch"], b, r["prune"])
        counts[key] = counts.get(key, 0) + 1
    return [{"epoch": e, "bin_low": b * width, "bin_high": (b + 1) * width, "prune": p, "count": n}
            for (e, b, p), n in sorted(counts.items())]


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4g}"
        return "" if v is None else str(v)

    body = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
