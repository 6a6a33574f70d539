"""One-cycle training: train from scratch, find a stable sub-network, prune, keep training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import reports
from .checkpoint import Checkpoint, load_model, save_model
from .data import DatasetHandle
from .graph import ModelGraph, build_model, count_flops, count_params, init_params
from .groups import build_groups
from .nn import OptimizerState, backward, forward, sgd_step, softmax_cross_entropy
from .saliency import all_scores, global_partition, partition_table, signature_of
from .schedule import LRSchedule, lr_at
from .sparsity import PenaltyState, direct_shrink, group_norms, penalty_loss_and_grads, update_penalty
from .stability import SL_START, STABLE, StabilityState, update as stability_update
from .surgery import apply_prune

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunConfig:
    epochs: int = 300
    alpha: float = 0.5
    window: int = 5
    gap: int = 1
    tau: float = 1e-4
    eps: float = 1e-3
    lam0: float = 1e-4
    delta: float = 1e-4
    interval: int = 1
    sl_start: Any = 30                 # "auto" or a fixed epoch
    schedule: str = "multistep"
    lr: float = 0.1
    milestones: tuple = (90, 180, 240, 270)
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    eq8: bool = True
    eq9: bool = True
    eq9_per_iteration: bool = False
    saliency: str = "group"            # group | conventional
    prune: bool = True                 # False: plain baseline training
    init: str = "random"               # random | path to a model/checkpoint file
    dtype: str = "float32"
    partition_tolerance: float = 0.01

    def __post_init__(self):
        self.milestones = tuple(self.milestones)

    def validate(self) -> "RunConfig":
        p = []
        if not isinstance(self.epochs, int) or self.epochs < 1:
            p.append(f"epochs: must be a positive integer, got {self.epochs!r}")
        if not 0 < self.alpha <= 1:
            p.append(f"alpha: must lie in (0, 1], got {self.alpha!r}")
        if self.window < 1:
            p.append(f"window: must be >= 1, got {self.window!r}")
        if self.gap < 1:
            p.append(f"gap: must be >= 1, got {self.gap!r}")
        if self.interval < 1:
            p.append(f"interval: must be >= 1, got {self.interval!r}")
        if self.sl_start != "auto" and not (isinstance(self.sl_start, int) and self.sl_start >= 0):
            p.append(f"sl_start: must be 'auto' or a non-negative epoch, got {self.sl_start!r}")
        if self.schedule not in ("multistep", "cosine"):
            p.append(f"schedule: must be 'multistep' or 'cosine', got {self.schedule!r}")
        ms = list(self.milestones)
        if self.schedule == "multistep" and (ms != sorted(set(ms))):
            p.append(f"milestones: must be strictly increasing, got {ms}")
        if self.schedule == "multistep" and isinstance(self.epochs, int) and any(m >= self.epochs for m in ms):
            p.append(f"milestones: must be < epochs ({self.epochs}), got {ms}")
        if self.saliency not in ("group", "conventional"):
            p.append(f"saliency: must be 'group' or 'conventional', got {self.saliency!r}")
        if self.dtype not in ("float32", "float64"):
            p.append(f"dtype: must be float32 or float64, got {self.dtype!r}")
        for name in ("lr", "lam0", "delta", "batch_size"):
            if getattr(self, name) <= 0:
                p.append(f"{name}: must be positive, got {getattr(self, name)!r}")
        for name in ("tau", "eps", "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                p.append(f"{name}: must be non-negative, got {getattr(self, name)!r}")
        if p:
            raise ConfigError(p)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown key" for k in unknown])
        return cls(**d).validate()

    def schedule_obj(self) -> LRSchedule:
        return LRSchedule(self.schedule, self.lr, self.milestones, self.lr_decay, self.epochs)


@dataclass
class RunRecord:
    config: dict
    rows: list[dict] = field(default_factory=list)
    signatures: list[tuple[int, dict]] = field(default_factory=list)
    t_sl_start: int | None = None
    t_star: int | None = None
    flops_ratio: float = 1.0
    params_ratio: float = 1.0
    final_accuracy: float = float("nan")
    diagnostic: str = ""

    def summary(self) -> dict:
        return {"t_sl_start": self.t_sl_start, "t_star": self.t_star,
                "flops_ratio": self.flops_ratio, "params_ratio": self.params_ratio,
                "final_accuracy": self.final_accuracy, "diagnostic": self.diagnostic,
                "epochs": len(self.rows)}


@dataclass
class RunResult:
    record: RunRecord
    graph: ModelGraph
    params: dict[str, np.ndarray]


def evaluate(graph, params, x, y, batch_size=256):
    """Eval-mode mean loss and accuracy."""
    total_loss, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        logits, _ = forward(graph, params, xb, train=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        total_loss += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


def train_epoch(graph, params, opt_state: OptimizerState, data: DatasetHandle, lr: float, *,
                seed: int = 0, epoch: int = 0, batch_size: int = 128, penalty=None,
                shrink=None) -> dict:
    """One shuffled pass over the training split. Updates ``params`` in place.

    ``penalty`` is ``(groups, prune_set, lam)`` adding the L2 group penalty to
    every step; ``shrink`` is the same triple applied as a multiplicative
    shrink after every step.
    """
    opt_state.lr = lr
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(data.x_train))
    trainable = set(graph.trainable())
    loss_sum, pen_sum, correct = 0.0, 0.0, 0
    for b, i in enumerate(range(0, len(order), batch_size)):
        idx = order[i:i + batch_size]
        xb, yb = data.x_train[idx], data.y_train[idx]
        logits, tape = forward(graph, params, xb, train=True)
        loss, dlogits = softmax_cross_entropy(logits, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
        grads = {k: v for k, v in backward(tape, dlogits).items() if k in trainable}
        if penalty is not None:
            pv, pg = penalty_loss_and_grads(params, *penalty)
            pen_sum += pv * len(idx)
            for k, g in pg.items():
                grads[k] = grads[k] + g
        params.update(sgd_step(params, grads, opt_state))
        params.update(tape.state_updates)
        if shrink is not None:
            params.update(direct_shrink(params, shrink[0], shrink[1], shrink[2], lr))
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == yb).sum())
    n = len(order)
    return {"train_loss": loss_sum / n, "train_acc": correct / n, "penalty": pen_sum / n}


def _cast(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def run_one_cycle(config: RunConfig, model_spec, dataset: DatasetHandle, out_dir=None,
                  resume=None, checkpoint_every: int = 0, stop_after: int | None = None) -> RunResult:
    """Train, search, prune and fine-tune in a single pass of ``config.epochs`` epochs.

    ``resume`` is a checkpoint path; ``stop_after`` ends the loop early after the
    given epoch (used to create resumable checkpoints).
    """
    config.validate()
    dtype = np.dtype(config.dtype)
    data = dataset.astype(dtype)
    sched = config.schedule_obj()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    base_graph = build_model(model_spec)
    base_flops = count_flops(base_graph)
    base_params = count_params(base_graph)
    sl_fixed = None if config.sl_start == "auto" else int(config.sl_start)

    if resume is not None:
        ck = Checkpoint.load(resume)
        graph = build_model(ck.model_spec)
        params = _cast(ck.params, dtype)
        opt = OptimizerState(config.lr, config.momentum, config.weight_decay, _cast(ck.momentum, dtype))
        st = StabilityState.from_dict(ck.state["stability"])
        pen = PenaltyState.from_dict(ck.state["penalty"]) if ck.state["penalty"] else None
        record = RunRecord(asdict(config), ck.state["rows"],
                           [(e, {k: frozenset(v) for k, v in s.items()}) for e, s in ck.state["signatures"]],
                           ck.state["t_sl_start"], ck.state["t_star"])
        pruned = ck.state["pruned"]
        start = ck.epoch
    else:
        graph = base_graph
        if config.init == "random":
            params = init_params(graph, config.seed, dtype)
        else:
            spec_loaded, loaded = load_model(config.init)
            expected = graph.param_shapes()
            if set(loaded) != set(expected) or any(tuple(loaded[k].shape) != expected[k] for k in expected):
                raise ConfigError([f"init: weights in {config.init} do not match the architecture"])
            params = _cast(loaded, dtype)
        opt = OptimizerState(config.lr, config.momentum, config.weight_decay)
        st = StabilityState(config.window, config.gap, config.tau, config.eps,
                            "auto" if sl_fixed is None else "fixed", sl_fixed)
        pen = None
        record = RunRecord(asdict(config))
        record.t_sl_start = sl_fixed
        pruned = False
        start = 0

    if out is not None and start == 0:
        reports.write_signature_header(out / "signatures.jsonl", config)

    for t in range(start, config.epochs):
        lr = lr_at(sched, t)
        row = {"epoch": t, "phase": "train", "lr": lr, "j": None, "j_avg": None, "lam": None,
               "temp_ratio": None, "n_pruned": None, "flags": ""}
        penalty = shrink = None
        groups = None
        if config.prune and not pruned:
            groups = build_groups(graph)
            scores = all_scores(params, groups, config.saliency)
            part = global_partition(scores, graph, groups, config.alpha, config.partition_tolerance)
            sig = signature_of(part, graph)
            events = stability_update(st, t, sig)
            record.signatures.append((t, sig))
            if out is not None:
                reports.append_signature(out / "signatures.jsonl", t, sig)
            row.update(j=st.j.get(t), j_avg=st.j_avg.get(t), temp_ratio=part.ratio,
                       n_pruned=len(part.prune), flags="|".join(events))
            if out is not None:
                reports.append_group_norms(out / "group_norms.csv", t, group_norms(params, groups), part.prune)
            if SL_START in events:
                record.t_sl_start = st.sl_start
            if not st.sl_active(t):
                row["phase"] = "search"
            elif STABLE in events:
                record.t_star = t
                graph, params, opt, _ = apply_prune(graph, params, opt, part)
                pruned = True
                row["phase"] = "prune"
                if out is not None:
                    reports.write_rows(out / "partition.csv", partition_table(part), reports.PARTITION_SCHEMA)
            else:
                row["phase"] = "sparsity"
                if pen is None:
                    pen = PenaltyState(config.lam0, config.delta, config.interval, st.sl_start)
                lam = update_penalty(pen, t)
                row["lam"] = lam
                if config.eq9 and not config.eq9_per_iteration:
                    params = direct_shrink(params, groups, part.prune, lam, lr)
                if config.eq8:
                    penalty = (groups, part.prune, lam)
                if config.eq9 and config.eq9_per_iteration:
                    shrink = (groups, part.prune, lam)
        elif pruned:
            row["phase"] = "finetune"
        metrics = train_epoch(graph, params, opt, data, lr, seed=config.seed, epoch=t,
                              batch_size=config.batch_size, penalty=penalty, shrink=shrink)
        eval_loss, eval_acc = evaluate(graph, params, data.x_eval, data.y_eval)
        row.update(metrics, eval_loss=eval_loss, eval_acc=eval_acc,
                   n_params=count_params(graph), flops_ratio=count_flops(graph).total / base_flops.total)
        record.rows.append(row)
        log.info("epoch %d %s loss=%.4f acc=%.4f J_avg=%s", t, row["phase"], metrics["train_loss"],
                 eval_acc, row["j_avg"])
        if out is not None:
            reports.append_row(out / "epochs.csv", row)
        done = t + 1
        if out is not None and (checkpoint_every and done % checkpoint_every == 0 or stop_after == t):
            _checkpoint(out / "checkpoint.ocsp", graph, params, opt, done, st, pen, record, pruned)
        if stop_after is not None and t >= stop_after:
            break

    record.flops_ratio = count_flops(graph).total / base_flops.total
    record.params_ratio = count_params(graph) / base_params
    record.final_accuracy = record.rows[-1]["eval_acc"] if record.rows else float("nan")
    if config.prune and not pruned:
        record.diagnostic = (f"stable pruning epoch not reached within {config.epochs} epochs "
                             f"(sl_start={record.t_sl_start}); model left unpruned")
    if out is not None:
        save_model(out / "model.ocsp", graph.to_spec(), params, record.summary())
        reports.write_summary(out / "summary.json", record)
    return RunResult(record, graph, params)


def _checkpoint(path, graph, params, opt, next_epoch, st, pen, record, pruned):
    state = {
        "stability": st.to_dict(),
        "penalty": pen.to_dict() if pen is not None else None,
        "rows": record.rows,
        "signatures": [[e, {k: sorted(v) for k, v in s.items()}] for e, s in record.signatures],
        "t_sl_start": record.t_sl_start,
        "t_star": record.t_star,
        "pruned": pruned,
        "seed": record.config["seed"],
    }
    Checkpoint(graph.to_spec(), dict(params), dict(opt.buffers), next_epoch, state).save(path)


def run_ablation(config: RunConfig, model_spec, dataset_fn, seeds, variants: dict[str, dict]) -> list[dict]:
    """Run each config variant for each seed; one summary row per (variant, seed)."""
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            cfg = RunConfig(**{**asdict(config), **overrides, "seed": seed}).validate()
            rec = run_one_cycle(cfg, model_spec, dataset_fn(seed)).record
            rows.append({"variant": name, "seed": seed, **rec.summary()})
    return rows
