"""Phase scheduling, calibration cadence, evaluation and run reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import counters
from .data import Dataset
from .model import MODES, ForwardContext, MethodConfig, TinyConv
from .tensor import ops
from .tensor.autograd import NonFiniteError, Tensor, track_saved
from .tensor.optim import SGD

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "phase", "train_loss", "eval_accuracy", "sec_per_iter", "calibrations", "steps")
REPORT_VERSION = 1
TYPE1_PER_EPOCH = 5
TYPE2_EVERY = 10


@dataclass
class TrainPlan:
    method: str = "sc"
    injection_epochs: float = 0.0
    finetune_epochs: float = 1.0
    use_proxy: bool = True
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0
    finetune_lr_scale: float = 0.1
    type1_per_epoch: int = TYPE1_PER_EPOCH
    type2_every: int = TYPE2_EVERY
    eval_every: int = 1
    eval_limit: int | None = None
    checkpointing: bool = True
    pretrained: str | None = None
    method_config: MethodConfig = field(default_factory=MethodConfig)

    def __post_init__(self):
        if self.method not in MODES:
            raise ValueError(f"method must be one of {MODES}, got {self.method!r}")
        for name in ("injection_epochs", "finetune_epochs"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")
        if self.injection_epochs + self.finetune_epochs <= 0:
            raise ValueError("injection_epochs + finetune_epochs must be positive")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")
        if self.type1_per_epoch < 1 or self.type2_every < 1:
            raise ValueError("calibration cadences must be >= 1")

    def batches_per_epoch(self, n: int) -> int:
        b = n // self.batch_size
        if b < 1:
            raise ValueError(f"dataset of {n} samples is smaller than one batch of {self.batch_size}")
        return b

    def phase_steps(self, n: int) -> tuple[int, int]:
        b = self.batches_per_epoch(n)
        return math.ceil(self.injection_epochs * b), math.ceil(self.finetune_epochs * b)


def type1_batches(b: int, per_epoch: int = TYPE1_PER_EPOCH) -> set[int]:
    """Batch indices within an epoch that calibrate Type 1 models."""
    return {i * b // per_epoch for i in range(per_epoch)}


@dataclass
class EpochRow:
    epoch: int
    phase: str
    train_loss: float
    eval_accuracy: float | None
    sec_per_iter: float
    calibrations: int
    steps: int


@dataclass
class RunReport:
    method: str
    rows: list[EpochRow] = field(default_factory=list)
    final_accuracy: float | None = None
    peak_saved_bytes: int = 0
    total_steps: int = 0
    aborted: bool = False
    abort_reason: str | None = None

    TIMING_FIELDS = ("sec_per_iter",)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock measurements."""
        d = asdict(self)
        for row in d["rows"]:
            for f in self.TIMING_FIELDS:
                row.pop(f)
        return d

    def mean_sec_per_iter(self, phase: str) -> float | None:
        rows = [r for r in self.rows if r.phase == phase and r.steps]
        if not rows:
            return None
        return sum(r.sec_per_iter * r.steps for r in rows) / sum(r.steps for r in rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                acc = "" if r.eval_accuracy is None else repr(r.eval_accuracy)
                w.writerow([r.epoch, r.phase, repr(r.train_loss), acc, repr(r.sec_per_iter), r.calibrations, r.steps])

    def write_summary(self, path) -> None:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        d.pop("rows")
        d["epochs"] = len(self.rows)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _phase_schedule(plan: TrainPlan, n: int):
    inj, ft = plan.phase_steps(n)
    if plan.method == "exact":
        return [("plain", inj + ft, plan.lr)]
    ft_lr = plan.lr * plan.finetune_lr_scale if inj > 0 else plan.lr
    return [p for p in (("inject", inj, plan.lr), ("accurate", ft, ft_lr)) if p[1] > 0]


def evaluate(model: TinyConv, dataset: Dataset, method: str, cfg: MethodConfig | None = None,
             batch_size: int = 256) -> float:
    """Top-1 accuracy with the accurate kernels of ``method``."""
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    if not model.is_calibrated(method):
        raise RuntimeError(f"model is not calibrated for {method!r}; train it or run calibrate_model first")
    cfg = cfg or MethodConfig()
    table = cfg.table() if method == "approx-mult" else None
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits = model.infer(dataset.images[start:start + batch_size], method, cfg, table)
        correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def calibrate_model(model: TinyConv, dataset: Dataset, method: str, cfg: MethodConfig | None = None,
                    batch_size: int = 64) -> None:
    """Set SC scales / ADC clips from the first batch, for inference-only use."""
    model.calibrate(dataset.images[:batch_size], method, cfg)


def _loss_step(model, opt, x, y, ctx) -> float:
    opt.zero_grad()
    logits = model.forward(Tensor(x), ctx)
    loss = ops.softmax_cross_entropy(logits, y)
    loss.backward()
    opt.step()
    return float(loss.item())


def train(plan: TrainPlan, model: TinyConv, dataset: Dataset, eval_set: Dataset | None = None) -> RunReport:
    """Injection phase, then accurate-model fine-tuning; returns the run report.

    Every epoch is a fresh permutation (seeded by plan seed and global epoch
    index) cut into ``len(dataset) // batch_size`` batches. A phase's last
    epoch may be partial.
    """
    if not len(dataset):
        raise ValueError("empty training dataset")
    n = len(dataset)
    b = plan.batches_per_epoch(n)
    cfg = plan.method_config
    mode = plan.method
    table = cfg.table() if mode == "approx-mult" else None
    eval_set = eval_set or dataset
    if plan.eval_limit:
        eval_set = eval_set.subset(plan.eval_limit, eval_set.split)
    opt = SGD(model.parameters(), plan.lr, plan.momentum, plan.weight_decay)
    report = RunReport(method=mode)
    t1_batches = type1_batches(b, plan.type1_per_epoch)
    step = 0
    epoch = 0
    schedule = _phase_schedule(plan, n)
    try:
        for pi, (phase, steps, lr) in enumerate(schedule):
            opt.lr = lr
            done = 0
            while done < steps:
                order = np.random.default_rng([plan.seed, epoch]).permutation(n)
                count = min(b, steps - done)
                losses = []
                calibrations = 0
                elapsed = 0.0
                for bi in range(count):
                    idx = order[bi * plan.batch_size:(bi + 1) * plan.batch_size]
                    t1 = bi in t1_batches
                    t2 = bi % plan.type2_every == 0
                    ctx = ForwardContext(
                        mode=mode, phase=phase, cfg=cfg, table=table, use_proxy=plan.use_proxy,
                        checkpointing=plan.checkpointing, seed=plan.seed, step=step,
                        calibrate_type1=phase == "inject" and mode in ("sc", "approx-mult") and t1,
                        calibrate_type2=phase == "inject" and mode == "analog" and t2,
                        refresh_scales=(mode == "sc" and t1) or (mode == "analog" and t2),
                    )
                    calibrations += int(ctx.calibrate_type1 or ctx.calibrate_type2)
                    start = time.perf_counter()
                    with track_saved() as saved:
                        loss = _loss_step(model, opt, dataset.images[idx], dataset.labels[idx], ctx)
                        report.peak_saved_bytes = max(report.peak_saved_bytes, saved.nbytes)
                    elapsed += time.perf_counter() - start
                    losses.append(loss)
                    step += 1
                done += count
                report.total_steps = step
                acc = None
                last = done >= steps and pi == len(schedule) - 1
                if last or (plan.eval_every and (epoch + 1) % plan.eval_every == 0):
                    acc = evaluate(model, eval_set, mode, cfg)
                report.rows.append(EpochRow(epoch, phase, float(np.mean(losses)), acc,
                                            elapsed / count, calibrations, count))
                log.info("epoch %d %s loss %.4f acc %s", epoch, phase, report.rows[-1].train_loss, acc)
                epoch += 1
    except NonFiniteError as exc:
        report.aborted = True
        report.abort_reason = str(exc)
        report.total_steps = step
        log.warning("training aborted at step %d: %s", step, exc)
        counters.bump("aborted_runs")
        return report
    report.final_accuracy = report.rows[-1].eval_accuracy if report.rows else None
    return report


def finetune_fraction(plan: TrainPlan, model: TinyConv, dataset: Dataset, fraction: float,
                      eval_set: Dataset | None = None) -> RunReport:
    """Accurate-model training on the first ``ceil(fraction * B)`` batches of one epoch."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    sub = TrainPlan(**{**asdict_shallow(plan), "injection_epochs": 0.0, "finetune_epochs": fraction})
    return train(sub, model, dataset, eval_set)


def asdict_shallow(plan: TrainPlan) -> dict:
    return {f: getattr(plan, f) for f in plan.__dataclass_fields__}
