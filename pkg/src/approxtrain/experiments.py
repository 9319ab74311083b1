"""Desk-scale experiments: proxy necessity, injection accuracy ordering and
iteration-time comparison. Shared by the acceptance suite and the CLI."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

from .data import Dataset, synth_dataset
from .model import ForwardContext, MethodConfig, TinyConv
from .tensor import ops
from .tensor.autograd import Tensor
from .tensor.optim import SGD
from .trainer import TrainPlan, calibrate_model, evaluate, train


@dataclass
class DeskSetup:
    """Dataset, architecture and per-method budgets used for desk-scale runs."""

    noise: float = 0.4
    image_size: int = 12
    train_size: int = 2000
    test_size: int = 1000
    channels: tuple = (8, 8, 16)
    logit_scale: float = 4.0
    data_seed: int = 0
    pretrain_lr: float = 0.02
    epochs: dict = field(default_factory=lambda: {"sc": 30, "approx-mult": 8, "analog": 4})
    finetune: dict = field(default_factory=lambda: {"sc": 5, "approx-mult": 1, "analog": 1})
    lr: dict = field(default_factory=lambda: {"sc": 0.05, "approx-mult": 0.02, "analog": 0.005})
    finetune_lr_scale: float = 0.1
    pretrain_epochs: int = 8
    from_pretrained: tuple = ("analog",)

    def datasets(self) -> tuple[Dataset, Dataset]:
        tr = synth_dataset(10, self.train_size, self.data_seed, self.image_size, 1, self.noise, "train")
        te = synth_dataset(10, self.test_size, self.data_seed, self.image_size, 1, self.noise, "test")
        return tr, te

    def model(self, seed: int) -> TinyConv:
        return TinyConv(1, self.image_size, 10, self.channels, seed=seed, logit_scale=self.logit_scale)


def pretrain_exact(setup: DeskSetup, seed: int, tr: Dataset, te: Dataset) -> TinyConv:
    model = setup.model(seed)
    plan = TrainPlan(method="exact", finetune_epochs=setup.pretrain_epochs, lr=setup.pretrain_lr,
                     seed=seed, eval_every=0)
    train(plan, model, tr, te)
    return model


@dataclass
class OrderingResult:
    method: str
    seed: int
    exact: float
    inference_only: float
    injection: float
    accurate: float
    injection_finetune: float


def ordering_run(method: str, seed: int, setup: DeskSetup | None = None,
                 cfg: MethodConfig | None = None) -> OrderingResult:
    """One seed of the four-way comparison for ``method``."""
    setup = setup or DeskSetup()
    cfg = cfg or MethodConfig()
    tr, te = setup.datasets()
    pre = pretrain_exact(setup, seed, tr, te)
    exact_acc = evaluate(pre, te, "exact")
    calibrate_model(pre, tr, method, cfg)
    inference_only = evaluate(pre, te, method, cfg)
    records = pre.state_dict()

    def start() -> TinyConv:
        return TinyConv.from_state_dict(records) if method in setup.from_pretrained else setup.model(seed)

    e, ft, lr = setup.epochs[method], setup.finetune[method], setup.lr[method]
    acc = {}
    for name, inj, fine in (("injection", e, 0), ("accurate", 0, e), ("injection_finetune", e - ft, ft)):
        plan = TrainPlan(method=method, injection_epochs=inj, finetune_epochs=fine, lr=lr, seed=seed,
                         eval_every=0, method_config=cfg, finetune_lr_scale=setup.finetune_lr_scale)
        report = train(plan, start(), tr, te)
        acc[name] = report.final_accuracy if not report.aborted else 0.1
    return OrderingResult(method, seed, exact_acc, inference_only, **acc)


def ordering_medians(results: list[OrderingResult]) -> dict:
    keys = ("exact", "inference_only", "injection", "accurate", "injection_finetune")
    return {k: statistics.median(getattr(r, k) for r in results) for k in keys}


def ordering_holds(med: dict, slack_up: float = 0.02, slack_ft: float = 0.03) -> dict:
    return {
        "inference_below_injection": med["inference_only"] < med["injection"],
        "injection_within_accurate": med["injection"] <= med["accurate"] + slack_up,
        "finetune_close_to_accurate": med["injection_finetune"] >= med["accurate"] - slack_ft,
    }


def proxy_necessity_run(seed: int, use_proxy: bool, setup: DeskSetup | None = None, epochs: int = 8,
                        lr: float = 0.05) -> float:
    """Accurate-model SC training with or without the proxy; NaN aborts count as chance."""
    setup = setup or DeskSetup()
    tr, te = setup.datasets()
    plan = TrainPlan(method="sc", finetune_epochs=epochs, lr=lr, seed=seed, use_proxy=use_proxy, eval_every=0)
    report = train(plan, setup.model(seed), tr, te)
    return 0.1 if report.aborted or report.final_accuracy is None else report.final_accuracy


def iteration_times(method: str, batch_size: int = 64, epoch_batches: int = 31, iters: int = 8,
                    channels=(32, 32, 64), image_size: int = 16, seed: int = 0,
                    cfg: MethodConfig | None = None) -> dict:
    """Mean seconds per training iteration for each phase.

    The injection phase runs one whole epoch of ``epoch_batches`` batches so
    its five calibration batches are amortised at the real cadence; the
    uniform phases are timed over ``iters`` batches.
    """
    cfg = cfg or MethodConfig()
    n_samples = -(-batch_size * epoch_batches // 10) * 10
    data = synth_dataset(10, n_samples, seed, image_size, 1, 0.5)
    table = cfg.table() if method == "approx-mult" else None
    cal = {i * epoch_batches // 5 for i in range(5)}
    out = {}
    for label, mode, phase, n in (("exact", "exact", "plain", iters), ("proxy", method, "plain", iters),
                                  ("injection", method, "inject", epoch_batches),
                                  ("accurate", method, "accurate", iters)):
        model = TinyConv(1, image_size, 10, channels, seed=seed)
        if mode != "exact":
            calibrate_model(model, data, mode, cfg)
        opt = SGD(model.parameters(), 0.01, 0.9)
        total = 0.0
        for i in range(n):
            ctx = ForwardContext(mode, phase, cfg, table, seed=seed, step=i,
                                 calibrate_type1=phase == "inject" and i in cal,
                                 calibrate_type2=phase == "inject" and i % 10 == 0,
                                 refresh_scales=(mode == "sc" and i in cal) or (mode == "analog" and i % 10 == 0))
            start = time.perf_counter()
            _step(model, data, i, batch_size, ctx, opt)
            total += time.perf_counter() - start
        out[label] = total / n
    return out


def _step(model, data, i, batch_size, ctx, opt):
    x = data.images[i * batch_size:(i + 1) * batch_size]
    y = data.labels[i * batch_size:(i + 1) * batch_size]
    loss = ops.softmax_cross_entropy(model.forward(Tensor(x), ctx), y)
    loss.backward()
    opt.step()
    opt.zero_grad()


def checkpoint_overhead(method: str = "sc", batch_size: int = 64, iters: int = 12, repeats: int = 5,
                        channels=(8, 8, 16), image_size: int = 12, seed: int = 0) -> dict:
    """Injection-phase step time with checkpointed pointwise ops relative to storing residuals.

    Runs are interleaved and each side keeps its best repeat, which filters
    scheduler noise on a shared machine.
    """
    cfg = MethodConfig()
    data = synth_dataset(10, -(-batch_size * iters // 10) * 10, seed, image_size, 1, 0.5)
    table = cfg.table() if method == "approx-mult" else None
    best = {True: float("inf"), False: float("inf")}
    for _ in range(repeats):
        for ckpt in (False, True):
            model = TinyConv(1, image_size, 10, channels, seed=seed)
            calibrate_model(model, data, method, cfg)
            model.forward(Tensor(data.images[:batch_size]), ForwardContext(
                method, "inject", cfg, table, seed=seed, calibrate_type1=True, calibrate_type2=True))
            opt = SGD(model.parameters(), 0.01, 0.9)
            start = time.perf_counter()
            for i in range(iters):
                ctx = ForwardContext(method, "inject", cfg, table, checkpointing=ckpt, seed=seed, step=i + 1)
                _step(model, data, i, batch_size, ctx, opt)
            best[ckpt] = min(best[ckpt], (time.perf_counter() - start) / iters)
    return {"plain": best[False], "checkpointed": best[True], "overhead": best[True] / best[False] - 1}
