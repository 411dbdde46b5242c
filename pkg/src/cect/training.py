"""Adam, a plateau learning-rate policy, and the epoch loop with resumable checkpoints.

Run report JSON (``report.json``), keys in this order::

    seed, epochs_completed, steps, best_epoch, best_val_loss,
    step_losses: [float per optimizer step],
    history: [{epoch, lr, train_loss, train_acc, val_loss, acc, npv, ppv, sen, spe, fos,
               tp, fp, fn, tn} per epoch]

Artifacts written to the output directory: ``best.ckpt`` (weights at the lowest
validation loss), ``last.ckpt`` (weights plus ``adam.m/*`` and ``adam.v/*``
moments) and ``last.json`` (step counter, scheduler state, report so far).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functional as F
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CectConfig, TrainConfig
from .data import ImageSet
from .errors import ContractError, NonFiniteError
from .evaluation import evaluate, predict_labels
from .rng import Rng
from .tensor import Tensor

cross_entropy = F.cross_entropy


# optimizer -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("adam_step: params, grads and moments differ in count")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"adam_step: parameter {i} has shape {p.shape}, gradient {g.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a model's parameters; moments stay in the parameter dtype."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.zeros_like([p.data for p in self.params], beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


# scheduler --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0


def plateau_step(state: PlateauState, value: float, factor: float = 0.5, patience: int = 5) -> PlateauState:
    """Strict improvement resets the counter; more than ``patience`` misses scale the lr."""
    if not math.isfinite(value):
        raise NonFiniteError(f"plateau monitor received {value}")
    if value < state.best:
        return PlateauState(state.lr, value, 0)
    bad = state.bad_epochs + 1
    if bad > patience:
        return PlateauState(state.lr * factor, state.best, 0)
    return PlateauState(state.lr, state.best, bad)


# loop --------------------------------------------------------------------------------

@dataclass
class RunReport:
    seed: int
    epochs_completed: int = 0
    steps: int = 0
    best_epoch: int | None = None
    best_val_loss: float | None = None
    step_losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    @property
    def lr_trace(self) -> list[float]:
        return [h["lr"] for h in self.history]


def _moment_arrays(model, state: AdamState) -> dict[str, np.ndarray]:
    names = [n for n, _ in model.named_parameters()]
    out = {}
    for n, m in zip(names, state.m):
        out[f"adam.m/{n}"] = m
    for n, v in zip(names, state.v):
        out[f"adam.v/{n}"] = v
    return out


def _save_last(out: Path, model, opt: Adam, sched: PlateauState, report: RunReport, ckpt_cfg) -> None:
    arrays = dict(model.state_dict())
    arrays.update(_moment_arrays(model, opt.state))
    save_checkpoint(out / "last.ckpt", arrays, ckpt_cfg)
    side = {"adam_step": opt.state.step, "scheduler": asdict(sched), "report": report.to_dict()}
    (out / "last.json").write_text(json.dumps(side, indent=1))


def _load_last(out: Path, model, opt: Adam, ckpt_cfg) -> tuple[PlateauState, RunReport]:
    arrays = load_checkpoint(out / "last.ckpt", ckpt_cfg)
    side = json.loads((out / "last.json").read_text())
    names = [n for n, _ in model.named_parameters()]
    model.load_state_dict({n: arrays[n] for n in names})
    opt.state.m = [arrays[f"adam.m/{n}"].astype(p.dtype) for n, p in model.named_parameters()]
    opt.state.v = [arrays[f"adam.v/{n}"].astype(p.dtype) for n, p in model.named_parameters()]
    opt.state.step = side["adam_step"]
    return PlateauState(**side["scheduler"]), RunReport.from_dict(side["report"])


def fit(model, train: ImageSet, val: ImageSet, cfg: TrainConfig, seed: int, out_dir=None,
        ckpt_cfg: CectConfig | None = None, resume: bool = False, stop_after: int | None = None,
        log=None) -> RunReport:
    """Train ``model`` in place and return its run report.

    Shuffling and augmentation for epoch ``e`` draw from streams keyed by
    ``(seed, e)``, so a run resumed from ``last.ckpt`` continues exactly as
    the uninterrupted one. ``stop_after`` ends the run after that many epochs
    (used to simulate an interruption).
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("fit needs non-empty training and validation sets")
    out = Path(out_dir) if out_dir is not None else None
    ckpt_cfg = ckpt_cfg or CectConfig()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = PlateauState(cfg.initial_lr)
    report = RunReport(seed=seed)
    if resume:
        if out is None or not (out / "last.json").exists():
            raise ContractError("resume requested but no last.json in the output directory")
        sched, report = _load_last(out, model, opt, ckpt_cfg)

    root = Rng(seed)
    val_images, val_labels = val.batch(range(len(val)))
    n = len(train)
    for epoch in range(report.epochs_completed, cfg.epochs):
        if cfg.max_steps and report.steps >= cfg.max_steps:
            break
        lr = sched.lr
        order = root.child("shuffle", epoch).permutation(n)
        aug = root.child("augment", epoch) if cfg.augment else None
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps and report.steps >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            images, labels = train.batch(idx, aug)
            model.zero_grad()
            try:
                logits = model(Tensor(images))
                loss = cross_entropy(logits, labels)
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} step {report.steps}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"epoch {epoch} step {report.steps}: loss is {value}")
            opt.step(lr)
            report.step_losses.append(value)
            report.steps += 1
            total_loss += value * len(idx)
            correct += int((predict_labels(logits) == labels).sum())
            seen += len(idx)

        ev = evaluate(model, val_images, val_labels, cfg.eval_batch_size)
        record = {"epoch": epoch, "lr": lr, "train_loss": total_loss / max(seen, 1),
                  "train_acc": correct / max(seen, 1), "val_loss": ev.loss, **ev.report.to_dict()}
        report.history.append(record)
        report.epochs_completed = epoch + 1
        if report.best_val_loss is None or ev.loss < report.best_val_loss:
            report.best_val_loss, report.best_epoch = ev.loss, epoch
            if out is not None:
                save_checkpoint(out / "best.ckpt", model.state_dict(), ckpt_cfg)
        sched = plateau_step(sched, ev.loss, cfg.plateau_factor, cfg.plateau_patience)
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.6g}  train_loss {record['train_loss']:.4f}  "
                f"train_acc {record['train_acc']:.3f}  val_loss {ev.loss:.4f}  val_acc {ev.report.acc:.3f}")
        if out is not None:
            _save_last(out, model, opt, sched, report, ckpt_cfg)
            (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        if stop_after is not None and report.epochs_completed >= stop_after:
            break
    return report


def run_with_cap(cfg: TrainConfig, steps: int) -> TrainConfig:
    """Copy of ``cfg`` with enough epochs to reach ``steps`` optimizer steps."""
    return replace(cfg, max_steps=steps, epochs=max(cfg.epochs, steps))
