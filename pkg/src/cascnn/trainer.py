"""Two-phase training: multi-scale loss first, then output-loss fine-tuning."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, avg_pool_2x2, mean_of, mse, no_grad
from .dataset import PatchSet
from .fileio import atomic_write_text
from .model import CasCnnModel, MultiScaleOutput, save_checkpoint

log = logging.getLogger(__name__)

PHASES = ("multi-scale", "output-only")


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"loss became {value} at epoch {epoch}, step {step}")


def make_ms_references(ref) -> list[Tensor]:
    """Full, 1/2, 1/4 and 1/8 resolution references by 2x2 block averaging.

    Repeated 2x2 means equal the exact 4-, 16- and 64-pixel block means.
    """
    r = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=np.float32))
    if r.data.ndim != 4 or r.shape[2] % 8 or r.shape[3] % 8:
        raise ValueError(f"reference batch must be [N,1,H,W] with H, W divisible by 8, got {r.shape}")
    refs = [r]
    for _ in range(3):
        refs.append(avg_pool_2x2(refs[-1]))
    return [Tensor(t.data) for t in refs]


def ms_loss(out: MultiScaleOutput, refs: Sequence[Tensor]) -> Tensor:
    """Unweighted mean of the four per-scale MSEs."""
    if len(refs) != 4:
        raise ValueError(f"need four references, got {len(refs)}")
    return mean_of([mse(y, r) for y, r in zip(out, refs)])


def output_loss(out: MultiScaleOutput, ref_full) -> Tensor:
    return mse(out.y_full, ref_full)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"gradients do not match parameters: {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# training driver

@dataclass
class TrainConfig:
    phase: str = "multi-scale"
    epochs: int = 100
    batch_size: int = 20
    lr: float = 1e-4
    seed: int = 0
    plateau_patience: int = 5  # epochs without improvement before halving lr
    plateau_factor: float = 0.5
    stop_window: int = 10  # convergence: < stop_min_gain relative gain over this many epochs
    stop_min_gain: float = 1e-3
    keep_best: bool = True  # finish with the best-validation parameters seen
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class EpochLog:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    seconds: float


LOG_HEADER = ["epoch", "phase", "train_loss", "val_loss", "seconds"]


def logs_to_csv(logs: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in logs:
        w.writerow([r.epoch, r.phase, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}"])
    return buf.getvalue()


def write_log(path, logs: Sequence[EpochLog]) -> None:
    atomic_write_text(path, logs_to_csv(logs))


def predict(model: CasCnnModel, distorted: np.ndarray, batch_size: int = 20) -> np.ndarray:
    """Full-resolution outputs for a [N,1,H,W] batch, evaluated in chunks."""
    outs = []
    with no_grad():
        for s in range(0, len(distorted), batch_size):
            outs.append(model(distorted[s:s + batch_size]).y_full.data)
    return np.concatenate(outs)


def evaluate_output_mse(model: CasCnnModel, data: PatchSet, batch_size: int = 20) -> float:
    """Output-only MSE over a dataset (pixel-weighted mean)."""
    dist, ref = data.batch(np.arange(len(data)))
    pred = predict(model, dist, batch_size).astype(np.float64)
    return float(np.mean((pred - ref) ** 2))


def loss_for(phase: str, out: MultiScaleOutput, ref: np.ndarray) -> Tensor:
    if phase == "multi-scale":
        return ms_loss(out, make_ms_references(ref))
    return output_loss(out, Tensor(ref))


def train_step(model: CasCnnModel, dist: np.ndarray, ref: np.ndarray, phase: str,
               state: AdamState) -> float:
    model.zero_grad()
    loss = loss_for(phase, model(dist), ref)
    value = loss.item()
    if not math.isfinite(value):
        return value
    loss.backward()
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
    return value


def train(model: CasCnnModel, train_set: PatchSet, val_set: PatchSet | None, config: TrainConfig,
          log_path=None, on_epoch: Callable[[EpochLog], None] | None = None,
          state: AdamState | None = None) -> tuple[CasCnnModel, list[EpochLog]]:
    """Run one training phase; returns the model (trained in place) and its epoch log.

    The learning rate is halved after ``plateau_patience`` epochs without a
    new best validation loss. The phase stops early when the best
    validation loss improved by less than ``stop_min_gain`` (relative) over
    the last ``stop_window`` epochs.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    val_set = val_set if val_set is not None and len(val_set) else None
    rng = np.random.default_rng(config.seed)
    state = state or AdamState(lr=config.lr)
    logs: list[EpochLog] = []
    best = evaluate_output_mse(model, val_set) if val_set is not None else math.inf
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    history = [best]
    since_best = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses, weights = [], []
        for step, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            dist, ref = train_set.batch(idx)
            value = train_step(model, dist, ref, config.phase, state)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, step, value)
            losses.append(value)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_output_mse(model, val_set) if val_set is not None else train_loss
        entry = EpochLog(epoch, config.phase, train_loss, val_loss, time.perf_counter() - t0)
        logs.append(entry)
        log.info("epoch %d %s train %.6g val %.6g lr %.3g (%.1fs)", epoch, config.phase,
                 train_loss, val_loss, state.lr, entry.seconds)
        if on_epoch is not None:
            on_epoch(entry)
        if log_path is not None:
            write_log(log_path, logs)

        if val_loss < best:
            best = val_loss
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.plateau_patience:
                state.lr *= config.plateau_factor
                since_best = 0
        history.append(best)

        if config.checkpoint_every and config.checkpoint_path and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, config.checkpoint_path)
        if len(history) > config.stop_window:
            old = history[-1 - config.stop_window]
            if math.isfinite(old) and old - best < config.stop_min_gain * old:
                log.info("phase %s converged after %d epochs", config.phase, epoch)
                break

    if config.keep_best and val_set is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    if config.checkpoint_path:
        save_checkpoint(model, config.checkpoint_path)
    return model, logs
