"""Finite-difference checks for every operator and for a small end-to-end model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import (
    Tensor,
    avg_pool_2x2,
    concat_channels,
    conv2d,
    grad_check,
    mse,
    prelu,
    relative_error,
    transposed_conv2d,
    upsample_nearest_2x,
)
from .model import CasCnnModel, build, init_weights
from .trainer import make_ms_references, ms_loss

OP_TOLERANCE = 1e-3
MODEL_TOLERANCE = 1e-2


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.copysign(margin + 0.1, x), x)


def operator_checks(seed: int = 0) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    x_conv = rng.standard_normal((1, 2, 5, 5))
    w_conv = rng.standard_normal((3, 2, 3, 3))
    b3 = rng.standard_normal(3)
    x_t = rng.standard_normal((1, 2, 4, 4))
    w_t = rng.standard_normal((2, 3, 4, 4))
    x_p = _away_from_zero(rng.standard_normal((2, 3, 3, 3)))
    slope = rng.uniform(0.1, 0.4, 3)
    parts = [rng.standard_normal((1, c, 2, 2)) for c in (2, 1, 3)]
    a, b = rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 4, 4))
    return [
        ("conv2d", lambda: grad_check(conv2d, [x_conv, w_conv, b3])),
        ("transposed_conv2d", lambda: grad_check(transposed_conv2d, [x_t, w_t, b3])),
        ("prelu.slope", lambda: grad_check(prelu, [x_p, slope], wrt=[1])),
        ("prelu.input", lambda: grad_check(prelu, [x_p, slope], wrt=[0])),
        ("avg_pool_2x2", lambda: grad_check(avg_pool_2x2, [rng.standard_normal((1, 2, 4, 6))])),
        ("upsample_nearest_2x", lambda: grad_check(upsample_nearest_2x, [rng.standard_normal((1, 2, 3, 2))])),
        ("concat_channels", lambda: grad_check(lambda *p: concat_channels(p), parts)),
        ("mse", lambda: grad_check(mse, [a, b])),
    ]


def model_grad_errors(model: CasCnnModel, x: np.ndarray, ref: np.ndarray, eps: float = 1e-6,
                      samples: int = 6, seed: int = 0, floor: float = 1e-8) -> dict[str, float]:
    """Worst relative error per parameter tensor for the multi-scale loss.

    The model is converted to float64 in place. ``samples`` randomly chosen
    entries of every parameter tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
        p.grad = None
    xt = Tensor(np.asarray(x, dtype=np.float64))
    refs = [Tensor(r.data.astype(np.float64)) for r in make_ms_references(np.asarray(ref, dtype=np.float64))]

    def loss() -> Tensor:
        return ms_loss(model(xt), refs)

    loss().backward()
    errors = {}
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        analytic = g[idx]
        numeric = np.empty(len(idx))
        for k, j in enumerate(idx):
            keep = flat[j]
            flat[j] = keep + eps
            up = loss().item()
            flat[j] = keep - eps
            down = loss().item()
            flat[j] = keep
            numeric[k] = (up - down) / (2 * eps)
        errors[name] = float(relative_error(analytic, numeric, floor).max())
    return errors


def end_to_end_check(seed: int = 0, width="1/8", size: int = 8, samples: int = 6) -> float:
    rng = np.random.default_rng(seed)
    model = init_weights(build(width), seed)
    x = rng.random((1, 1, size, size))
    ref = rng.random((1, 1, size, size))
    return max(model_grad_errors(model, x, ref, samples=samples, seed=seed).values())


def run_suite(seed: int = 0, samples: int = 6) -> list[CheckResult]:
    results = [CheckResult(name, fn(), OP_TOLERANCE) for name, fn in operator_checks(seed)]
    results.append(CheckResult("cascnn[width=1/8] end-to-end", end_to_end_check(seed, samples=samples),
                               MODEL_TOLERANCE))
    return results
