"""Adam with bias correction, linear LR decay, and a central-difference checker."""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import ParamStore, backprop, get_dtype

log = logging.getLogger(__name__)


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params: ParamStore):
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}


def adam_step(params: ParamStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update to trainable parameters, then clear grads.

    Parameters with no accumulated gradient this step are treated as zero-grad.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.trainable_items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from lr0 at step 0 to exactly 0 at total_steps."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


def grad_check(fn, params: ParamStore, h: float = 1e-5,
               max_coords_per_param: int | None = None, seed: int = 0) -> float:
    """Max discrepancy between backprop and central finite differences.

    ``fn`` rebuilds the scalar loss from the current parameter values.  Large
    tensors can be subsampled to ``max_coords_per_param`` seeded coordinates
    (subset and seed are logged).  Relative error uses a small denominator
    floor so finite-difference noise on near-zero gradients does not dominate.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("grad_check requires float64 precision mode")
    params.zero_grad()
    backprop(fn())
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
            log.info("grad_check: %s subsampled to %d/%d coords (seed=%d)",
                     name, max_coords_per_param, n, seed)
        else:
            coords = np.arange(n)
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(fd):
                raise FloatingPointError(f"non-finite finite-difference at {name}[{i}]")
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), 1e-3)
            if err > worst:
                worst = err
    return worst
