"""AdamW, the warmup + cosine learning-rate schedule, and cyclical KL weighting."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError


@dataclass(frozen=True)
class ScheduleConfig:
    """Learning-rate and beta schedule over ``total_iters`` optimizer steps.

    ``warmup_iters`` is normally the iteration count of the first epoch.
    """

    warmup_iters: int
    total_iters: int
    base_lr: float = 1e-3
    eta_min: float = 0.0
    beta_cycles: int = 5
    ramp_fraction: float = 0.5
    sigmoid_steepness: float = 6.0

    def __post_init__(self):
        if not 0 < self.warmup_iters <= self.total_iters:
            raise ValueError(
                f"need 0 < warmup_iters <= total_iters, got {self.warmup_iters}, {self.total_iters}"
            )
        if self.beta_cycles < 1:
            raise ValueError("beta_cycles must be >= 1")
        if not 0 < self.ramp_fraction <= 1:
            raise ValueError("ramp_fraction must be in (0, 1]")
        if self.base_lr < 0 or self.eta_min < 0:
            raise ValueError("learning rates must be non-negative")


def _check_iter(it, cfg):
    if not 0 <= it < cfg.total_iters:
        raise IndexError(f"iteration {it} outside [0, {cfg.total_iters})")


def lr_at(it, cfg):
    """Linear warmup to ``base_lr`` over ``warmup_iters``, then cosine decay to ``eta_min``."""
    _check_iter(it, cfg)
    if it < cfg.warmup_iters:
        return cfg.base_lr * (it + 1) / cfg.warmup_iters
    progress = (it - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1 + math.cos(math.pi * progress))


def _logistic(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def beta_at(it, cfg):
    """Cyclical KL weight in [0, 1].

    Each of ``beta_cycles`` equal cycles ramps along a logistic curve over the
    first ``ramp_fraction`` of the cycle and then holds at 1.
    """
    _check_iter(it, cfg)
    # (it mod C) / C with C = total / cycles, kept in integer arithmetic
    f = (it * cfg.beta_cycles % cfg.total_iters) / cfg.total_iters
    r = cfg.ramp_fraction
    if f >= r:
        return 1.0
    return _logistic(cfg.sigmoid_steepness * (2 * f / r - 1))


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(
            m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            **hyper,
        )


def adamw_step(params, grads, state, lr):
    """One AdamW update, applied in place to ``params`` and ``state``.

    Decoupled weight decay ``p -= lr * wd * p`` followed by the bias-corrected
    Adam step.  All gradients are validated before anything is modified.
    Returns ``(params, state)``.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name!r}", dim=name)
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, expected {p.shape}", dim=name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient {name!r} contains non-finite values", name=name)
    for name in params:
        if name not in state.m:
            state.m[name] = np.zeros(params[name].shape, dtype=np.float64)
            state.v[name] = np.zeros(params[name].shape, dtype=np.float64)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
