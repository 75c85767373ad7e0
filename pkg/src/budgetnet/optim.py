"""Optimisers, Lookahead, gradient clipping and learning-rate schedules.

All updates are applied in place to ``Tensor.data`` so that layers sharing
storage with a parameter (batch norm) see the new values.
"""

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from budgetnet.errors import ConfigError, NumericError, UsageError


def _grads(params):
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name!r} has no gradient")
    return [p.grad for p in params]


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    kind = "sgd"

    def __init__(self, params, lr=0.1, momentum=0.0, weight_decay=0.0):
        if not lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self):
        grads = _grads(self.params)
        lr = self.params[0].dtype.type(self.lr) if self.params else self.lr
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                p.data -= lr * v
            else:
                v[...] = g
                p.data -= lr * g
        self.steps += 1

    def buffers(self):
        return [(f"sgd.velocity.{p.name}", v) for p, v in zip(self.params, self.velocity)]

    def scalars(self):
        return {"steps": self.steps}

    def load_scalars(self, values):
        self.steps = int(values["steps"])


class Adam:
    """Bias-corrected Adam; weight decay is added to the gradient (L2 style)."""

    kind = "adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not lr > 0:
            raise ConfigError("lr must be positive")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ConfigError("adam betas must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self):
        grads = _grads(self.params)
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.steps
        c2 = 1 - b2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.dtype, copy=False)

    def buffers(self):
        return ([(f"adam.m.{p.name}", m) for p, m in zip(self.params, self.m)]
                + [(f"adam.v.{p.name}", v) for p, v in zip(self.params, self.v)])

    def scalars(self):
        return {"steps": self.steps}

    def load_scalars(self, values):
        self.steps = int(values["steps"])


class Lookahead:
    """Every ``k`` inner steps, pull slow weights toward the fast ones and reset."""

    def __init__(self, params, k=5, alpha=0.5):
        if k < 1:
            raise ConfigError("lookahead k must be >= 1")
        if not 0.0 < alpha <= 1.0:
            raise ConfigError("lookahead alpha must be in (0, 1]")
        self.params = list(params)
        self.k = k
        self.alpha = alpha
        self.slow = [p.data.copy() for p in self.params]
        self.counter = 0

    def step(self):
        """Call once after each inner optimiser step. Returns True on a sync step."""
        self.counter += 1
        if self.counter % self.k:
            return False
        a = self.alpha
        for p, slow in zip(self.params, self.slow):
            # written as a convex combination so alpha == 1 copies fast exactly
            slow[...] = a * p.data + (1 - a) * slow
            p.data[...] = slow
        return True

    def buffers(self):
        return [(f"lookahead.slow.{p.name}", s) for p, s in zip(self.params, self.slow)]

    def scalars(self):
        return {"lookahead_counter": self.counter}

    def load_scalars(self, values):
        self.counter = int(values["lookahead_counter"])


def global_norm(grads):
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads))


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if not max_norm > 0:
        raise ConfigError("clip threshold must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm >= max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


# --- learning-rate schedules -------------------------------------------------

SCHEDULE_KINDS = ("cosine", "step", "multistep", "exponential", "onecycle", "cosine_warm_restarts")


@dataclass
class Schedule:
    """Closed-form learning rate as a function of the step index ``t``.

    Every kind advances once per epoch except ``onecycle``, which advances
    once per batch and needs ``total_steps``.
    """

    kind: str
    base_lr: float
    t_max: int = None
    eta_min: float = 0.0
    step_size: int = 30
    gamma: float = 0.1
    milestones: list = field(default_factory=list)
    max_lr: float = None
    total_steps: int = None
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    t_0: int = 10
    t_mult: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"lr_scheduler: unknown kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")
        if not self.base_lr > 0:
            raise ConfigError("lr_scheduler: base lr must be positive")
        if self.kind == "cosine" and (self.t_max is None or self.t_max < 1):
            raise ConfigError("lr_scheduler: cosine needs t_max >= 1")
        if self.kind == "step" and self.step_size < 1:
            raise ConfigError("lr_scheduler: step_size must be >= 1")
        if self.kind in ("step", "multistep", "exponential") and not self.gamma > 0:
            raise ConfigError("lr_scheduler: gamma must be positive")
        if self.kind == "onecycle":
            if self.max_lr is None:
                self.max_lr = self.base_lr
            if self.total_steps is None or self.total_steps < 2:
                raise ConfigError("lr_scheduler: onecycle needs total_steps >= 2")
            if not 0.0 < self.pct_start < 1.0:
                raise ConfigError("lr_scheduler: pct_start must be in (0, 1)")
        if self.kind == "cosine_warm_restarts" and (self.t_0 < 1 or self.t_mult < 1):
            raise ConfigError("lr_scheduler: need t_0 >= 1 and t_mult >= 1")
        self.milestones = sorted(self.milestones)

    @property
    def per_batch(self):
        return self.kind == "onecycle"

    def lr(self, t):
        if t < 0:
            raise ValueError("schedule step must be non-negative")
        base = self.base_lr
        if self.kind == "cosine":
            return self.eta_min + 0.5 * (base - self.eta_min) * (1 + math.cos(math.pi * t / self.t_max))
        if self.kind == "step":
            return base * self.gamma ** (t // self.step_size)
        if self.kind == "multistep":
            return base * self.gamma ** bisect.bisect_right(self.milestones, t)
        if self.kind == "exponential":
            return base * self.gamma ** t
        if self.kind == "onecycle":
            return self._onecycle(t)
        return self._warm_restarts(t)

    def _onecycle(self, t):
        if t >= self.total_steps:
            raise ValueError(f"onecycle step {t} is beyond total_steps={self.total_steps}")
        initial = self.max_lr / self.div_factor
        final = initial / self.final_div_factor
        warm_end = self.pct_start * self.total_steps - 1
        if t <= warm_end:
            frac = t / warm_end if warm_end > 0 else 1.0
            return initial + frac * (self.max_lr - initial)
        frac = (t - warm_end) / (self.total_steps - 1 - warm_end)
        return final + 0.5 * (self.max_lr - final) * (1 + math.cos(math.pi * frac))

    def _warm_restarts(self, t):
        period, start = self.t_0, 0
        while t >= start + period:
            start += period
            period *= self.t_mult
        return self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1 + math.cos(math.pi * (t - start) / period))


def schedule_lr(schedule, t):
    return schedule.lr(t)


def make_schedule(spec, base_lr, epochs, steps_per_epoch=None):
    """Build a Schedule from config keys. ``t_max`` defaults to the epoch count."""
    kw = {k: v for k, v in spec.items() if k != "kind"}
    kind = spec.get("kind", "cosine")
    if kind == "cosine":
        kw.setdefault("t_max", epochs)
    if kind == "onecycle" and kw.get("total_steps") is None:
        if steps_per_epoch is None:
            raise ConfigError("onecycle needs total_steps or a known number of batches per epoch")
        kw["total_steps"] = epochs * steps_per_epoch
    return Schedule(kind=kind, base_lr=base_lr, **kw)


def make_optimizer(config, params):
    if config.optimizer == "sgd":
        return SGD(params, config.lr, config.momentum, config.weight_decay)
    return Adam(params, config.lr, config.adam_betas, config.adam_eps, config.weight_decay)
