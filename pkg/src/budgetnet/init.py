"""Weight initialisation schemes."""

import math
from dataclasses import dataclass

import numpy as np

from budgetnet.errors import ConfigError

KINDS = ("he", "xavier", "normal")


@dataclass(frozen=True)
class InitScheme:
    kind: str = "he"
    normal_std: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"init: unknown scheme {self.kind!r}, expected one of {KINDS}")
        if not self.normal_std > 0:
            raise ConfigError("init: normal_std must be positive")


def fans(shape):
    """(fan_in, fan_out) for a conv weight (Cout, Cin, F, F) or linear weight (in, out)."""
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if len(shape) == 2:
        return shape[0], shape[1]
    raise ValueError(f"no fan definition for shape {shape}")


def sample_weight(shape, scheme, rng, dtype=np.float32):
    fan_in, fan_out = fans(shape)
    if scheme.kind == "he":
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    elif scheme.kind == "xavier":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, shape).astype(dtype)
        # casting may round past the bound; clamp to the last representable value inside it
        edge = np.asarray(bound, dtype=dtype)
        if edge > bound:
            edge = np.nextafter(edge, np.asarray(0, dtype=dtype))
        return np.clip(w, -edge, edge)
    else:
        w = rng.normal(0.0, scheme.normal_std, shape)
    return w.astype(dtype)


def initialize(model, scheme, rng):
    """Re-draw every weight of ``model`` in parameter order.

    Conv and linear weights (SE included) follow ``scheme``; batch-norm gamma
    is set to 1, beta and all biases to 0.
    """
    for p in model.parameters():
        leaf = p.name.rsplit(".", 1)[-1]
        if leaf == "weight":
            p.data[...] = sample_weight(p.shape, scheme, rng, p.dtype)
        elif leaf == "gamma":
            p.data[...] = 1
        elif leaf in ("beta", "bias"):
            p.data[...] = 0
        else:
            raise ValueError(f"don't know how to initialise {p.name}")
    return model
