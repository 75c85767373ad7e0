"""Seeded random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, seeded from
``SeedSequence([seed, stream])``. PCG64 output is specified bit-for-bit, so a
given seed/stream pair yields the same integer and uniform draws on every
platform. ``draws`` counts calls, not numbers, and exists for diagnostics.
"""

import numpy as np


class RngStream:
    algorithm = "PCG64"

    def __init__(self, seed=0, stream=0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))
        self.draws = 0

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        self.draws += 1
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.draws += 1
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draws += 1
        return self._gen.uniform(low, high, size)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        self.draws += 1
        return self._gen.permutation(n)

    def get_state(self):
        st = self._gen.bit_generator.state
        return {
            "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
            "draws": self.draws,
        }

    def set_state(self, state):
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }
        self.draws = int(state.get("draws", 0))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, draws={self.draws})"
