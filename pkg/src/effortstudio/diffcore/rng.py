"""Counter-based random stream: identical (seed, counter) gives identical draws."""

from __future__ import annotations

import numpy as np


class RngStream:
    """Deterministic stream of draws addressed by (seed, counter).

    Each draw derives a fresh generator from ``SeedSequence([seed, counter])``
    and advances the counter, so replaying from a recorded (seed, counter)
    pair reproduces the remaining draws bit for bit regardless of the shapes
    requested earlier.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _next_generator(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += 1
        return gen

    def normal(self, shape=()) -> np.ndarray:
        return self._next_generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._next_generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next_generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def split(self) -> "RngStream":
        """Child stream seeded from the next counter value; advances this one."""
        child_seed = int(self._next_generator().integers(0, 2**63 - 1))
        return RngStream(child_seed)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["seed"], state["counter"])

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"
