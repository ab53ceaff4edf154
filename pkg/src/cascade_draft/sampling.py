"""Seeded randomness behind a two-method interface.

Every random decision in tree building and verification goes through
``bernoulli`` or ``categorical``; each consumes exactly one uniform draw.
Routing decisions through this seam lets the exhaustive oracle replay
every branch of the decision tree with exact probabilities.
"""

from __future__ import annotations

import numpy as np


class RandomSource:
    def __init__(self, rng: np.random.Generator | int | None = None):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.draws = 0

    def uniform(self) -> float:
        self.draws += 1
        return float(self.rng.random())

    def bernoulli(self, prob: float) -> bool:
        return self.uniform() < prob

    def categorical(self, probs) -> int:
        """Inverse-CDF draw; never returns a zero-probability index."""
        p = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(p)
        u = self.uniform() * cdf[-1]
        idx = min(int(np.searchsorted(cdf, u, side="right")), len(p) - 1)
        if p[idx] <= 0:
            # rounding slack past the last positive entry
            support = np.flatnonzero(p[:idx + 1] > 0)
            idx = int(support[-1]) if len(support) else int(np.flatnonzero(p > 0)[0])
        return idx


def as_source(rng) -> RandomSource:
    if hasattr(rng, "bernoulli") and hasattr(rng, "categorical"):
        return rng
    return RandomSource(rng)
