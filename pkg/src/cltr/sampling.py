"""Alias-method sampling from the inverse-propensity distribution.

Vose's construction: O(n) build, two uniforms per draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AliasTable:
    prob: np.ndarray
    alias: np.ndarray

    @property
    def n(self) -> int:
        return len(self.prob)

    def reconstruct(self) -> np.ndarray:
        """The distribution the table actually samples from."""
        n = self.n
        mass = self.prob.copy()
        np.add.at(mass, self.alias, 1.0 - self.prob)
        return mass / n


def ips_distribution(propensities) -> np.ndarray:
    """P(i) proportional to 1/p_i.

    Accepts an array of propensities or anything with a ``propensity`` array
    attribute (a click log).
    """
    p = np.asarray(getattr(propensities, "propensity", propensities), dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("need a non-empty 1-d array of propensities")
    if not np.all(p > 0) or not np.all(np.isfinite(p)):
        raise ValueError("propensities must be finite and > 0")
    inv = 1.0 / p
    return inv / inv.sum()


def _check_distribution(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) == 0:
        raise ValueError("distribution must be a non-empty 1-d array")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValueError("distribution entries must be finite and non-negative")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"distribution sums to {probs.sum()!r}, not 1")
    return probs


def build_alias(probs) -> AliasTable:
    probs = _check_distribution(probs)
    n = len(probs)
    scaled = probs * n
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    scaled = scaled.tolist()
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        # (l + s) - 1 rather than l - (1 - s): one rounding, no cancellation on s.
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        if scaled[l] < 1.0:
            small.append(l)
        else:
            large.append(l)
    # Leftovers are floating-point residue of mass ~1; they keep prob = 1.
    prob.setflags(write=False)
    alias.setflags(write=False)
    return AliasTable(prob, alias)


def draw(table: AliasTable, rng: np.random.Generator) -> int:
    """One sample; consumes exactly two uniforms (slot, coin)."""
    u_slot, u_coin = rng.random(2)
    slot = min(int(u_slot * table.n), table.n - 1)
    return slot if u_coin < table.prob[slot] else int(table.alias[slot])


def draw_many(table: AliasTable, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` samples; same stream consumption as ``size`` calls to :func:`draw`."""
    u = rng.random((size, 2))
    slots = np.minimum((u[:, 0] * table.n).astype(np.int64), table.n - 1)
    keep = u[:, 1] < table.prob[slots]
    return np.where(keep, slots, table.alias[slots])
