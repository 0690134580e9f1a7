"""Coalition-based reference attributions: LOO, Shapley, Banzhaf.

A :class:`CoalitionGame` wraps a value function and a feature matrix and
exposes v(C) for agent coalitions C.  Two coalition semantics are supported:

``restrict``  agents outside C are absent and the family size becomes |C|
              (index-weighted kinds are restricted by slicing their params);
``pin``       the configuration keeps all n agents with outside agents pinned
              to the baseline row.

v(empty) = 0 for every built-in kind: all of them vanish on the empty /
all-baseline configuration with a zero baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AspanelError, InfeasibleError
from .valuefn import ValueFunction

EXACT_GUARD = 20

# kinds whose restricted value is a function of coalition linear statistics
# (per-dim sums, g-sum, g-square-sum, count); enables vectorized estimators
_LINEAR_STAT_KINDS = ("lin", "heat", "var", "additive", "softplus")


class CoalitionGame:
    def __init__(
        self,
        f: ValueFunction,
        features,
        semantics: str = "restrict",
        baseline: Optional[np.ndarray] = None,
    ):
        if semantics not in ("restrict", "pin"):
            raise AspanelError(f"unknown coalition semantics {semantics!r}")
        z = np.asarray(features, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        self.f = f
        self.features = z
        self.semantics = semantics
        self.baseline = (
            np.zeros(z.shape[1]) if baseline is None else np.asarray(baseline, dtype=np.float64)
        )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def value(self, coalition: Sequence[int]) -> float:
        idx = np.asarray(coalition, dtype=np.int64)
        if idx.size == 0:
            return 0.0
        if self.semantics == "restrict":
            return self.f.restrict(idx).evaluate(self.features[idx])
        pinned = np.broadcast_to(self.baseline, self.features.shape).copy()
        pinned[idx] = self.features[idx]
        return self.f.evaluate(pinned)

    def grand_value(self) -> float:
        return self.f.evaluate(self.features)

    # ---- vectorized helpers ------------------------------------------------

    @property
    def _fast(self) -> bool:
        return (
            self.semantics == "restrict"
            and self.f.kind in _LINEAR_STAT_KINDS
            and not np.any(self.baseline)
        )

    def _values_from_stats(self, sums, gsum, g2sum, count):
        """Coalition values from per-dim sums / g-moments; empty -> 0."""
        k = self.f.kind
        count = np.asarray(count, dtype=np.float64)
        safe = np.where(count > 0, count, 1.0)
        if k == "lin":
            vals = gsum / safe
        elif k == "heat":
            vals = np.log1p(np.prod(sums / safe[..., None], axis=-1))
        elif k == "var":
            vals = g2sum / safe - (gsum / safe) ** 2
        elif k == "additive":
            vals = gsum  # gsum carries sum of per-agent weighted values
        else:  # softplus
            a = self.f.params.get("scale", 0.35)
            vals = np.logaddexp(0.0, a * gsum) / a
        return np.where(count > 0, vals, 0.0)

    def _agent_stats(self):
        """Per-agent contributions to the coalition statistics."""
        z = self.features
        if self.f.kind in ("additive", "softplus"):
            w = (np.asarray(self.f.params["weights"]) * z).sum(axis=1)
            return None, w, None
        g = z.sum(axis=1)
        return z, g, g**2

    def mask_values(self, masks: np.ndarray) -> np.ndarray:
        """v(C) for a (m, n) boolean coalition matrix; vectorized when the
        value is a function of coalition linear statistics."""
        masks = np.asarray(masks, dtype=bool)
        if self._fast:
            z, g, g2 = self._agent_stats()
            m = masks.astype(np.float64)
            count = m.sum(axis=1)
            sums = m @ z if z is not None else None
            gsum = m @ g
            g2sum = m @ g2 if g2 is not None else None
            return self._values_from_stats(sums, gsum, g2sum, count)
        return np.array([self.value(np.flatnonzero(row)) for row in masks])


@dataclass(frozen=True)
class SampledEstimate:
    values: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: Optional[int]


# ---- leave-one-out ---------------------------------------------------------


def leave_one_out(game: CoalitionGame) -> np.ndarray:
    if game.n < 2:
        raise AspanelError("leave-one-out needs at least two agents")
    masks = ~np.eye(game.n, dtype=bool)
    return game.grand_value() - game.mask_values(masks)


# ---- exact enumeration -----------------------------------------------------


def _all_subset_values(game: CoalitionGame) -> np.ndarray:
    """v for every bitmask coalition, index = bitmask over agents."""
    n = game.n
    bits = ((np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    if game._fast:
        return game.mask_values(bits)
    vals = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        vals[mask] = game.value(np.flatnonzero(bits[mask]))
    return vals


def _guard(game: CoalitionGame, what: str) -> None:
    if game.n > EXACT_GUARD:
        raise InfeasibleError(
            f"exact {what} is infeasible for n={game.n} (> {EXACT_GUARD}): 2^n enumeration"
        )


def exact_shapley(game: CoalitionGame) -> np.ndarray:
    _guard(game, "Shapley")
    n = game.n
    vals = _all_subset_values(game)
    # weight by coalition size: |C|! (n-|C|-1)! / n!
    fact = [1.0] * (n + 1)
    for k in range(2, n + 1):
        fact[k] = fact[k - 1] * k
    w = [fact[s] * fact[n - s - 1] / fact[n] for s in range(n)]
    phi = np.zeros(n)
    sizes = np.array([bin(mask).count("1") for mask in range(1 << n)])
    for i in range(n):
        bit = 1 << i
        without = np.flatnonzero(~((np.arange(1 << n) & bit).astype(bool)))
        s = sizes[without]
        phi[i] = float(np.sum(np.array(w)[s] * (vals[without | bit] - vals[without])))
    return phi


def exact_banzhaf(game: CoalitionGame) -> np.ndarray:
    _guard(game, "Banzhaf")
    n = game.n
    vals = _all_subset_values(game)
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = np.flatnonzero(~((np.arange(1 << n) & bit).astype(bool)))
        phi[i] = float(np.mean(vals[without | bit] - vals[without]))
    return phi


# ---- Monte Carlo estimators -------------------------------------------------


def sampled_shapley(game: CoalitionGame, m: int, seed: Optional[int] = None) -> SampledEstimate:
    """Permutation Monte Carlo Shapley.

    Each permutation's marginals telescope to v([n]) - v(empty), so the mean
    estimate is exactly efficient for every m.  Per-permutation seeds derive
    from the root seed by counter, making results independent of scheduling.
    """
    if m < 1:
        raise AspanelError("need at least one permutation sample")
    n = game.n
    acc = np.zeros(n)
    acc2 = np.zeros(n)
    fast = game._fast
    if fast:
        z, g, g2 = game._agent_stats()
    for j in range(m):
        rng = np.random.default_rng((seed, j) if seed is not None else None)
        perm = rng.permutation(n)
        if fast:
            count = np.arange(1, n + 1, dtype=np.float64)
            gsum = np.cumsum(g[perm])
            sums = np.cumsum(z[perm], axis=0) if z is not None else None
            g2sum = np.cumsum(g2[perm]) if g2 is not None else None
            prefix_vals = game._values_from_stats(sums, gsum, g2sum, count)
        else:
            prefix_vals = np.empty(n)
            for t in range(n):
                prefix_vals[t] = game.value(perm[: t + 1])
        marginals = np.diff(np.concatenate(([0.0], prefix_vals)))
        contrib = np.empty(n)
        contrib[perm] = marginals
        acc += contrib
        acc2 += contrib**2
    mean = acc / m
    var = np.maximum(acc2 / m - mean**2, 0.0)
    stderr = np.sqrt(var / m) if m > 1 else np.full(n, np.nan)
    return SampledEstimate(mean, stderr, m, seed)


def sampled_banzhaf(game: CoalitionGame, m: int, seed: Optional[int] = None) -> SampledEstimate:
    """Monte Carlo Banzhaf: for each agent, m uniform coalitions of the
    others and the paired marginal v(C + i) - v(C)."""
    if m < 1:
        raise AspanelError("need at least one coalition sample")
    n = game.n
    rng = np.random.default_rng(seed)
    phi = np.zeros(n)
    stderr = np.zeros(n)
    for i in range(n):
        masks = rng.random((m, n)) < 0.5
        masks[:, i] = False
        without = game.mask_values(masks)
        masks[:, i] = True
        diffs = game.mask_values(masks) - without
        phi[i] = diffs.mean()
        stderr[i] = float(np.sqrt(diffs.var(ddof=1) / m)) if m > 1 else np.nan
    return SampledEstimate(phi, stderr, m, seed)
