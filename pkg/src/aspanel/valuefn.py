"""Macro value functions: evaluation, analytic gradients, and a Hessian probe.

Built-in kinds
--------------
``lin``              mean of per-agent feature sums g_i
``heat``             log(1 + prod_d mean_d) -- multiplicative, saturating
``var``              population variance of g
``gini``             mean absolute difference of g, halved and normalized
``additive``         sum_{i,d} W[i,d] z[i,d]                   (index-weighted)
``quadratic_cross``  sum_{i,d} Q[i,d] z[i,d]^2 + 0.5 s'Cs      (index-weighted)
``softplus``         softplus(a * sum W z) / a
``custom``           user callbacks (gradient optional, falls back to FD)

The first four are permutation-invariant families indexed by the number of
agents n; the index-weighted kinds carry per-agent parameters and are
restricted to a coalition by slicing those parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import AspanelError

ANALYTIC_KINDS = ("lin", "heat", "var", "gini")
BUILTIN_KINDS = ANALYTIC_KINDS + ("additive", "quadratic_cross", "softplus")

# relative step for central finite differences on custom callbacks
FD_REL_STEP = 1e-6


def _as_features(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] < 1:
        raise AspanelError(f"features must be a nonempty n x D array, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise AspanelError("features contain non-finite values")
    return z


def gini_ranks(g: np.ndarray) -> tuple[np.ndarray, bool]:
    """1-based ascending ranks of g, ties given their average (mid) rank.

    Any rank assignment among ties yields the same Gini value; midranks pin
    down the symmetric subgradient, so identical agents receive identical
    attribution.  Returns (ranks, had_ties).
    """
    ranks = rankdata(g, method="average")
    had_ties = bool(len(g) > 1 and np.any(np.diff(np.sort(g)) == 0))
    return ranks, had_ties


@dataclass(frozen=True)
class ValueFunction:
    """A tagged member of the macro value-function family.

    Immutable after construction; ``evaluate`` and ``gradient`` are pure.
    Custom callbacks must be safe for concurrent invocation unless
    ``single_threaded`` is set.
    """

    kind: str
    params: dict = field(default_factory=dict)
    single_threaded: bool = False

    def __post_init__(self):
        if self.kind not in BUILTIN_KINDS + ("custom",):
            raise AspanelError(f"unknown value-function kind {self.kind!r}")
        if self.kind == "quadratic_cross":
            C = np.asarray(self.params["coupling"], dtype=np.float64)
            if C.shape[0] != C.shape[1]:
                raise AspanelError("coupling matrix must be square")
            if not np.allclose(C, C.T):
                raise AspanelError("coupling matrix must be symmetric")
            if np.any(np.diag(C) != 0.0):
                raise AspanelError("coupling matrix must have zero diagonal")
        if self.kind == "softplus" and not self.params.get("scale", 0.35) > 0:
            raise AspanelError("softplus scale must be positive")

    # ---- evaluation -----------------------------------------------------

    def evaluate(self, features) -> float:
        z = _as_features(features)
        n = z.shape[0]
        k = self.kind
        if k == "lin":
            return float(z.sum(axis=1).mean())
        if k == "heat":
            m = z.mean(axis=0)
            return float(np.log1p(np.prod(m)))
        if k == "var":
            g = z.sum(axis=1)
            return float(np.mean((g - g.mean()) ** 2))
        if k == "gini":
            g = z.sum(axis=1)
            ranks, _ = gini_ranks(g)
            # sorted-rank identity for (1/2n^2) sum_ij |g_i - g_j|
            return float(np.dot(2.0 * ranks - n - 1.0, g) / n**2)
        if k == "additive":
            W = self.params["weights"]
            return float(np.sum(W * z))
        if k == "quadratic_cross":
            Q = self.params["diag"]
            C = self.params["coupling"]
            s = z.sum(axis=1)
            return float(np.sum(Q * z**2) + 0.5 * s @ C @ s)
        if k == "softplus":
            a = self.params.get("scale", 0.35)
            W = self.params["weights"]
            s = float(np.sum(W * z))
            # softplus(a*s)/a, overflow-safe
            return float(np.logaddexp(0.0, a * s) / a)
        return float(self.params["fn"](z))

    def gradient(self, features) -> np.ndarray:
        z = _as_features(features)
        n, D = z.shape
        k = self.kind
        if k == "lin":
            return np.full_like(z, 1.0 / n)
        if k == "heat":
            m = z.mean(axis=0)
            H = np.prod(m)
            prod_others = np.array([np.prod(np.delete(m, d)) for d in range(D)])
            row = prod_others / (n * (1.0 + H))
            return np.broadcast_to(row, z.shape).copy()
        if k == "var":
            g = z.sum(axis=1)
            col = (2.0 / n) * (g - g.mean())
            return np.repeat(col[:, None], D, axis=1)
        if k == "gini":
            g = z.sum(axis=1)
            ranks, _ = gini_ranks(g)
            col = (2.0 * ranks - n - 1.0) / n**2
            return np.repeat(col[:, None], D, axis=1)
        if k == "additive":
            return np.array(self.params["weights"], dtype=np.float64).reshape(n, D)
        if k == "quadratic_cross":
            Q = np.asarray(self.params["diag"], dtype=np.float64)
            C = np.asarray(self.params["coupling"], dtype=np.float64)
            s = z.sum(axis=1)
            return 2.0 * Q * z + (C @ s)[:, None]
        if k == "softplus":
            a = self.params.get("scale", 0.35)
            W = np.asarray(self.params["weights"], dtype=np.float64)
            s = float(np.sum(W * z))
            sig = 1.0 / (1.0 + math.exp(-a * s)) if a * s > -700 else 0.0
            return sig * W
        grad_fn = self.params.get("grad")
        if grad_fn is not None:
            return np.asarray(grad_fn(z), dtype=np.float64).reshape(n, D)
        return self._fd_gradient(z)

    def _fd_gradient(self, z: np.ndarray) -> np.ndarray:
        fn = self.params["fn"]
        out = np.empty_like(z)
        work = z.copy()
        for i in range(z.shape[0]):
            for d in range(z.shape[1]):
                h = max(FD_REL_STEP, FD_REL_STEP * abs(z[i, d]))
                orig = work[i, d]
                work[i, d] = orig + h
                fp = float(fn(work))
                work[i, d] = orig - h
                fm = float(fn(work))
                work[i, d] = orig
                out[i, d] = (fp - fm) / (2.0 * h)
        return out

    # ---- structure ------------------------------------------------------

    @property
    def has_closed_form(self) -> bool:
        return self.kind in ANALYTIC_KINDS

    @property
    def permutation_invariant(self) -> bool:
        if self.kind in ANALYTIC_KINDS:
            return True
        if self.kind == "softplus":
            # invariant only when every agent shares the same weight row
            W = np.asarray(self.params["weights"])
            return bool(np.all(W == W[0]))
        return False

    def restrict(self, indices: Sequence[int]) -> "ValueFunction":
        """Restrict an index-weighted kind to a coalition by slicing params.

        Family kinds (lin/heat/var/gini, and custom) are returned unchanged:
        their definition already adapts to the input size.
        """
        idx = np.asarray(indices, dtype=np.int64)
        if self.kind == "additive":
            return additive(np.asarray(self.params["weights"])[idx])
        if self.kind == "quadratic_cross":
            C = np.asarray(self.params["coupling"])
            return quadratic_cross(np.asarray(self.params["diag"])[idx], C[np.ix_(idx, idx)])
        if self.kind == "softplus":
            return softplus_aggregator(
                np.asarray(self.params["weights"])[idx], self.params.get("scale", 0.35)
            )
        return self


# ---- constructors -------------------------------------------------------


def linear_mean() -> ValueFunction:
    return ValueFunction("lin")


def heat() -> ValueFunction:
    return ValueFunction("heat")


def variance() -> ValueFunction:
    return ValueFunction("var")


def gini() -> ValueFunction:
    return ValueFunction("gini")


def additive(weights) -> ValueFunction:
    return ValueFunction("additive", {"weights": np.asarray(weights, dtype=np.float64)})


def quadratic_cross(diag, coupling) -> ValueFunction:
    return ValueFunction(
        "quadratic_cross",
        {
            "diag": np.asarray(diag, dtype=np.float64),
            "coupling": np.asarray(coupling, dtype=np.float64),
        },
    )


def softplus_aggregator(weights, scale: float = 0.35) -> ValueFunction:
    return ValueFunction(
        "softplus", {"weights": np.asarray(weights, dtype=np.float64), "scale": float(scale)}
    )


def custom(fn: Callable, grad: Optional[Callable] = None, single_threaded: bool = False) -> ValueFunction:
    return ValueFunction("custom", {"fn": fn, "grad": grad}, single_threaded=single_threaded)


def by_name(name: str, **kwargs) -> ValueFunction:
    """Resolve a CLI/config tag into a ValueFunction."""
    simple = {"lin": linear_mean, "heat": heat, "var": variance, "gini": gini}
    if name in simple:
        return simple[name]()
    if name == "additive":
        return additive(kwargs["weights"])
    if name == "quadratic_cross":
        return quadratic_cross(kwargs["diag"], kwargs["coupling"])
    if name == "softplus":
        return softplus_aggregator(kwargs["weights"], kwargs.get("scale", 0.35))
    raise AspanelError(f"unknown value function {name!r}")


# ---- module-level operations --------------------------------------------


def evaluate(f: ValueFunction, features) -> float:
    return f.evaluate(features)


def gradient(f: ValueFunction, features) -> np.ndarray:
    return f.gradient(features)


def hessian_offdiag_probe(
    f: ValueFunction,
    features,
    pairs: Optional[Sequence[tuple[int, int, int, int]]] = None,
    n_pairs: int = 32,
    seed: int = 0,
    step: float = 1e-4,
) -> float:
    """Max |d^2 f / dz_{i,d} dz_{j,d'}| over sampled cross-agent pairs.

    A numerically-zero probe classifies f as additively separable across
    agents; a clearly positive probe certifies cross-agent interaction.
    Uses central mixed second differences.
    """
    z = _as_features(features)
    n, D = z.shape
    if n < 2:
        raise AspanelError("Hessian probe needs at least two agents")
    if pairs is None:
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(n_pairs):
            i, j = rng.choice(n, size=2, replace=False)
            pairs.append((int(i), int(rng.integers(D)), int(j), int(rng.integers(D))))
    worst = 0.0
    work = z.copy()
    for i, d, j, dp in pairs:
        hi = step * max(1.0, abs(z[i, d]))
        hj = step * max(1.0, abs(z[j, dp]))
        acc = 0.0
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            work[i, d] = z[i, d] + si * hi
            work[j, dp] = z[j, dp] + sj * hj
            acc += si * sj * f.evaluate(work)
            work[i, d] = z[i, d]
            work[j, dp] = z[j, dp]
        worst = max(worst, abs(acc / (4.0 * hi * hj)))
    return worst
