"""Feature-panel data model: ingestion, tier partitioning, synthetic generation.

The panel is a dense nonnegative (agents x steps x dims) tensor with three
default dimensions per agent per step: reach (log1p cumulative followers at
step start), activity (log1p topic-matching posts+reposts in the step), and
resonance (log1p topic-matching replies received in the step).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import struct
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import AspanelError, EmptyPanelError

log = logging.getLogger(__name__)

EVENT_KINDS = ("post", "reply", "repost", "follow")
DEFAULT_DIM_NAMES = ("reach", "activity", "resonance")
DEFAULT_CUT_FRACTIONS = (0.01, 0.10, 1.00)

_MAGIC = b"ASP1"


@dataclass(frozen=True)
class EventRecord:
    ts: int  # UTC seconds
    actor: str
    kind: str
    text: Optional[str] = None
    target: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind in ("follow", "reply") and not self.target:
            raise ValueError(f"{self.kind} event requires a target")


@dataclass
class FeaturePanel:
    """Immutable N x T x D feature tensor with agent identities.

    All entries must be finite; entries must be nonnegative unless
    ``allow_negative`` is set (used only by the raw synthetic benchmark path).
    """

    features: np.ndarray
    agent_ids: list[str]
    dim_names: tuple[str, ...] = DEFAULT_DIM_NAMES
    allow_negative: bool = False

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 3:
            raise AspanelError("features must be a 3-d (agents, steps, dims) array")
        if feats.shape[0] == 0:
            raise EmptyPanelError("panel has no agents")
        if not np.all(np.isfinite(feats)):
            raise AspanelError("panel contains non-finite values")
        if not self.allow_negative and np.any(feats < 0):
            raise AspanelError("panel contains negative values")
        if len(self.agent_ids) != feats.shape[0]:
            raise AspanelError("agent_ids length must match the agent axis")
        if len(set(self.agent_ids)) != len(self.agent_ids):
            raise AspanelError("agent_ids must be unique")
        if len(self.dim_names) != feats.shape[2]:
            object.__setattr__(self, "dim_names", tuple(f"dim{d}" for d in range(feats.shape[2])))
        feats.setflags(write=False)
        self.features = feats

    @property
    def n_agents(self) -> int:
        return self.features.shape[0]

    @property
    def n_steps(self) -> int:
        return self.features.shape[1]

    @property
    def n_dims(self) -> int:
        return self.features.shape[2]

    def step_slice(self, t: int) -> np.ndarray:
        return self.features[:, t, :]

    def collapse(self) -> np.ndarray:
        """Agent-level N x D summary: reach (dim 0) at the last step, other
        dims re-log1p'd over the summed per-step counts."""
        out = np.empty((self.n_agents, self.n_dims))
        out[:, 0] = self.features[:, -1, 0]
        for d in range(1, self.n_dims):
            out[:, d] = np.log1p(np.expm1(self.features[:, :, d]).sum(axis=1))
        return out

    # ---- container I/O ---------------------------------------------------

    def save(self, path) -> None:
        """Flat binary container: magic 'ASP1', little-endian int64 dims
        N,T,D, row-major float64 payload, newline-delimited agent ids."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<3q", self.n_agents, self.n_steps, self.n_dims))
            fh.write(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
            fh.write("\n".join(self.agent_ids).encode("utf-8"))

    @classmethod
    def load(cls, path, dim_names: Sequence[str] = DEFAULT_DIM_NAMES,
             allow_negative: bool = False) -> "FeaturePanel":
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise AspanelError(f"{path}: not an ASP1 panel file")
            n, t, d = struct.unpack("<3q", fh.read(24))
            payload = fh.read(8 * n * t * d)
            feats = np.frombuffer(payload, dtype="<f8").reshape(n, t, d).copy()
            ids = fh.read().decode("utf-8").split("\n")
        if len(ids) != n:
            raise AspanelError(f"{path}: agent id count {len(ids)} != header N={n}")
        names = tuple(dim_names) if len(dim_names) == d else tuple(f"dim{k}" for k in range(d))
        return cls(feats, ids, names, allow_negative=allow_negative)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent_id", "step", *self.dim_names])
            for i, aid in enumerate(self.agent_ids):
                for t in range(self.n_steps):
                    w.writerow([aid, t, *(repr(float(v)) for v in self.features[i, t])])


# ---- ingestion -----------------------------------------------------------


def read_events_jsonl(path) -> tuple[list[EventRecord], int]:
    """Parse a JSONL event file; malformed lines are skipped and counted."""
    events, bad = [], 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = EventRecord(
                    ts=int(obj["ts"]),
                    actor=str(obj["actor"]),
                    kind=str(obj["kind"]),
                    text=obj.get("text"),
                    target=obj.get("target"),
                )
                rec.validate()
                events.append(rec)
            except (ValueError, KeyError, TypeError):
                bad += 1
    if bad:
        warnings.warn(f"skipped {bad} malformed event records", stacklevel=2)
    return events, bad


def _matches(text: Optional[str], keywords_lower: list[str]) -> bool:
    if not text:
        return False
    low = text.lower()
    return any(k in low for k in keywords_lower)


def ingest_events(
    stream: Iterable[EventRecord],
    topic_keywords: Sequence[str],
    window: tuple[int, int],
    step: int,
    follower_snapshot: Optional[dict[str, int]] = None,
    cumulative: bool = False,
    exclude_pattern: Optional[str] = None,
) -> FeaturePanel:
    """Aggregate an event stream into a 3-dim feature panel.

    Order-independent: the stream is sorted by timestamp before bucketing.
    Agents with zero events inside the window are excluded.  When a follower
    snapshot is given it defines the count at window start and pre-window
    follow events are ignored; otherwise followers accumulate from all
    observed follow events.
    """
    start, end = window
    if end <= start:
        raise AspanelError("window must be nonempty")
    if step <= 0 or (end - start) % step != 0:
        raise AspanelError("step must divide the window into T >= 1 buckets")
    n_steps = (end - start) // step

    kw = [k.lower() for k in topic_keywords]
    excl = re.compile(exclude_pattern) if exclude_pattern else None

    events, bad = [], 0
    for ev in stream:
        try:
            ev.validate()
            events.append(ev)
        except ValueError:
            bad += 1
    if bad:
        warnings.warn(f"skipped {bad} malformed event records", stacklevel=2)
    events.sort(key=lambda e: e.ts)

    def keep(agent: str) -> bool:
        return excl is None or not excl.search(agent)

    active = sorted(
        {e.actor for e in events if start <= e.ts < end and keep(e.actor)}
    )
    if not active:
        raise EmptyPanelError("no active agents after filtering (empty panel)")
    index = {a: i for i, a in enumerate(active)}
    n = len(active)

    posts = np.zeros((n, n_steps))
    replies = np.zeros((n, n_steps))

    # follow events targeting an active agent (kept regardless of window;
    # pre-window follows seed the cumulative count unless a snapshot is given)
    follow_ts: dict[int, list[int]] = {i: [] for i in range(n)}
    for ev in events:
        if ev.kind == "follow" and ev.target in index and keep(ev.actor):
            follow_ts[index[ev.target]].append(ev.ts)
        if not (start <= ev.ts < end):
            continue
        t = (ev.ts - start) // step
        if ev.kind in ("post", "repost") and ev.actor in index and _matches(ev.text, kw):
            posts[index[ev.actor], t] += 1
        elif ev.kind == "reply" and ev.target in index and _matches(ev.text, kw):
            replies[index[ev.target], t] += 1

    init = np.zeros(n)
    if follower_snapshot is not None:
        for a, i in index.items():
            init[i] = follower_snapshot.get(a, 0)

    feats = np.zeros((n, n_steps, 3))
    bucket_starts = [start + t * step for t in range(n_steps)]
    for i in range(n):
        ts_arr = np.asarray(follow_ts[i], dtype=np.int64)
        if follower_snapshot is None:
            counts = [init[i] + np.count_nonzero(ts_arr < bs) for bs in bucket_starts]
        else:
            counts = [
                init[i] + np.count_nonzero((ts_arr >= start) & (ts_arr < bs))
                for bs in bucket_starts
            ]
        feats[i, :, 0] = np.log1p(counts)

    if cumulative:
        posts = np.cumsum(posts, axis=1)
        replies = np.cumsum(replies, axis=1)
    feats[:, :, 1] = np.log1p(posts)
    feats[:, :, 2] = np.log1p(replies)

    return FeaturePanel(feats, active)


# ---- tier partitioning ---------------------------------------------------


@dataclass(frozen=True)
class TierPartition:
    labels: np.ndarray  # per-agent group index, 0 = highest tier
    group_names: tuple[str, ...]
    anchor_metric: str
    cut_fractions: tuple[float, ...]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def group_sizes(self) -> list[int]:
        return [int(np.count_nonzero(self.labels == k)) for k in range(self.n_groups)]

    def group_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def make_tier_partition(
    panel_or_values: Union[FeaturePanel, np.ndarray],
    anchor: Union[Callable, np.ndarray, None] = None,
    cut_fractions: Sequence[float] = DEFAULT_CUT_FRACTIONS,
    group_names: Optional[Sequence[str]] = None,
    anchor_name: str = "anchor",
    agent_ids: Optional[Sequence[str]] = None,
) -> TierPartition:
    """Rank agents descending by an anchor metric and slice into tiers.

    Ties are broken by agent id (lexicographic) so partitions are
    reproducible.  Group k holds the agents in cumulative-fraction slice k;
    boundaries are ceil(fraction * N).
    """
    fracs = tuple(float(f) for f in cut_fractions)
    if any(b <= a for a, b in zip(fracs, fracs[1:])) or fracs[-1] != 1.0:
        raise AspanelError("cut_fractions must be strictly increasing and end at 1.0")

    if isinstance(panel_or_values, FeaturePanel):
        ids = np.asarray(panel_or_values.agent_ids)
        metric = anchor(panel_or_values) if callable(anchor) else anchor
        if metric is None:
            metric = panel_or_values.collapse()[:, 0]
    else:
        metric = np.asarray(panel_or_values, dtype=np.float64)
        ids = (
            np.asarray(agent_ids)
            if agent_ids is not None
            else np.array([f"{i:09d}" for i in range(len(metric))])
        )
    metric = np.asarray(metric, dtype=np.float64)
    n = len(metric)
    if n < len(fracs):
        raise AspanelError(f"cannot split {n} agents into {len(fracs)} groups")

    order = np.lexsort((ids, -metric))
    bounds = [math.ceil(f * n) for f in fracs]
    labels = np.empty(n, dtype=np.int64)
    lo = 0
    for k, hi in enumerate(bounds):
        labels[order[lo:hi]] = k
        lo = hi
    names = tuple(group_names) if group_names else tuple(
        ("top", "mid", "tail")[k] if len(fracs) == 3 else f"group{k}" for k in range(len(fracs))
    )
    return TierPartition(labels, names, anchor_name, fracs)


# ---- synthetic generation ------------------------------------------------

FEATURE_LAWS = ("uniform_pm1", "abs_gaussian", "pareto_reach")


@dataclass(frozen=True)
class SyntheticPanelSpec:
    n_agents: int
    n_steps: int = 1
    n_dims: int = 3
    feature_law: str = "abs_gaussian"
    pareto_alpha: float = 1.5
    reach_coupling: float = 1.0  # pareto_reach: engagement ~ reach^coupling
    seed: int = 0

    def __post_init__(self):
        if self.feature_law not in FEATURE_LAWS:
            raise AspanelError(f"unknown feature law {self.feature_law!r}")
        if self.n_agents < 1 or self.n_steps < 1 or self.n_dims < 1:
            raise AspanelError("panel dimensions must be positive")
        if self.feature_law == "pareto_reach" and not self.pareto_alpha > 1.0:
            raise AspanelError("pareto_alpha must exceed 1 (finite mean)")


def generate_synthetic(spec: SyntheticPanelSpec, raw: bool = False):
    """Deterministic synthetic panel from a spec.

    With ``raw=True`` the untransformed draws are returned as a plain array
    (the uniform law keeps its +/-1 support); this path feeds the synthetic
    benchmark, which deliberately bypasses the nonnegativity invariant.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n_agents, spec.n_steps, spec.n_dims)
    if spec.feature_law == "uniform_pm1":
        draws = rng.uniform(-1.0, 1.0, shape)
        if raw:
            return draws
        feats = (draws + 1.0) / 2.0
    elif spec.feature_law == "abs_gaussian":
        feats = np.abs(rng.standard_normal(shape))
        if raw:
            return feats
    else:  # pareto_reach
        reach_raw = 1.0 + rng.pareto(spec.pareto_alpha, (spec.n_agents, spec.n_steps))
        feats = np.empty(shape)
        feats[:, :, 0] = np.log1p(reach_raw)
        for d in range(1, spec.n_dims):
            noise = np.abs(rng.standard_normal((spec.n_agents, spec.n_steps)))
            feats[:, :, d] = np.log1p(reach_raw**spec.reach_coupling * noise)
        if raw:
            return feats
    ids = [f"a{i:08d}" for i in range(spec.n_agents)]
    return FeaturePanel(feats, ids)
