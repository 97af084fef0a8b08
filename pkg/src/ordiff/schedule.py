"""Mask-probability schedules that destroy information at a constant rate.

Given a destruction ordering and category marginals p, the schedule assigns
each category c a masking curve m_t(c) such that (a) at any instant only one
group's curve is strictly between 0 and 1 (sequential destruction, values
shared within a group) and (b) the fraction of marginal information
destroyed, measured over categories by

    r(m) = sum_c p_c m_c log(p_c m_c / P_M) / sum_c p_c log p_c,
    P_M  = sum_c p_c m_c,

grows linearly in t (optionally rescaled by a warp). r(m) equals
1 - I(z0; z_t) / H(z0) for the per-token marginal joint of the clean
category z0 and its masked-or-not observation z_t; masking a category whose
identity the mask itself reveals therefore costs nothing, so the first
destroyed group occupies a zero-width segment of r.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEntropy, NonMonotonic
from .ordering import OrderingSpec

SOLVER_TOL = 1e-10
SOLVER_MAX_ITER = 200

_MAGIC = b"ODSC"
_VERSION = 1


@dataclass(frozen=True)
class MaskState:
    """Group mask probabilities in sequential form: ones, one fractional, zeros."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 1 or m.size == 0:
            raise ValueError("state must be a nonempty vector")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("mask probabilities must lie in [0, 1]")
        frac = np.nonzero((m > 0) & (m < 1))[0]
        if frac.size > 1:
            raise ValueError("at most one group may be fractional")
        k = int(frac[0]) if frac.size else int(np.sum(m == 1.0))
        if np.any(m[:k] != 1.0) or np.any(m[k + 1 :] != 0.0):
            raise ValueError("sequential form violated: need ones, then zeros")
        object.__setattr__(self, "m", m)

    @classmethod
    def sequential(cls, num_groups: int, k: int, frac: float = 0.0) -> "MaskState":
        m = np.zeros(num_groups)
        m[:k] = 1.0
        if k < num_groups:
            m[k] = frac
        return cls(m)


def _ratio(probs: np.ndarray, m: np.ndarray, denom: float) -> float:
    pm = probs * m
    total = float(pm.sum())
    if total <= 0.0:
        return 0.0
    nz = pm > 0
    num = float(np.sum(pm[nz] * np.log(pm[nz] / total)))  # 0 log 0 := 0
    return num / denom


def _entropy_denom(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if abs(float(p.sum()) - 1.0) > 1e-9 or np.any(p < 0):
        raise ValueError("probs must be a distribution")
    nz = p > 0
    denom = float(np.sum(p[nz] * np.log(p[nz])))
    if denom == 0.0:
        raise DegenerateEntropy("single-category marginal has no information")
    return denom


def info_ratio(state, group_probs) -> float:
    """Fraction of marginal information destroyed by the given mask state.

    Accepts a MaskState or any raw mask-probability vector (the formula is
    well-defined outside sequential form, e.g. the uniform level m_g = c
    which yields r = c for every marginal). The probability vector is per
    destruction unit; schedules are solved at category resolution, see
    _category_ratio.
    """
    m = state.m if isinstance(state, MaskState) else np.asarray(state, dtype=np.float64)
    p = np.asarray(group_probs, dtype=np.float64)
    return _ratio(p, m, _entropy_denom(p))


def _category_ratio(state_m: np.ndarray, order: OrderingSpec, probs: np.ndarray, denom: float) -> float:
    """Ratio with the group state broadcast to categories; differs from the
    group-level value when a block mixes categories of unequal probability."""
    return _ratio(probs, state_m[order.group_of], denom)


def boundary_ratios(order: OrderingSpec, probs) -> np.ndarray:
    """r_k for the states with the first k groups fully masked; r_0=0, r_G=1."""
    probs = np.asarray(probs, dtype=np.float64)
    denom = _entropy_denom(probs)
    G = order.num_groups
    out = np.empty(G + 1)
    m = np.zeros(G)
    out[0] = 0.0
    for k in range(1, G + 1):
        m[k - 1] = 1.0
        out[k] = _category_ratio(m, order, probs, denom)
    out[G] = 1.0  # exact by construction; avoid float residue
    return out


def _check_boundaries(bounds: np.ndarray) -> None:
    if np.any(np.diff(bounds) < -1e-9):
        raise NonMonotonic(f"boundary ratios decrease: {bounds}")


def solve_state_at(r: float, order: OrderingSpec, probs, tol: float = SOLVER_TOL) -> MaskState:
    """Invert the information ratio under sequential destruction.

    Picks the largest k with r_k <= r (flat segments resolve to the farthest
    progress), then bisects the fractional group's mask probability. r=0 is
    pinned to the all-zero state.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"target ratio {r} outside [0, 1]")
    G = order.num_groups
    if r == 0.0:
        return MaskState.sequential(G, 0)
    if r == 1.0:
        return MaskState.sequential(G, G)
    probs = np.asarray(probs, dtype=np.float64)
    denom = _entropy_denom(probs)
    bounds = boundary_ratios(order, probs)
    _check_boundaries(bounds)
    k = int(np.searchsorted(bounds, r, side="right")) - 1
    k = min(k, G - 1)
    if r - bounds[k] <= tol:
        return MaskState.sequential(G, k)
    if bounds[k + 1] - r <= tol:
        return MaskState.sequential(G, k + 1)

    lo, hi = 0.0, 1.0
    m = np.zeros(G)
    m[:k] = 1.0
    for _ in range(SOLVER_MAX_ITER):
        mid = 0.5 * (lo + hi)
        m[k] = mid
        val = _category_ratio(m, order, probs, denom)
        if abs(val - r) <= tol:
            break
        if val < r:
            lo = mid
        else:
            hi = mid
    m[k] = mid
    return MaskState(m)


@dataclass(frozen=True)
class ScheduleTable:
    """Snapshot grid of per-category mask probabilities, rows t = 0..T."""

    m: np.ndarray  # (T+1, V) float64
    order: OrderingSpec
    probs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("table must be 2-D")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))

    @property
    def num_steps(self) -> int:
        return self.m.shape[0] - 1

    @property
    def num_categories(self) -> int:
        return self.m.shape[1]

    def mask_probs(self, t: int) -> np.ndarray:
        return self.m[t]


def identity_warp(u: float) -> float:
    return u


def piecewise_warp(points):
    """Monotone piecewise-linear warp through (time, ratio) points plus (0,0),(1,1)."""
    xs = np.array([0.0] + [p[0] for p in points] + [1.0])
    ys = np.array([0.0] + [p[1] for p in points] + [1.0])
    if np.any(np.diff(xs) < 0) or np.any(np.diff(ys) < 0):
        raise ValueError("warp points must be nondecreasing in both coordinates")

    def warp(u: float) -> float:
        return float(np.interp(u, xs, ys))

    return warp


def group_time_warp(order: OrderingSpec, probs, weights):
    """Warp allocating diffusion time to groups proportionally to weight * ratio span.

    weights: array of length G (or {group: weight} dict, default 1.0). Weight 1
    for all groups reproduces the identity warp.
    """
    G = order.num_groups
    w = np.ones(G)
    if isinstance(weights, dict):
        for g, val in weights.items():
            w[int(g)] = float(val)
    elif weights is not None:
        w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("group time weights must be positive")
    bounds = boundary_ratios(order, probs)
    spans = np.diff(bounds)
    shares = w * spans
    total = shares.sum()
    if total <= 0:
        raise ValueError("no group has positive ratio span")
    times = np.concatenate([[0.0], np.cumsum(shares / total)])
    times[-1] = 1.0
    return piecewise_warp(list(zip(times[1:-1], bounds[1:-1])))


def build_schedule(order: OrderingSpec, probs, num_steps: int, warp=None) -> ScheduleTable:
    """Snapshot the idealized sequential destruction process at T+1 times.

    Row 0 is all zeros, row T all ones; zero-probability categories are
    destroyed instantly (m=1 from row 1, zero information cost). Columns are
    clamped nondecreasing, correcting only solver-tolerance wiggle.
    """
    if num_steps < 2:
        raise ValueError("need at least 2 steps")
    if warp is None:
        warp = identity_warp
    probs = np.asarray(probs, dtype=np.float64)
    V = probs.size
    table = np.zeros((num_steps + 1, V))

    try:
        _entropy_denom(probs)
        degenerate = False
    except DegenerateEntropy:
        degenerate = True  # single-category marginal: fall back to uniform masking

    for t in range(1, num_steps + 1):
        u = min(1.0, max(0.0, float(warp(t / num_steps))))
        if degenerate:
            table[t, :] = u
            continue
        state = solve_state_at(u, order, probs)
        table[t, :] = state.m[order.group_of]
    table[num_steps, :] = 1.0
    if not degenerate:
        table[1:, probs == 0] = 1.0
    np.maximum.accumulate(table, axis=0, out=table)
    return ScheduleTable(m=table, order=order, probs=probs)


@dataclass
class ScheduleDiagnostics:
    violations: list
    realized_ratios: np.ndarray

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_schedule(table: ScheduleTable) -> ScheduleDiagnostics:
    """Check all table invariants; returns violations instead of raising.

    Sequential form is checked on per-group values restricted to categories
    with positive probability (zero-probability columns must be 1 from row 1).
    """
    v = []
    m, probs, order = table.m, table.probs, table.order
    T = table.num_steps
    if np.any(m[0] != 0.0):
        v.append(("row0_nonzero", 0, np.nonzero(m[0])[0].tolist()))
    if np.any(m[T] != 1.0):
        v.append(("rowT_not_one", T, np.nonzero(m[T] != 1.0)[0].tolist()))
    dec = np.nonzero(np.diff(m, axis=0) < 0)
    for t, c in zip(*dec):
        v.append(("column_decreasing", int(t) + 1, int(c)))
    zero_cols = np.nonzero(probs == 0)[0]
    for c in zero_cols:
        if np.any(m[1:, c] != 1.0):
            v.append(("zero_prob_not_instant", 1, int(c)))

    pos_groups = [g for g in range(order.num_groups) if probs[order.members(g)].sum() > 0]
    realized = np.zeros(T + 1)
    try:
        denom = _entropy_denom(probs)
    except DegenerateEntropy:
        denom = None
    for t in range(T + 1):
        gvals = []
        for g in pos_groups:
            members = order.members(g)
            members = members[probs[members] > 0]
            vals = np.unique(m[t, members])
            if vals.size > 1:
                v.append(("group_value_mixed", t, g))
            gvals.append(vals[0])
        arr = np.asarray(gvals)
        frac = np.nonzero((arr > 0) & (arr < 1))[0]
        k = int(frac[0]) if frac.size else int(np.sum(arr == 1.0))
        if frac.size > 1 or np.any(arr[:k] != 1.0) or np.any(arr[k + 1 :] != 0.0):
            v.append(("not_sequential", t, arr.tolist()))
        if denom is not None:
            realized[t] = _ratio(probs, m[t], denom)
    return ScheduleDiagnostics(violations=v, realized_ratios=realized)


def save_schedule(table: ScheduleTable, path, order_path: str = "", warp_desc: str = "identity") -> None:
    """Flat binary grid (magic ODSC) plus a JSON sidecar describing provenance."""
    T, V = table.num_steps, table.num_categories
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, T, V))
        f.write(table.m.astype("<f8").tobytes(order="C"))
    sidecar = {
        "order_file": order_path,
        "probs_sha256": hashlib.sha256(table.probs.astype("<f8").tobytes()).hexdigest(),
        "probs": table.probs.tolist(),
        "group_of": table.order.group_of.tolist(),
        "num_groups": table.order.num_groups,
        "warp": warp_desc,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)


def load_schedule(path) -> ScheduleTable:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad schedule magic {magic!r}")
        version, T, V = struct.unpack("<III", f.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported schedule version {version}")
        m = np.frombuffer(f.read(8 * (T + 1) * V), dtype="<f8").reshape(T + 1, V)
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    order = OrderingSpec(np.asarray(sidecar["group_of"]), int(sidecar["num_groups"]))
    return ScheduleTable(m=m.copy(), order=order, probs=np.asarray(sidecar["probs"]))
