"""Ordered partitions of vocabulary categories into destruction groups.

All code here speaks *destruction* order: group 0 is masked first in the
forward process. The CLI translates generation-order names (common-first
generation == rare-first destruction) before calling in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Vocab
from .errors import BTooLarge, EmptyVocab, NoWindows, WindowLengthMismatch


@dataclass(frozen=True)
class OrderingSpec:
    """Assignment of category ids to destruction groups 0..G-1.

    Group g is fully destroyed before group g+1 starts. Empty groups are
    not allowed; zero-probability categories occupy ordinary (earliest)
    groups and are handled by the schedule.
    """

    group_of: np.ndarray
    num_groups: int

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int64)
        if g.ndim != 1 or g.size == 0:
            raise EmptyVocab("group_of must be a nonempty 1-D array")
        if g.min() < 0 or g.max() >= self.num_groups:
            raise ValueError("group indices must lie in [0, G)")
        present = np.unique(g)
        if present.size != self.num_groups:
            raise ValueError("every group in [0, G) must be nonempty")
        object.__setattr__(self, "group_of", g)

    @property
    def num_categories(self) -> int:
        return self.group_of.size

    def members(self, group: int) -> np.ndarray:
        return np.nonzero(self.group_of == group)[0]

    def destruction_order(self) -> list[np.ndarray]:
        return [self.members(g) for g in range(self.num_groups)]

    def group_probs(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        out = np.zeros(self.num_groups)
        np.add.at(out, self.group_of, probs)
        return out


def save_ordering(spec: OrderingSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"G={spec.num_groups}\n")
        for cat, g in enumerate(spec.group_of):
            f.write(f"{cat}\t{int(g)}\n")


def load_ordering(path) -> OrderingSpec:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("G="):
            raise ValueError(f"bad ordering header {header!r}")
        num_groups = int(header[2:])
        pairs = [line.split("\t") for line in f if line.strip()]
    group_of = np.zeros(len(pairs), dtype=np.int64)
    for cat, g in pairs:
        group_of[int(cat)] = int(g)
    return OrderingSpec(group_of, num_groups)


def order_explicit(groups, num_categories: int) -> OrderingSpec:
    """Build a spec from explicit destruction groups (list of id lists)."""
    group_of = np.full(num_categories, -1, dtype=np.int64)
    for g, members in enumerate(groups):
        for cat in members:
            if group_of[cat] != -1:
                raise ValueError(f"category {cat} assigned twice")
            group_of[cat] = g
    if np.any(group_of < 0):
        missing = np.nonzero(group_of < 0)[0]
        raise ValueError(f"categories not assigned to any group: {missing.tolist()}")
    return OrderingSpec(group_of, len(list(groups)))


def _singleton_spec(order: np.ndarray) -> OrderingSpec:
    group_of = np.empty(order.size, dtype=np.int64)
    group_of[order] = np.arange(order.size)
    return OrderingSpec(group_of, order.size)


def order_frequency(probs, direction: str) -> OrderingSpec:
    """Singleton groups sorted by probability; zero-probability ids first.

    direction 'common_first' destroys the most probable category first,
    'rare_first' the least probable. Ties break by ascending id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyVocab("empty probability vector")
    if direction not in ("common_first", "rare_first"):
        raise ValueError(f"unknown direction {direction!r}")
    ids = np.arange(probs.size)
    key = -probs if direction == "common_first" else probs
    # lexsort: last key is primary; id ascending breaks ties.
    order = np.lexsort((ids, key))
    zero = order[probs[order] == 0]
    rest = order[probs[order] > 0]
    return _singleton_spec(np.concatenate([zero, rest]))


def order_random(num_categories: int, seed: int) -> OrderingSpec:
    if num_categories < 1:
        raise EmptyVocab("need at least one category")
    rng = np.random.default_rng(seed)
    return _singleton_spec(rng.permutation(num_categories))


@dataclass(frozen=True)
class IGReport:
    """Per-category expected information gain over fixed-length windows (nats)."""

    scores: np.ndarray
    window_len: int
    presence: np.ndarray  # fraction of windows containing each category


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def information_gain(windows, vocab: Vocab, chunk: int = 8192) -> IGReport:
    """Expected entropy reduction of the pooled window-marginal from observing
    whether each category is present in a window.

    score(a) = P1 * (H - H|present) + (1 - P1) * (H - H|absent), all pooled
    within-window token distributions, entropies in nats.
    """
    V = vocab.size
    pooled_present = np.zeros((V, V))  # row a: token counts over windows containing a
    present_windows = np.zeros(V)
    total_counts = np.zeros(V)
    n_windows = 0
    length = None

    buf = []
    def flush():
        nonlocal n_windows
        if not buf:
            return
        block = np.stack(buf)
        buf.clear()
        counts = np.zeros((block.shape[0], V))
        rows = np.repeat(np.arange(block.shape[0]), block.shape[1])
        np.add.at(counts, (rows, block.ravel()), 1.0)
        has = counts > 0
        pooled_present[:] += has.T @ counts
        present_windows[:] += has.sum(axis=0)
        total_counts[:] += counts.sum(axis=0)
        n_windows += block.shape[0]

    for w in windows:
        w = np.asarray(w)
        if length is None:
            length = w.size
        elif w.size != length:
            raise WindowLengthMismatch(f"window of length {w.size}, expected {length}")
        buf.append(w)
        if len(buf) >= chunk:
            flush()
    flush()
    if n_windows == 0:
        raise NoWindows("information gain needs at least one window")

    h_all = _entropy(total_counts)
    p1 = present_windows / n_windows
    scores = np.zeros(V)
    for a in range(V):
        gain = 0.0
        if present_windows[a] > 0:
            gain += p1[a] * (h_all - _entropy(pooled_present[a]))
        if present_windows[a] < n_windows:
            gain += (1.0 - p1[a]) * (h_all - _entropy(total_counts - pooled_present[a]))
        scores[a] = gain
    return IGReport(scores=scores, window_len=int(length), presence=p1)


def order_information_gain(report: IGReport, direction: str) -> OrderingSpec:
    """Singleton groups sorted by IG score; direction picks which end dies first."""
    if direction not in ("high_first", "low_first"):
        raise ValueError(f"unknown direction {direction!r}")
    ids = np.arange(report.scores.size)
    key = -report.scores if direction == "high_first" else report.scores
    return _singleton_spec(np.lexsort((ids, key)))


def make_blocks(probs, num_blocks: int, alpha: float, direction: str = "rare_first") -> OrderingSpec:
    """Partition categories into frequency blocks of ~equal alpha-skewed weight.

    Categories are sorted by probability in destruction order (see
    order_frequency), zero-probability categories fold into the first block,
    and the sorted list is split greedily at cumulative weight targets k/B.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyVocab("empty probability vector")
    if num_blocks < 1:
        raise ValueError("need at least one block")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n_pos = int((probs > 0).sum())
    if num_blocks > n_pos:
        raise BTooLarge(f"{num_blocks} blocks but only {n_pos} categories with mass")

    order = np.concatenate([g for g in order_frequency(probs, direction).destruction_order()])
    weights = np.zeros(probs.size)
    pos = probs > 0
    weights[pos] = probs[pos] ** alpha
    weights /= weights.sum()

    group_of = np.zeros(probs.size, dtype=np.int64)
    g, acc = 0, 0.0
    remaining = n_pos
    for idx, cat in enumerate(order):
        group_of[cat] = g
        acc += weights[cat]
        if weights[cat] > 0:
            remaining -= 1
        last = g == num_blocks - 1
        # Close the block at its cumulative target, or when the tail must be
        # spread one-per-block to keep every block nonempty.
        if not last and (acc >= (g + 1) / num_blocks or remaining <= num_blocks - g - 1):
            g += 1
    return OrderingSpec(group_of, num_blocks)
