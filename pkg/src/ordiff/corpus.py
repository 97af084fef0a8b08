"""Corpus ingestion, tokenization, marginal statistics and the rule-based toy generator.

Token sequences are plain int64 numpy arrays with ids in [0, V); the mask id V
never appears in data. Corpora are either a single long array (character data)
or a list / 2-D array of equal-length sequences (toy data).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusTooShort, EmptyCorpus, EvenLength, InvalidByte, UnknownId

UNK_TOKEN = "<unk>"

# Toy dataset: anchors {a, b} at even indices, fills determined by the two
# neighbouring anchors. 'f' is part of the vocabulary but never produced.
TOY_TOKENS = ["a", "b", "c", "d", "e", "f"]
TOY_RULES = {(0, 0): 2, (0, 1): 2, (1, 0): 3, (1, 1): 4}  # (left, right) -> fill


@dataclass(frozen=True)
class Vocab:
    """Bidirectional token<->id mapping plus marginal category probabilities.

    Ids are dense in [0, V); ``mask_id`` is V, one past the last real
    category, and never appears in ``probs``.
    """

    tokens: list[str]
    probs: np.ndarray
    _stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise EmptyCorpus("vocabulary has no tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be distinct")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (len(self.tokens),):
            raise ValueError("probs shape must match token count")
        if np.any(probs < 0):
            raise ValueError("probs must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-12:
            raise ValueError(f"probs must sum to 1, got {probs.sum()!r}")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_stoi", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return len(self.tokens)

    def encode(self, tokens, unk_ok: bool = False) -> np.ndarray:
        """Map surface tokens to ids. Unknown tokens map to <unk> if present."""
        unk = self._stoi.get(UNK_TOKEN)
        out = np.empty(len(tokens), dtype=np.int64)
        for i, t in enumerate(tokens):
            j = self._stoi.get(t)
            if j is None:
                if unk is not None and unk_ok:
                    j = unk
                else:
                    raise UnknownId(f"token {t!r} not in vocabulary")
            out[i] = j
        return out

    def decode(self, ids, mask_char: str = "?") -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.mask_id:
                out.append(mask_char)
            elif 0 <= i < self.size:
                out.append(self.tokens[i])
            else:
                raise UnknownId(f"id {i} out of range")
        return out


def save_vocab(vocab: Vocab, path) -> None:
    # One token per line, line number = id, tab-separated probability column.
    with open(path, "w", encoding="utf-8") as f:
        for tok, p in zip(vocab.tokens, vocab.probs):
            f.write(f"{tok}\t{float(p)!r}\n")


def load_vocab(path) -> Vocab:
    tokens, probs = [], []
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            tok, _, p = line.rpartition("\t")
            tokens.append(tok)
            probs.append(float(p))
    return Vocab(tokens, np.asarray(probs))


_TEXT8_ALLOWED = frozenset(b"abcdefghijklmnopqrstuvwxyz ")


def build_char_vocab(data) -> Vocab:
    """Character vocabulary for text8-style data (lowercase a-z and space only)."""
    if isinstance(data, str):
        data = data.encode("ascii", errors="surrogateescape")
    if len(data) == 0:
        raise EmptyCorpus("empty character corpus")
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    allowed = np.zeros(256, dtype=bool)
    allowed[list(_TEXT8_ALLOWED)] = True
    bad = np.nonzero(~allowed[arr])[0]
    if bad.size:
        pos = int(bad[0])
        raise InvalidByte(pos, bytes(arr[pos : pos + 1]))
    counts = np.bincount(arr, minlength=256)
    present = np.nonzero(counts)[0]  # ascending byte order -> deterministic ids
    tokens = [chr(b) for b in present]
    probs = counts[present].astype(np.float64) / arr.size
    return Vocab(tokens, probs)


def encode_chars(text: str, vocab: Vocab) -> np.ndarray:
    return vocab.encode(list(text))


def tokenize_words(line: str) -> list[str]:
    return line.lower().split()


def build_word_vocab(lines, max_vocab: int) -> Vocab:
    """Word vocabulary: the max_vocab most frequent tokens plus <unk> (pooled rest)."""
    counts = Counter()
    for line in lines:
        counts.update(tokenize_words(line))
    if not counts:
        raise EmptyCorpus("no whitespace-delimited tokens found")
    # Ties broken by token string for determinism.
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = ranked[:max_vocab]
    pooled = sum(c for _, c in ranked[max_vocab:])
    total = sum(counts.values())
    tokens = [t for t, _ in kept] + [UNK_TOKEN]
    probs = np.array([c for _, c in kept] + [pooled], dtype=np.float64) / total
    return Vocab(tokens, probs)


def generate_toy_sequence(length: int, rng: np.random.Generator) -> np.ndarray:
    """One toy sequence: anchors i.i.d. uniform {a,b} at even indices, rule fills at odd."""
    if length < 3 or length % 2 == 0:
        raise EvenLength(f"toy length must be odd and >= 3, got {length}")
    ids = np.empty(length, dtype=np.int64)
    anchors = rng.integers(0, 2, size=(length + 1) // 2)
    ids[0::2] = anchors
    ids[1::2] = _fill_from_anchors(anchors)
    return ids


def _fill_from_anchors(anchors: np.ndarray) -> np.ndarray:
    left, right = anchors[:-1], anchors[1:]
    # (a,*) -> c; (b,a) -> d; (b,b) -> e
    return np.where(left == 0, 2, np.where(right == 0, 3, 4))


def generate_toy_corpus(count: int, length: int, rng: np.random.Generator) -> np.ndarray:
    if length < 3 or length % 2 == 0:
        raise EvenLength(f"toy length must be odd and >= 3, got {length}")
    anchors = rng.integers(0, 2, size=(count, (length + 1) // 2))
    out = np.empty((count, length), dtype=np.int64)
    out[:, 0::2] = anchors
    out[:, 1::2] = np.where(anchors[:, :-1] == 0, 2, np.where(anchors[:, 1:] == 0, 3, 4))
    return out


def toy_rule_violations(ids) -> list[int]:
    """Positions violating the toy structure (anchor alphabet or fill rules)."""
    ids = np.asarray(ids)
    bad = []
    for i in range(0, len(ids), 2):
        if ids[i] not in (0, 1):
            bad.append(i)
    for i in range(1, len(ids) - 1, 2):
        l, r = int(ids[i - 1]), int(ids[i + 1])
        expect = TOY_RULES.get((l, r))
        if expect is None or ids[i] != expect:
            bad.append(i)
    return bad


def toy_marginal_probs(length: int | None = None) -> np.ndarray:
    """Per-token category marginal of toy sequences; asymptotic when length is None."""
    if length is None:
        anchor_frac = 0.5
    else:
        anchor_frac = ((length + 1) // 2) / length
    fill_frac = 1.0 - anchor_frac
    return np.array(
        [
            anchor_frac / 2,
            anchor_frac / 2,
            fill_frac / 2,
            fill_frac / 4,
            fill_frac / 4,
            0.0,
        ]
    )


def toy_vocab(probs: np.ndarray | None = None) -> Vocab:
    return Vocab(list(TOY_TOKENS), toy_marginal_probs() if probs is None else probs)


def _as_sequences(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray):
        if corpus.ndim == 1:
            return [corpus]
        return list(corpus)
    return [np.asarray(s) for s in corpus]


def token_frequencies(corpus, vocab: Vocab) -> np.ndarray:
    """Empirical category distribution over every token in the corpus."""
    counts = np.zeros(vocab.size, dtype=np.int64)
    total = 0
    for seq in _as_sequences(corpus):
        if seq.size == 0:
            continue
        if seq.min() < 0 or seq.max() >= vocab.size:
            raise UnknownId("sequence contains ids outside [0, V)")
        counts += np.bincount(seq, minlength=vocab.size)
        total += seq.size
    if total == 0:
        raise EmptyCorpus("no tokens in corpus")
    return counts.astype(np.float64) / total


def window_iter(corpus, length: int, stride: int):
    """Yield aligned windows of exactly `length` tokens; partial tails dropped."""
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be >= 1")
    for seq in _as_sequences(corpus):
        for start in range(0, len(seq) - length + 1, stride):
            yield seq[start : start + length]


def batch_sampler(corpus, seq_len: int, batch: int, rng: np.random.Generator):
    """Infinite stream of (batch, seq_len) crops, uniform over valid positions."""
    seqs = _as_sequences(corpus)
    starts_per_seq = np.array([max(0, len(s) - seq_len + 1) for s in seqs], dtype=np.int64)
    total = int(starts_per_seq.sum())
    if total == 0:
        raise CorpusTooShort(f"no sequence admits a window of length {seq_len}")
    cum = np.cumsum(starts_per_seq)
    while True:
        flat = rng.integers(0, total, size=batch)
        out = np.empty((batch, seq_len), dtype=np.int64)
        for row, pos in enumerate(flat):
            si = int(np.searchsorted(cum, pos, side="right"))
            off = int(pos - (cum[si - 1] if si else 0))
            out[row] = seqs[si][off : off + seq_len]
        yield out
