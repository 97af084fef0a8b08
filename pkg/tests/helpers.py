"""Shared test oracles, all independent of the library's internal formulas."""

import zlib

import numpy as np


def ratio_by_joint_enumeration(probs, m_cat):
    """1 - I(z0; z_t)/H(z0) from the explicit joint over (z0, z_t).

    z_t takes values in categories + mask; the joint is materialized and the
    mutual information summed term by term.
    """
    probs = np.asarray(probs, dtype=np.float64)
    m_cat = np.asarray(m_cat, dtype=np.float64)
    V = probs.size
    joint = np.zeros((V, V + 1))
    for c in range(V):
        joint[c, c] = probs[c] * (1.0 - m_cat[c])
        joint[c, V] = probs[c] * m_cat[c]
    pz0 = joint.sum(axis=1)
    pzt = joint.sum(axis=0)
    hz0 = -(pz0[pz0 > 0] * np.log(pz0[pz0 > 0])).sum()
    info = 0.0
    for c in range(V):
        for a in range(V + 1):
            if joint[c, a] > 0:
                info += joint[c, a] * np.log(joint[c, a] / (pz0[c] * pzt[a]))
    return 1.0 - info / hz0


def literal_kl(q_vec, p_vec):
    """KL between two materialized distributions, 0 log 0 := 0."""
    q = np.asarray(q_vec, dtype=np.float64)
    p = np.asarray(p_vec, dtype=np.float64)
    total = 0.0
    for qi, pi in zip(q, p):
        if qi > 0:
            total += np.inf if pi == 0 else qi * np.log(qi / pi)
    return total


class RandomDenoiser:
    """Valid random predictor: a deterministic function of (z_t, t)."""

    def __init__(self, vocab, seed=0, concentration=1.0):
        self.vocab = vocab
        self.seed = seed
        self.conc = concentration

    def predict(self, zt, t):
        zt = np.atleast_2d(np.asarray(zt))
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (zt.shape[0],))
        out = np.empty((*zt.shape, self.vocab))
        for i, row in enumerate(zt):
            key = zlib.crc32(row.astype(np.int64).tobytes() + bytes([int(t[i]) % 251]))
            rng = np.random.default_rng([self.seed, key])
            out[i] = rng.dirichlet(np.full(self.vocab, self.conc), size=zt.shape[1])
        return out


class OneHotDenoiser:
    """Always predicts a fixed category with certainty."""

    def __init__(self, vocab, category):
        self.vocab = vocab
        self.category = category

    def predict(self, zt, t):
        zt = np.atleast_2d(np.asarray(zt))
        out = np.zeros((*zt.shape, self.vocab))
        out[..., self.category] = 1.0
        return out


def random_tiny_instance(rng, max_vocab=4, max_len=2, max_steps=3):
    """(z0, table, model) triple small enough for trajectory enumeration."""
    from ordiff import ordering, schedule

    V = int(rng.integers(2, max_vocab + 1))
    L = int(rng.integers(1, max_len + 1))
    T = int(rng.integers(2, max_steps + 1))
    probs = rng.dirichlet(np.ones(V))
    perm = rng.permutation(V)
    order = ordering.order_explicit([[int(c)] for c in perm], V)
    table = schedule.build_schedule(order, probs, T)
    z0 = rng.integers(0, V, size=L)
    model = RandomDenoiser(V, seed=int(rng.integers(2**31)))
    return z0, table, model
