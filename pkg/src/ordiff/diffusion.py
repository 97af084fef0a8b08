"""Forward corruption, true posterior, reverse step, ELBO assembly and sampling.

A model is anything with ``predict(zt, t) -> probs`` where zt is an int64
array of shape (N, L) containing category ids and possibly the mask id V,
t is an int64 array of shape (N,), and probs has shape (N, L, V) with rows
summing to 1. All log computations are in nats; bits appear only at
reporting boundaries.

Why position-wise computations are exact here: the forward corruption, the
two-point posterior q(z_{t-1} | z_t, z0) and the reverse transition all
factorize over positions, so for a *given* z_t every per-step term is an
exact sum of per-position terms. The only coupling across positions enters
through the model's prediction, i.e. through which z_t patterns occur; the
exact evaluator therefore enumerates feasible mask patterns per step
(cheap under sequential destruction, where most positions are forced) and
falls back to fixed-seed Monte Carlo over patterns when there are too many.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadTimestep,
    DivisionByZeroMask,
    EmptySupport,
    MaskResidue,
    NotFullyMasked,
    TooLarge,
    ZeroProbability,
)
from .schedule import ScheduleTable

LN2 = math.log(2.0)


def _check_t(t, num_steps: int, low: int = 0) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < low) or np.any(t > num_steps):
        raise BadTimestep(f"timestep {t} outside [{low}, {num_steps}]")
    return t


def forward_sample(z0, t, table: ScheduleTable, rng: np.random.Generator) -> np.ndarray:
    """Corrupt z0 at time t: each token of category c is masked w.p. m_t(c)."""
    z0 = np.asarray(z0)
    t = _check_t(t, table.num_steps)
    if t.ndim == 1:
        t = t[:, None]
    pm = table.m[t, z0]
    mask = rng.random(z0.shape) < pm
    return np.where(mask, table.num_categories, z0)


@dataclass
class DiffusionBatch:
    """A corrupted batch: clean ids, per-sequence timestep, corrupted ids, flags."""

    z0: np.ndarray
    t: np.ndarray
    zt: np.ndarray
    masked: np.ndarray


def make_training_batch(z0: np.ndarray, table: ScheduleTable, rng: np.random.Generator) -> DiffusionBatch:
    z0 = np.atleast_2d(np.asarray(z0))
    t = rng.integers(1, table.num_steps + 1, size=z0.shape[0])
    zt = forward_sample(z0, t, table, rng)
    return DiffusionBatch(z0=z0, t=t, zt=zt, masked=zt == table.num_categories)


def posterior_step(z0_cat, t: int, table: ScheduleTable):
    """True posterior over z_{t-1} in {mask, z0} for a position masked at t.

    Returns (p_mask, p_reveal). Derivation: docs/posterior.md.
    """
    _check_t(t, table.num_steps, low=1)
    c = np.asarray(z0_cat)
    m_t = table.m[t, c]
    if np.any(m_t == 0):
        raise DivisionByZeroMask("masked position with m_t(z0) = 0")
    m_prev = table.m[t - 1, c]
    p_mask = m_prev / m_t
    return p_mask, 1.0 - p_mask


def _support_renorm(phat: np.ndarray, m_t_rows: np.ndarray, needed=None) -> np.ndarray:
    """Restrict phat to categories with m_t > 0 and renormalize.

    Rows with zero support mass are left all-zero; they only raise when
    `needed` marks them as actually consumed (e.g. masked positions).
    """
    ph = np.where(m_t_rows > 0, phat, 0.0)
    z = ph.sum(axis=-1, keepdims=True)
    bad = z <= 0
    if np.any(bad if needed is None else bad[..., 0] & needed):
        raise ZeroProbability("model assigns zero mass to every maskable category")
    return ph / np.where(bad, 1.0, z)


def reverse_step_dist(phat, zt_pos: int, t: int, table: ScheduleTable) -> np.ndarray:
    """Distribution over z_{t-1} in {categories} + {mask} for one position.

    Mixture of the true two-point posteriors weighted by the model's clean-token
    estimate, restricted to categories maskable at t. Index V is the mask.
    """
    _check_t(t, table.num_steps, low=1)
    V = table.num_categories
    out = np.zeros(V + 1)
    if zt_pos != V:
        out[zt_pos] = 1.0
        return out
    m_t = table.m[t]
    if not np.any(m_t > 0):
        raise EmptySupport(f"no category is maskable at t={t}")
    ph = _support_renorm(np.asarray(phat, dtype=np.float64), m_t)
    reveal = np.zeros(V)
    sup = m_t > 0
    reveal[sup] = ph[sup] * (m_t[sup] - table.m[t - 1][sup]) / m_t[sup]
    out[:V] = reveal
    out[V] = 1.0 - reveal.sum()  # = sum phat' * m_{t-1}/m_t, exact complement
    return out


def _reveal_coeffs(table: ScheduleTable, t) -> tuple[np.ndarray, np.ndarray]:
    """Per-category (stay-masked, reveal) coefficients m_{t-1}/m_t, (m_t-m_{t-1})/m_t."""
    t = np.asarray(t)
    m_t = table.m[t]
    m_prev = table.m[t - 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        stay = np.where(m_t > 0, m_prev / np.where(m_t > 0, m_t, 1.0), 0.0)
    return stay, 1.0 - stay


def _xlogy(x, y) -> np.ndarray:
    """x * log(y) with the 0 * log 0 := 0 convention (y=0 at x>0 gives -inf)."""
    shape = np.broadcast_shapes(np.shape(x), np.shape(y))
    x = np.broadcast_to(np.asarray(x, dtype=np.float64), shape)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), shape)
    out = np.zeros(shape)
    pos = x > 0
    with np.errstate(divide="ignore"):
        logy = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), -np.inf)
    out[pos] = x[pos] * logy[pos]
    return out


def kl_step(z0, zt, t, phat, table: ScheduleTable) -> np.ndarray:
    """Per-position KL(q(z_{t-1}|z_t,z0) || p(z_{t-1}|z_t)) in nats; 0 when unmasked."""
    z0 = np.atleast_2d(np.asarray(z0))
    zt = np.atleast_2d(np.asarray(zt))
    phat = np.asarray(phat, dtype=np.float64)
    if phat.ndim == 2:
        phat = phat[None]
    t = _check_t(t, table.num_steps, low=1)
    t = np.broadcast_to(np.atleast_1d(t), (z0.shape[0],))
    V = table.num_categories
    masked = zt == V

    m_t = table.m[t]  # (B, V)
    m_prev = table.m[t - 1]
    m_t_true = np.take_along_axis(m_t, z0, axis=1)
    if np.any(masked & (m_t_true == 0)):
        raise DivisionByZeroMask("masked position with m_t(z0) = 0")

    ph = _support_renorm(phat, m_t[:, None, :], needed=masked)
    with np.errstate(divide="ignore", invalid="ignore"):
        stay = np.where(m_t > 0, m_prev / np.where(m_t > 0, m_t, 1.0), 0.0)
    p_mask = (ph * stay[:, None, :]).sum(axis=-1)
    reveal_coef = np.take_along_axis((1.0 - stay)[:, None, :] * ph, z0[..., None], axis=2)[..., 0]

    q_mask = np.where(m_t_true > 0, np.take_along_axis(m_prev, z0, axis=1) / np.where(m_t_true > 0, m_t_true, 1.0), 0.0)
    q_rev = 1.0 - q_mask

    kl = (
        _xlogy(q_mask, q_mask)
        - _xlogy(q_mask, p_mask)
        + _xlogy(q_rev, q_rev)
        - _xlogy(q_rev, reveal_coef)
    )
    return np.where(masked, kl, 0.0)


def recon_term(z0, z1, phat, table: ScheduleTable) -> np.ndarray:
    """Per-sequence -log p(z0 | z1) summed over masked-at-1 positions (nats).

    Returns +inf where the model assigns zero mass to the true category.
    """
    z0 = np.atleast_2d(np.asarray(z0))
    z1 = np.atleast_2d(np.asarray(z1))
    phat = np.asarray(phat, dtype=np.float64)
    if phat.ndim == 2:
        phat = phat[None]
    V = table.num_categories
    masked = z1 == V
    ph = _support_renorm(phat, table.m[1][None, None, :], needed=masked)
    p_true = np.take_along_axis(ph, z0[..., None], axis=2)[..., 0]
    with np.errstate(divide="ignore"):
        nll = np.where(p_true > 0, -np.log(np.where(p_true > 0, p_true, 1.0)), np.inf)
    return np.where(masked, nll, 0.0).sum(axis=1)


def prior_kl(zT, table: ScheduleTable) -> float:
    """KL(q(z_T|z0) || p(z_T)); zero by construction since row T is all ones."""
    zT = np.asarray(zT)
    if np.any(zT != table.num_categories):
        raise NotFullyMasked("z_T contains unmasked tokens")
    return 0.0


@dataclass
class ElboBreakdown:
    """Negative ELBO decomposition, all in nats except bits_per_token.

    ``recon`` is the expected log-likelihood E[log p(z0 | z1)] (<= 0), so
    total_nelbo = prior_kl + step_kl - recon.
    """

    prior_kl: float
    step_kl: float
    recon: float
    step_kl_per_t: np.ndarray
    token_count: int

    @property
    def total_nelbo(self) -> float:
        return self.prior_kl + self.step_kl - self.recon

    @property
    def bits_per_token(self) -> float:
        return self.total_nelbo / (LN2 * self.token_count)


def _feasible_patterns(pm: np.ndarray, limit: int):
    """All mask patterns with positive forward probability at a given t, or None."""
    branch = np.nonzero((pm > 0) & (pm < 1))[0]
    if 2 ** branch.size > limit:
        return None
    base = pm >= 1.0
    patterns, weights = [], []
    for bits in itertools.product((False, True), repeat=branch.size):
        pat = base.copy()
        w = 1.0
        for pos, on in zip(branch, bits):
            pat[pos] = on
            w *= pm[pos] if on else 1.0 - pm[pos]
        patterns.append(pat)
        weights.append(w)
    return np.array(patterns, dtype=bool), np.array(weights)


def _seq_nelbo_exact(z0: np.ndarray, model, table: ScheduleTable, limit: int) -> ElboBreakdown | None:
    T, V = table.num_steps, table.num_categories
    step = np.zeros(T + 1)
    recon = 0.0
    for t in range(1, T + 1):
        pm = table.m[t][z0]
        pats = _feasible_patterns(pm, limit)
        if pats is None:
            return None
        patterns, weights = pats
        zt = np.where(patterns, V, z0[None, :])
        phat = model.predict(zt, np.full(zt.shape[0], t))
        if t == 1:
            recon -= float(weights @ recon_term(np.broadcast_to(z0, zt.shape), zt, phat, table))
        else:
            kl = kl_step(np.broadcast_to(z0, zt.shape), zt, t, phat, table)
            step[t] = float(weights @ kl.sum(axis=1))
    return ElboBreakdown(
        prior_kl=0.0, step_kl=float(step.sum()), recon=recon, step_kl_per_t=step, token_count=z0.size
    )


def _batch_nelbo_mc(z0: np.ndarray, model, table: ScheduleTable, mc_samples: int, seed: int) -> ElboBreakdown:
    B, L = z0.shape
    T, V = table.num_steps, table.num_categories
    step = np.zeros(T + 1)
    recon = 0.0
    rng = np.random.default_rng(seed)
    for t in range(1, T + 1):
        reps = np.repeat(z0, mc_samples, axis=0)
        zt = forward_sample(reps, np.full(reps.shape[0], t), table, rng)
        phat = model.predict(zt, np.full(reps.shape[0], t))
        if t == 1:
            recon -= float(recon_term(reps, zt, phat, table).sum()) / mc_samples
        else:
            step[t] = float(kl_step(reps, zt, t, phat, table).sum()) / mc_samples
    return ElboBreakdown(
        prior_kl=0.0, step_kl=float(step.sum()), recon=recon, step_kl_per_t=step, token_count=z0.size
    )


def nelbo_full(
    z0,
    model,
    table: ScheduleTable,
    mode: str = "auto",
    mc_samples: int = 1,
    seed: int = 0,
    pattern_limit: int = 4096,
) -> ElboBreakdown:
    """Full negative ELBO: exact over feasible mask patterns when affordable,
    else fixed-seed Monte Carlo over z_t per step."""
    z0 = np.atleast_2d(np.asarray(z0))
    if mode not in ("auto", "exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("auto", "exact"):
        parts = []
        for row in z0:
            part = _seq_nelbo_exact(row, model, table, pattern_limit)
            if part is None:
                if mode == "exact":
                    raise TooLarge("too many feasible mask patterns for exact mode")
                parts = None
                break
            parts.append(part)
        if parts is not None:
            return ElboBreakdown(
                prior_kl=sum(p.prior_kl for p in parts),
                step_kl=sum(p.step_kl for p in parts),
                recon=sum(p.recon for p in parts),
                step_kl_per_t=np.sum([p.step_kl_per_t for p in parts], axis=0),
                token_count=int(z0.size),
            )
    return _batch_nelbo_mc(z0, model, table, mc_samples, seed)


def nelbo_stochastic(z0, model, table: ScheduleTable, rng: np.random.Generator) -> float:
    """Single-draw uniform-t estimator of the NELBO in bits per token.

    With t ~ Uniform{1..T}, weighting the drawn term by T makes the estimator
    unbiased for prior + sum_{t=2..T} KL_t + recon (the prior term is zero).
    """
    batch = make_training_batch(z0, table, rng)
    nats = stochastic_term_nats(batch, model.predict(batch.zt, batch.t), table)
    return float(nats.sum()) / (LN2 * batch.z0.size)


def stochastic_term_nats(batch: DiffusionBatch, phat: np.ndarray, table: ScheduleTable) -> np.ndarray:
    """Per-sequence T-weighted estimator term (nats) for a prepared batch."""
    T = table.num_steps
    is_recon = batch.t == 1
    out = np.empty(batch.z0.shape[0])
    if np.any(is_recon):
        rows = np.nonzero(is_recon)[0]
        out[rows] = T * recon_term(batch.z0[rows], batch.zt[rows], phat[rows], table)
    rows = np.nonzero(~is_recon)[0]
    if rows.size:
        kl = kl_step(batch.z0[rows], batch.zt[rows], batch.t[rows], phat[rows], table)
        out[rows] = T * kl.sum(axis=1)
    return out


def generate(
    model,
    table: ScheduleTable,
    seq_len: int,
    rng: np.random.Generator,
    batch: int = 1,
    record_every: int = 0,
    record_at=None,
):
    """Ancestral sampling from all-mask; returns (ids, snapshots).

    snapshots is a list of (t, ids-copy) pairs for the requested timesteps
    (record_at wins over record_every; t=T and t=0 are always included when
    any recording is requested).
    """
    T, V = table.num_steps, table.num_categories
    if record_at is not None:
        record = {int(t) for t in record_at} | {0, T}
    elif record_every > 0:
        record = {t for t in range(0, T + 1, record_every)} | {0, T}
    else:
        record = set()

    zt = np.full((batch, seq_len), V, dtype=np.int64)
    snapshots = [(T, zt.copy())] if T in record else []
    for t in range(T, 0, -1):
        masked = zt == V
        if np.any(masked):
            phat = model.predict(zt, np.full(batch, t))
            _, rev = _reveal_coeffs(table, np.full(batch, t))
            ph = _support_renorm(phat, table.m[t][None, None, :], needed=masked)
            reveal = ph * rev[:, None, :]
            dist = np.concatenate([reveal, 1.0 - reveal.sum(-1, keepdims=True)], axis=-1)
            cum = np.cumsum(dist, axis=-1)
            u = rng.random((batch, seq_len))
            draw = np.minimum((u[..., None] > cum).sum(axis=-1), V)
            zt = np.where(masked, draw, zt)
        if (t - 1) in record:
            snapshots.append((t - 1, zt.copy()))
    if np.any(zt == V):
        raise MaskResidue("mask tokens remain at t=0")
    return zt, snapshots


def enumerate_elbo_oracle(z0, model, table: ScheduleTable) -> float:
    """Exact NELBO by literal enumeration of all latent trajectories.

    Each per-position absorbing trajectory is characterized by its first-mask
    time tau in [1, T]; the bound is E_q[log q(traj) - log p(z_T)
    - sum_t log p(z_{t-1} | z_t)], summed over all positive-weight tau grids.
    """
    z0 = np.asarray(z0).ravel()
    T, V = table.num_steps, table.num_categories
    if z0.size > 3 or V > 5 or T > 4:
        raise TooLarge("oracle enumeration limited to len<=3, V<=5, T<=4")
    L = z0.size
    total = 0.0
    for tau in itertools.product(range(1, T + 1), repeat=L):
        w = 1.0
        for i, ti in enumerate(tau):
            w *= table.m[ti, z0[i]] - table.m[ti - 1, z0[i]]
        if w <= 0:
            continue
        logq = math.log(w)
        logp = 0.0  # log p(z_T) = 0: all-mask point mass, reached w.p. 1
        for t in range(T, 0, -1):
            zt = np.where(np.asarray(tau) <= t, V, z0)
            zprev = np.where(np.asarray(tau) <= t - 1, V, z0)
            phat = model.predict(zt[None, :], np.array([t]))[0]
            for i in range(L):
                d = reverse_step_dist(phat[i], int(zt[i]), t, table)
                logp += math.log(d[int(zprev[i])])
        total += w * (logq - logp)
    return total


def marginal_log_likelihood(z0, model, table: ScheduleTable) -> float:
    """Exact log p(z0) of the model's generative chain, by enumerating reveal times."""
    z0 = np.asarray(z0).ravel()
    T, V = table.num_steps, table.num_categories
    if z0.size > 3 or V > 5 or T > 4:
        raise TooLarge("marginalization limited to len<=3, V<=5, T<=4")
    L = z0.size
    terms = []
    for sigma in itertools.product(range(1, T + 1), repeat=L):
        sig = np.asarray(sigma)
        logp = 0.0
        for t in range(T, 0, -1):
            zt = np.where(sig <= t, V, z0)  # masked while t >= reveal step sigma_i
            phat = model.predict(zt[None, :], np.array([t]))[0]
            for i in range(L):
                if sig[i] > t:
                    continue  # revealed earlier in reverse time, stays put w.p. 1
                d = reverse_step_dist(phat[i], int(zt[i]), t, table)
                v = float(d[int(z0[i])] if sig[i] == t else d[V])
                logp = -math.inf if v <= 0.0 else logp + math.log(v)
                if not math.isfinite(logp):
                    break
            if not math.isfinite(logp):
                break
        if math.isfinite(logp):
            terms.append(logp)
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))
