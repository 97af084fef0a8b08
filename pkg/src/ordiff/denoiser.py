"""The parametric clean-token predictor p(z0 | z_t) and its training machinery.

A small bidirectional transformer (pre-norm blocks, GELU feed-forward,
learned absolute positions, additive timestep embedding) implemented on the
package's own reverse-mode engine. Parameters live in a flat name -> array
dict; values are kept f32-representable (rounded through float32 after init
and after every optimizer step) so the f32 checkpoint format round-trips
bit-exactly, while all forward/backward math runs in float64.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .diffusion import DiffusionBatch
from .errors import (
    BadConfig,
    BadTimestep,
    CorruptFile,
    LengthExceeded,
    NonFiniteLoss,
    NonToyInput,
    ShapeMismatch,
    VersionMismatch,
)
from .schedule import ScheduleTable

_CKPT_MAGIC = b"ODCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int
    model_dim: int
    heads: int
    ff_dim: int
    vocab: int
    max_len: int
    num_steps: int
    time_embedding: str = "sinusoidal"  # or "learned"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.layers, self.model_dim, self.heads, self.ff_dim,
                  self.vocab, self.max_len, self.num_steps)
        if any(int(c) < 1 for c in counts):
            raise BadConfig(f"all size fields must be >= 1: {self}")
        if self.model_dim % self.heads != 0:
            raise BadConfig("model_dim must be divisible by heads")
        if self.time_embedding not in ("sinusoidal", "learned"):
            raise BadConfig(f"unknown time embedding {self.time_embedding!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must lie in [0, 1)")


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def init(config: DenoiserConfig) -> dict:
    """Fresh parameters, deterministic per config.seed, scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(config.seed)
    D, F, V = config.model_dim, config.ff_dim, config.vocab

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))

    def emb(rows, cols):
        return rng.normal(0.0, 1.0 / math.sqrt(cols), size=(rows, cols))

    p = {}
    p["tok_emb"] = emb(V + 1, D)
    p["pos_emb"] = emb(config.max_len, D)
    if config.time_embedding == "sinusoidal":
        p["time_w"] = mat(D, D)
        p["time_b"] = np.zeros(D)
    else:
        p["time_emb"] = emb(config.num_steps + 1, D)
    for i in range(config.layers):
        p[f"l{i}.ln1.g"] = np.ones(D)
        p[f"l{i}.ln1.b"] = np.zeros(D)
        for nm in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{nm}"] = mat(D, D)
            p[f"l{i}.{nm.replace('w', 'b')}"] = np.zeros(D)
        p[f"l{i}.ln2.g"] = np.ones(D)
        p[f"l{i}.ln2.b"] = np.zeros(D)
        p[f"l{i}.w1"] = mat(D, F)
        p[f"l{i}.b1"] = np.zeros(F)
        p[f"l{i}.w2"] = mat(F, D)
        p[f"l{i}.b2"] = np.zeros(D)
    p["lnf.g"] = np.ones(D)
    p["lnf.b"] = np.zeros(D)
    p["out_w"] = mat(D, V)
    p["out_b"] = np.zeros(V)
    return {k: _f32(v) for k, v in p.items()}


def parameter_count(params: dict) -> int:
    return sum(v.size for v in params.values())


def _sinusoidal_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None].astype(np.float64) * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < dim:
        feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
    return feats


def _forward_logits(wrapped: dict, config: DenoiserConfig, zt: np.ndarray, t: np.ndarray,
                    drop_rng: np.random.Generator | None = None) -> ad.Tensor:
    B, L = zt.shape
    D, H = config.model_dim, config.heads
    dh = D // H

    x = ad.embedding(wrapped["tok_emb"], zt) + ad.embedding(wrapped["pos_emb"], np.arange(L))
    if config.time_embedding == "sinusoidal":
        feats = _sinusoidal_features(t, D)
        temb = ad.Tensor(feats) @ wrapped["time_w"] + wrapped["time_b"]
    else:
        temb = ad.embedding(wrapped["time_emb"], t)
    x = x + temb.reshape(B, 1, D)

    def dropout(h):
        if drop_rng is None or config.dropout == 0.0:
            return h
        keep = (drop_rng.random(h.shape) >= config.dropout) / (1.0 - config.dropout)
        return h * keep

    for i in range(config.layers):
        h = ad.layer_norm(x, wrapped[f"l{i}.ln1.g"], wrapped[f"l{i}.ln1.b"])
        q = (h @ wrapped[f"l{i}.wq"] + wrapped[f"l{i}.bq"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        k = (h @ wrapped[f"l{i}.wk"] + wrapped[f"l{i}.bk"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        v = (h @ wrapped[f"l{i}.wv"] + wrapped[f"l{i}.bv"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        att = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        x = x + dropout(ctx @ wrapped[f"l{i}.wo"] + wrapped[f"l{i}.bo"])
        h = ad.layer_norm(x, wrapped[f"l{i}.ln2.g"], wrapped[f"l{i}.ln2.b"])
        ff = ad.gelu(h @ wrapped[f"l{i}.w1"] + wrapped[f"l{i}.b1"]) @ wrapped[f"l{i}.w2"] + wrapped[f"l{i}.b2"]
        x = x + dropout(ff)
    x = ad.layer_norm(x, wrapped["lnf.g"], wrapped["lnf.b"])
    return x @ wrapped["out_w"] + wrapped["out_b"]


def _check_inputs(config: DenoiserConfig, zt: np.ndarray, t: np.ndarray):
    zt = np.atleast_2d(np.asarray(zt, dtype=np.int64))
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (zt.shape[0],))
    if zt.shape[1] > config.max_len:
        raise LengthExceeded(f"sequence length {zt.shape[1]} > max_len {config.max_len}")
    if np.any(t < 1) or np.any(t > config.num_steps):
        raise BadTimestep(f"timestep outside [1, {config.num_steps}]")
    if np.any(zt < 0) or np.any(zt > config.vocab):
        raise ValueError("token ids outside [0, V]")
    return zt, t


def predict(params: dict, config: DenoiserConfig, zt, t) -> np.ndarray:
    """Per-position distribution over the V clean categories, shape (B, L, V)."""
    zt, t = _check_inputs(config, zt, t)
    wrapped = {k: ad.Tensor(v) for k, v in params.items()}
    logits = _forward_logits(wrapped, config, zt, t)
    return ad.softmax(logits).data


class TransformerDenoiser:
    """Model-protocol wrapper: bundles (params, config) behind .predict."""

    def __init__(self, params: dict, config: DenoiserConfig):
        self.params = params
        self.config = config

    def predict(self, zt, t) -> np.ndarray:
        return predict(self.params, self.config, zt, t)


class UniformDenoiser:
    """Frozen predictor assigning 1/V everywhere; evaluation sanity baseline."""

    def __init__(self, vocab: int):
        self.vocab = vocab

    def predict(self, zt, t) -> np.ndarray:
        zt = np.atleast_2d(zt)
        return np.full((*zt.shape, self.vocab), 1.0 / self.vocab)


def loss_grad(params: dict, config: DenoiserConfig, batch: DiffusionBatch,
              table: ScheduleTable, drop_rng: np.random.Generator | None = None):
    """Stochastic NELBO (nats per token) and gradients for a prepared batch.

    Each sequence carries one t ~ Uniform{1..T}; its reconstruction (t=1) or
    KL (t>=2) term is weighted by T, which makes the batch mean an unbiased
    estimate of the full bound (the t=1 KL formula reduces exactly to the
    reconstruction term because m_0 = 0, so one expression covers all t).
    """
    zt, t = _check_inputs(config, batch.zt, batch.t)
    z0 = np.atleast_2d(batch.z0)
    B, L = zt.shape
    V = config.vocab
    T = table.num_steps

    m_t = table.m[t]  # (B, V)
    m_prev = table.m[t - 1]
    sup = m_t > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        stay = np.where(sup, m_prev / np.where(sup, m_t, 1.0), 0.0)
    masked = zt == V

    q_mask = np.take_along_axis(stay, z0, axis=1) * masked  # m_{t-1}(z0)/m_t(z0)
    q_rev = (1.0 - np.take_along_axis(stay, z0, axis=1)) * masked
    ent_q = _np_xlogy(q_mask) + _np_xlogy(q_rev)  # sum q log q, constant in params

    wrapped = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    logits = _forward_logits(wrapped, config, zt, t, drop_rng=drop_rng)
    probs = ad.softmax(logits)
    ph = probs * sup[:, None, :].astype(np.float64)
    ph = ph / ph.sum(axis=-1, keepdims=True)

    p_mask = (ph * stay[:, None, :]).sum(axis=-1)  # (B, L)
    p_rev_true = ad.take_last(ph * (1.0 - stay)[:, None, :], z0)

    act_m = (q_mask > 0).astype(np.float64)
    act_r = (q_rev > 0).astype(np.float64)
    # Inactive entries are forced to log(1)=0 so 0 * log 0 never produces NaN.
    cross = ad.log(p_mask * act_m + (1.0 - act_m)) * q_mask + ad.log(
        p_rev_true * act_r + (1.0 - act_r)
    ) * q_rev
    scale = T / (B * L)
    loss = cross.sum() * (-scale) + float(ent_q.sum()) * scale

    if not np.isfinite(loss.data):
        raise NonFiniteLoss(f"loss is {loss.data}")
    loss.backward()
    grads = {k: (w.grad if w.grad is not None else np.zeros_like(w.data)) for k, w in wrapped.items()}
    return float(loss.data), grads


def _np_xlogy(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(params: dict, lr: float = 3e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def opt_step(params: dict, grads: dict, state: AdamState):
    """Adaptive-moment update with bias correction; mutates and returns both."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient names do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeMismatch(f"{k}: grad {g.shape} vs param {params[k].shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        params[k] = _f32(params[k] - state.lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps))
        state.m[k] = _f32(state.m[k])
        state.v[k] = _f32(state.v[k])
    return params, state


class ToyOracleDenoiser:
    """Exact position-wise Bayes posterior for the toy ruleset under a schedule.

    Being masked at time t has likelihood m_t(c) under category c, so masked
    anchors carry posterior (m_t(a), m_t(b))/Z rather than a flat half-half,
    and masked fills weight the neighbour-marginalized rule distribution
    P(c)=P(left=a), P(d)=P(left=b)P(right=a), P(e)=P(left=b)P(right=b) by
    m_t of each fill category. Revealed positions are one-hot.
    """

    VOCAB = 6

    def __init__(self, table: ScheduleTable):
        if table.num_categories != self.VOCAB:
            raise NonToyInput(f"toy oracle needs V={self.VOCAB} categories")
        self.table = table

    def predict(self, zt, t) -> np.ndarray:
        zt = np.atleast_2d(np.asarray(zt))
        B, L = zt.shape
        M = self.VOCAB
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (B,))
        if L % 2 == 0:
            raise NonToyInput("toy sequences have odd length")
        if np.any(zt < 0) or np.any(zt > M):
            raise NonToyInput("ids outside the toy vocabulary")
        anchors = zt[:, 0::2]
        fills = zt[:, 1::2]
        if np.any((anchors != M) & (anchors > 1)):
            raise NonToyInput("revealed anchor outside {a, b}")
        if np.any((fills != M) & ((fills < 2) | (fills > 4))):
            raise NonToyInput("revealed fill outside {c, d, e}")

        m_t = self.table.m[t]  # (B, V) mask likelihoods
        out = np.zeros((B, L, self.VOCAB))

        amask = anchors == M
        wa, wb = m_t[:, 0:1], m_t[:, 1:2]
        z = wa + wb
        pa = np.where(z > 0, wa / np.where(z > 0, z, 1.0), 0.0)  # (B, 1)
        pb = np.where(z > 0, wb / np.where(z > 0, z, 1.0), 0.0)
        out[:, 0::2, 0] = np.where(amask, pa, anchors == 0)
        out[:, 0::2, 1] = np.where(amask, pb, anchors == 1)

        # P(left anchor = a | its z_t state): schedule-weighted when masked.
        left, right = zt[:, 0:-2:2], zt[:, 2::2]
        p_l_a = np.where(left == M, pa, left == 0)
        p_r_a = np.where(right == M, pa, right == 0)
        fm = fills == M
        base_c = p_l_a * m_t[:, 2:3]
        base_d = (1 - p_l_a) * p_r_a * m_t[:, 3:4]
        base_e = (1 - p_l_a) * (1 - p_r_a) * m_t[:, 4:5]
        zf = base_c + base_d + base_e
        fsafe = zf > 0
        zf = np.where(fsafe, zf, 1.0)
        out[:, 1::2, 2] = np.where(fm, base_c / zf, fills == 2)
        out[:, 1::2, 3] = np.where(fm, base_d / zf, fills == 3)
        out[:, 1::2, 4] = np.where(fm, base_e / zf, fills == 4)
        return out


# ---- checkpointing ----


def save_checkpoint(path, params: dict, state: AdamState | None, config: DenoiserConfig) -> None:
    """Single self-describing binary file; f32 tensors, trailing CRC32."""
    names = list(params)
    header = {
        "config": asdict(config),
        "param_names": names,
        "opt": None
        if state is None
        else {"step": state.step, "lr": state.lr, "beta1": state.beta1,
              "beta2": state.beta2, "eps": state.eps},
    }
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    hdr = json.dumps(header).encode("utf-8")
    blob += struct.pack("<I", len(hdr)) + hdr

    def put_tensor(name, arr):
        nb = name.encode("utf-8")
        blob.extend(struct.pack("<I", len(nb)))
        blob.extend(nb)
        blob.extend(struct.pack("<B", arr.ndim))
        blob.extend(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.extend(arr.astype("<f4").tobytes(order="C"))

    for k in names:
        put_tensor(k, params[k])
    if state is not None:
        for k in names:
            put_tensor("opt.m." + k, state.m[k])
        for k in names:
            put_tensor("opt.v." + k, state.v[k])
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (params, opt_state_or_None, config); verifies CRC and version."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _CKPT_MAGIC:
        raise CorruptFile("not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CorruptFile("checksum mismatch (truncated or corrupted file)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {_CKPT_VERSION}")
    try:
        (hlen,) = struct.unpack("<I", blob[8:12])
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        config = DenoiserConfig(**header["config"])

        off = 12 + hlen
        tensors = {}
        end = len(blob) - 4
        while off < end:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float64)
        if off != end:
            raise CorruptFile("trailing bytes in checkpoint")
        params = {k: tensors[k] for k in header["param_names"]}
    except (struct.error, KeyError, UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptFile(f"unparseable checkpoint: {exc}") from exc
    state = None
    if header["opt"] is not None:
        o = header["opt"]
        state = AdamState(
            m={k: tensors["opt.m." + k] for k in header["param_names"]},
            v={k: tensors["opt.v." + k] for k in header["param_names"]},
            step=o["step"], lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
        )
    return params, state, config
