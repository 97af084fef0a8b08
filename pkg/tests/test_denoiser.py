import numpy as np
import pytest

from ordiff import corpus, denoiser, diffusion, ordering, schedule
from ordiff.errors import (
    BadConfig,
    CorruptFile,
    LengthExceeded,
    NonToyInput,
    ShapeMismatch,
    VersionMismatch,
)


def small_config(**kw):
    base = dict(layers=2, model_dim=32, heads=4, ff_dim=64, vocab=6,
                max_len=16, num_steps=8, seed=0)
    base.update(kw)
    return denoiser.DenoiserConfig(**base)


def toy_table(T=8):
    order = ordering.order_explicit([[5], [2], [3], [4], [0], [1]], 6)
    return schedule.build_schedule(order, corpus.toy_marginal_probs(), T)


class TestInit:
    def test_deterministic(self):
        a = denoiser.init(small_config())
        b = denoiser.init(small_config())
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_seed_changes_weights(self):
        a = denoiser.init(small_config(seed=0))
        b = denoiser.init(small_config(seed=1))
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_bad_configs_rejected(self):
        with pytest.raises(BadConfig):
            small_config(layers=0)
        with pytest.raises(BadConfig):
            small_config(model_dim=30)  # not divisible by heads
        with pytest.raises(BadConfig):
            small_config(time_embedding="fourier")

    def test_reference_parameter_count(self):
        cfg = denoiser.DenoiserConfig(layers=4, model_dim=256, heads=8, ff_dim=1024,
                                      vocab=27, max_len=200, num_steps=1000)
        n = denoiser.parameter_count(denoiser.init(cfg))
        assert 2.5e6 < n < 3.6e6  # about 3 million

    def test_output_bias_zero(self):
        p = denoiser.init(small_config())
        assert np.all(p["out_b"] == 0.0)


class TestPredict:
    def test_rows_sum_to_one(self):
        cfg = small_config()
        p = denoiser.init(cfg)
        zt = np.array([[0, 6, 2, 6, 1]])
        probs = denoiser.predict(p, cfg, zt, 3)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_no_cross_sequence_leakage(self):
        cfg = small_config()
        p = denoiser.init(cfg)
        rng = np.random.default_rng(0)
        zt = rng.integers(0, 7, size=(4, 9))
        t = np.array([1, 3, 5, 7])
        out = denoiser.predict(p, cfg, zt, t)
        perm = np.array([2, 0, 3, 1])
        out_p = denoiser.predict(p, cfg, zt[perm], t[perm])
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_deterministic(self):
        cfg = small_config()
        p = denoiser.init(cfg)
        zt = np.array([[6, 6, 6]])
        a = denoiser.predict(p, cfg, zt, 2)
        b = denoiser.predict(p, cfg, zt, 2)
        np.testing.assert_array_equal(a, b)

    def test_length_guard(self):
        cfg = small_config(max_len=4)
        p = denoiser.init(cfg)
        with pytest.raises(LengthExceeded):
            denoiser.predict(p, cfg, np.zeros((1, 5), dtype=np.int64), 1)

    def test_learned_time_embedding(self):
        cfg = small_config(time_embedding="learned")
        p = denoiser.init(cfg)
        assert "time_emb" in p
        out = denoiser.predict(p, cfg, np.array([[6, 0, 1]]), 4)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


class TestLossGrad:
    def test_gradient_check(self):
        cfg = small_config()
        params = denoiser.init(cfg)
        table = toy_table(cfg.num_steps)
        rng = np.random.default_rng(1)
        z0 = corpus.generate_toy_corpus(4, 9, rng)
        batch = diffusion.make_training_batch(z0, table, rng)
        loss, grads = denoiser.loss_grad(params, cfg, batch, table)
        assert np.isfinite(loss)

        check_rng = np.random.default_rng(2)
        names = list(params)
        for _ in range(12):
            k = names[int(check_rng.integers(len(names)))]
            idx = tuple(check_rng.integers(s) for s in params[k].shape)
            h = 1e-4
            hi = {kk: vv.copy() for kk, vv in params.items()}
            hi[k][idx] += h
            lo = {kk: vv.copy() for kk, vv in params.items()}
            lo[k][idx] -= h
            fd = (denoiser.loss_grad(hi, cfg, batch, table)[0]
                  - denoiser.loss_grad(lo, cfg, batch, table)[0]) / (2 * h)
            an = grads[k][idx]
            denomin = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denomin < 1e-4, (k, idx, fd, an)

    def test_duplicated_batch_same_loss(self):
        cfg = small_config()
        params = denoiser.init(cfg)
        table = toy_table(cfg.num_steps)
        rng = np.random.default_rng(3)
        z0 = corpus.generate_toy_corpus(3, 9, rng)
        batch = diffusion.make_training_batch(z0, table, rng)
        dup = diffusion.DiffusionBatch(
            z0=np.concatenate([batch.z0, batch.z0]),
            t=np.concatenate([batch.t, batch.t]),
            zt=np.concatenate([batch.zt, batch.zt]),
            masked=np.concatenate([batch.masked, batch.masked]),
        )
        l1, g1 = denoiser.loss_grad(params, cfg, batch, table)
        l2, g2 = denoiser.loss_grad(params, cfg, dup, table)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)

    def test_nothing_masked_zero_loss(self):
        cfg = small_config()
        params = denoiser.init(cfg)
        table = toy_table(cfg.num_steps)
        z0 = corpus.generate_toy_corpus(2, 9, np.random.default_rng(4))
        batch = diffusion.DiffusionBatch(
            z0=z0, t=np.ones(2, dtype=np.int64), zt=z0.copy(),
            masked=np.zeros_like(z0, dtype=bool),
        )
        loss, grads = denoiser.loss_grad(params, cfg, batch, table)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())


class TestOptStep:
    def test_zero_grads_no_change(self):
        cfg = small_config()
        params = denoiser.init(cfg)
        before = {k: v.copy() for k, v in params.items()}
        state = denoiser.init_opt_state(params)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        denoiser.opt_step(params, grads, state)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_first_step_magnitude(self):
        # constant gradient, step 1: bias-corrected update is ~lr per coordinate
        params = {"w": np.zeros(4)}
        state = denoiser.init_opt_state(params, lr=0.01)
        denoiser.opt_step(params, {"w": np.full(4, 0.37)}, state)
        np.testing.assert_allclose(-params["w"], 0.01, rtol=1e-4)

    def test_quadratic_bowl_descends(self):
        params = {"w": np.array([5.0, -3.0, 2.0])}
        state = denoiser.init_opt_state(params, lr=0.05)
        losses = []
        for _ in range(100):
            losses.append(float((params["w"] ** 2).sum()))
            denoiser.opt_step(params, {"w": 2 * params["w"]}, state)
        assert losses[-1] < losses[0] * 0.2
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = denoiser.init_opt_state(params)
        with pytest.raises(ShapeMismatch):
            denoiser.opt_step(params, {"w": np.zeros(4)}, state)
        with pytest.raises(ShapeMismatch):
            denoiser.opt_step(params, {"v": np.zeros(3)}, state)


class TestToyOracle:
    def test_revealed_neighbors_pin_fill(self):
        table = toy_table()
        oracle = denoiser.ToyOracleDenoiser(table)
        zt = np.array([[0, 6, 1]])  # a ? b -> fill must be c
        out = oracle.predict(zt, table.num_steps)
        np.testing.assert_allclose(out[0, 1], [0, 0, 1, 0, 0, 0], atol=1e-12)

    def test_fully_masked_anchor_uniform(self):
        table = toy_table()
        oracle = denoiser.ToyOracleDenoiser(table)
        zt = np.full((1, 5), 6)
        out = oracle.predict(zt, table.num_steps)  # m_T = 1 for every category
        np.testing.assert_allclose(out[0, 0], [0.5, 0.5, 0, 0, 0, 0], atol=1e-12)

    def test_fully_masked_fill_marginal(self):
        table = toy_table()
        oracle = denoiser.ToyOracleDenoiser(table)
        zt = np.full((1, 5), 6)
        out = oracle.predict(zt, table.num_steps)
        np.testing.assert_allclose(out[0, 1], [0, 0, 0.5, 0.25, 0.25, 0], atol=1e-12)

    def test_schedule_weighting(self):
        # during the later anchor phase only one anchor category can be masked
        table = toy_table(16)
        oracle = denoiser.ToyOracleDenoiser(table)
        t = next(t for t in range(1, 17) if table.m[t, 0] > 0 and table.m[t, 1] == 0)
        out = oracle.predict(np.full((1, 5), 6), t)
        np.testing.assert_allclose(out[0, 0], [1, 0, 0, 0, 0, 0], atol=1e-12)

    def test_non_toy_rejected(self):
        table = toy_table()
        oracle = denoiser.ToyOracleDenoiser(table)
        with pytest.raises(NonToyInput):
            oracle.predict(np.array([[2, 2, 2]]), 1)  # fill value on anchor slot
        with pytest.raises(NonToyInput):
            oracle.predict(np.array([[0, 0, 1]]), 1)  # anchor value on fill slot
        with pytest.raises(NonToyInput):
            oracle.predict(np.array([[0, 2, 1, 2]]), 1)  # even length

    def test_zero_kl_under_aligned_schedule(self):
        probs = corpus.toy_marginal_probs()
        order = ordering.order_explicit([[5], [2], [3], [4], [0], [1]], 6)
        bounds = schedule.boundary_ratios(order, probs)
        table = schedule.build_schedule(order, probs, 16,
                                        schedule.piecewise_warp([(0.5, bounds[4])]))
        oracle = denoiser.ToyOracleDenoiser(table)
        rng = np.random.default_rng(0)
        z0 = corpus.generate_toy_corpus(256, 9, rng)
        br = diffusion.nelbo_full(z0, oracle, table, mode="mc", mc_samples=8, seed=1)
        # exact reverse: NELBO equals the data entropy, 5 anchor bits / 9 tokens
        assert br.bits_per_token == pytest.approx(5 / 9, abs=0.02)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = small_config()
        params = denoiser.init(cfg)
        state = denoiser.init_opt_state(params, lr=1e-3)
        table = toy_table(cfg.num_steps)
        rng = np.random.default_rng(5)
        z0 = corpus.generate_toy_corpus(2, 9, rng)
        for _ in range(3):
            batch = diffusion.make_training_batch(z0, table, rng)
            _, grads = denoiser.loss_grad(params, cfg, batch, table)
            denoiser.opt_step(params, grads, state)

        path = tmp_path / "model.ckpt"
        denoiser.save_checkpoint(path, params, state, cfg)
        p2, s2, c2 = denoiser.load_checkpoint(path)
        assert c2 == cfg
        for k in params:
            assert params[k].tobytes() == p2[k].tobytes()
            assert state.m[k].tobytes() == s2.m[k].tobytes()
        zt = np.array([[6, 0, 6, 2, 6]])
        np.testing.assert_array_equal(
            denoiser.predict(params, cfg, zt, 3), denoiser.predict(p2, c2, zt, 3)
        )

    def test_truncated_file_rejected(self, tmp_path):
        cfg = small_config()
        params = denoiser.init(cfg)
        path = tmp_path / "model.ckpt"
        denoiser.save_checkpoint(path, params, None, cfg)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptFile):
            denoiser.load_checkpoint(path)

    def test_flipped_byte_rejected(self, tmp_path):
        cfg = small_config()
        params = denoiser.init(cfg)
        path = tmp_path / "model.ckpt"
        denoiser.save_checkpoint(path, params, None, cfg)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptFile):
            denoiser.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        cfg = small_config()
        params = denoiser.init(cfg)
        path = tmp_path / "model.ckpt"
        denoiser.save_checkpoint(path, params, None, cfg)
        blob = bytearray(path.read_bytes())
        import struct
        import zlib

        blob[4:8] = struct.pack("<I", 99)
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            denoiser.load_checkpoint(path)

    def test_config_mismatch_on_load_into_trainer(self, tmp_path):
        from ordiff import trainer

        cfg = small_config()
        params = denoiser.init(cfg)
        path = tmp_path / "model.ckpt"
        denoiser.save_checkpoint(path, params, None, cfg)
        _, _, loaded = denoiser.load_checkpoint(path)
        with pytest.raises(VersionMismatch):
            trainer.ensure_config_matches(small_config(layers=3), loaded)
