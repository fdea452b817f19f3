import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssam import model as M
from ssam.errors import GeometryError, ParameterError
from ssam.model import ModelConfig, build_mask_plan, empty_plan, forward_pretrain, init_weights
from ssam.numerics import Rng, grad_check_params


def micro(**kw):
    # 8 patches of 4x16 on an [8, 64] input; cheap enough for finite differences
    base = dict(d_m=16, depth=2, block=dict(d_m=16, E=2, d_state=4, d_conv=3),
                input_frames=8, n_mels=64)
    return ModelConfig(**{**base, **kw})


@pytest.fixture
def toy():
    return ModelConfig.preset("toy")


def patches(cfg, rng, n=None, dtype=np.float64):
    return rng.standard_normal((n or cfg.n_patches, cfg.patch_dim)).astype(dtype)


class TestConfig:
    def test_tiny_geometry(self):
        cfg = ModelConfig.preset("tiny")
        assert (cfg.grid_t, cfg.grid_f, cfg.n_patches, cfg.patch_dim) == (50, 5, 250, 64)

    def test_json_round_trip(self, tmp_path):
        cfg = ModelConfig.preset("toy", mask_ratio=0.25, variant="vim",
                                 block=dict(d_m=32, E=3, d_state=8, d_conv=4))
        (tmp_path / "m.json").write_text(__import__("json").dumps(cfg.to_dict()))
        assert ModelConfig.from_json(tmp_path / "m.json") == cfg

    def test_unknown_field(self):
        with pytest.raises(ParameterError):
            ModelConfig.from_dict({"d_m": 32, "depth": 1, "heads": 4})

    @pytest.mark.parametrize("kw", [dict(d_m=31), dict(depth=0), dict(mask_ratio=1.0), dict(variant="rnn")])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            ModelConfig(**{"d_m": 32, "depth": 1, **kw})

    def test_bad_geometry(self):
        with pytest.raises(GeometryError):
            ModelConfig(d_m=32, depth=1, patch_t=3)

    def test_block_width_mismatch(self):
        with pytest.raises(ParameterError):
            ModelConfig(d_m=32, depth=1, block=dict(d_m=16))


class TestPositions:
    def test_row_zero(self):
        pe = M.sinusoidal_positions(4, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_known_entry(self):
        pe = M.sinusoidal_positions(3, 4)
        assert pe[2, 0] == pytest.approx(np.sin(2.0))
        assert pe[2, 3] == pytest.approx(np.cos(2.0 / 100.0))

    def test_rows_distinct_and_bounded(self):
        pe = M.sinusoidal_positions(10_000, 192)
        assert np.abs(pe).max() <= 1.0
        assert np.unique(pe.round(9), axis=0).shape[0] == 10_000

    def test_odd_width(self):
        with pytest.raises(ParameterError):
            M.sinusoidal_positions(4, 7)


class TestMaskPlan:
    def test_half_of_250(self):
        plan = build_mask_plan(Rng(0), 250, 0.5)
        assert plan.masked_indices.size == 125 == np.unique(plan.masked_indices).size
        assert plan.as_mask().sum() == 125

    @given(st.integers(1, 400), st.floats(0.0, 0.99))
    def test_count_is_floor(self, n, ratio):
        plan = build_mask_plan(Rng(3), n, ratio)
        assert plan.masked_indices.size == int(np.floor(ratio * n))
        assert np.all(np.diff(plan.masked_indices) > 0)

    def test_zero_ratio_is_empty(self):
        assert build_mask_plan(Rng(0), 250, 0.0).masked_indices.size == 0

    def test_same_seed_same_plan(self):
        a, b = build_mask_plan(Rng(7, 2), 250, 0.5), build_mask_plan(Rng(7, 2), 250, 0.5)
        np.testing.assert_array_equal(a.masked_indices, b.masked_indices)
        assert not np.array_equal(a.masked_indices, build_mask_plan(Rng(8, 2), 250, 0.5).masked_indices)

    def test_ratio_out_of_range(self):
        with pytest.raises(ParameterError):
            build_mask_plan(Rng(0), 10, 1.0)


class TestWeights:
    def test_names_and_shapes(self, toy):
        w = init_weights(toy)
        assert w.params["patch_embed.weight"].shape == (64, 32)
        assert w.params["head.fc2.weight"].shape == (32, 64)
        assert w.pos_embed.shape == (toy.n_patches + 1, 32)
        assert all(k.startswith(("patch_embed", "cls_token", "mask_token", "blocks.", "final_norm", "head."))
                   for k in w.params)

    def test_deterministic(self, toy):
        a, b = init_weights(toy, seed=5).arrays(), init_weights(toy, seed=5).arrays()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_dtype_modes_share_values(self, toy):
        a = init_weights(toy, dtype=np.float32).arrays()
        b = init_weights(toy, dtype=np.float64).arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k].astype(np.float32))

    def test_from_arrays_rejects_missing(self, toy):
        arrays = init_weights(toy, as_arrays=True)
        arrays.pop("mask_token")
        with pytest.raises(ParameterError):
            M.ModelWeights.from_arrays(toy, arrays)


class TestForward:
    def test_tiny_shapes(self):
        cfg = ModelConfig.preset("tiny")
        w = init_weights(cfg)
        x = patches(cfg, np.random.default_rng(0), dtype=np.float32)
        y, z, loss = forward_pretrain(cfg, w, x, build_mask_plan(Rng(0), 250, 0.5))
        assert y.shape == (250, 64)
        assert z.shape == (251, 192)
        assert np.isfinite(loss.item())

    def test_batched_matches_single(self, toy, rng):
        w = init_weights(toy, dtype=np.float64)
        x = rng.standard_normal((2, toy.n_patches, toy.patch_dim))
        plans = [build_mask_plan(Rng(0, i), toy.n_patches, 0.5) for i in range(2)]
        yb, _, _ = forward_pretrain(toy, w, x, plans)
        for i in range(2):
            y1, _, _ = forward_pretrain(toy, w, x[i], plans[i])
            np.testing.assert_allclose(yb.data[i], y1.data, atol=1e-12)

    def test_zero_mask_loss_recomputed(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        y, _, loss = forward_pretrain(cfg, w, x, empty_plan(cfg.n_patches))
        assert loss.item() == pytest.approx(float(((y.data - x) ** 2).mean()), rel=1e-12)

    def test_masked_only_loss(self, rng):
        cfg = micro(masked_only_loss=True)
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        plan = build_mask_plan(Rng(1), cfg.n_patches, 0.5)
        y, _, loss = forward_pretrain(cfg, w, x, plan)
        m = plan.as_mask()
        assert loss.item() == pytest.approx(float(((y.data[m] - x[m]) ** 2).mean()), rel=1e-12)

    def test_loss_aggregation_order_free(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        y, _, loss = forward_pretrain(cfg, w, x, build_mask_plan(Rng(2), cfg.n_patches, 0.5))
        perm = rng.permutation(cfg.n_patches)
        assert float(((y.data[perm] - x[perm]) ** 2).mean()) == pytest.approx(loss.item(), rel=1e-13)

    def test_encoder_is_order_sensitive(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        perm = np.roll(np.arange(cfg.n_patches), 1)
        z = M.encode(cfg, w, x).data
        zp = M.encode(cfg, w, x[perm]).data
        assert not np.allclose(z[1:][perm], zp[1:], atol=1e-6)

    def test_causal_prefix(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        full = M.encode(cfg, w, x).data
        prefix = M.encode(cfg, w, x[:5]).data
        np.testing.assert_allclose(prefix, full[:6], atol=1e-12)

    def test_vim_is_not_causal(self, rng):
        cfg = micro(variant="vim", block=dict(d_m=16, E=2, d_state=4, d_conv=3))
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        assert not np.allclose(M.encode(cfg, w, x[:5]).data, M.encode(cfg, w, x).data[:6], atol=1e-6)

    def test_encode_equals_forward_z(self, toy, rng):
        w = init_weights(toy)
        x = patches(toy, rng, dtype=np.float32)
        _, z, _ = forward_pretrain(toy, w, x, empty_plan(toy.n_patches))
        assert M.encode(toy, w, x).data.tobytes() == z.data.tobytes()

    def test_masked_substitution_exact(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        x = patches(cfg, rng)
        plan = build_mask_plan(Rng(4), cfg.n_patches, 0.5)
        seq = M.embed_tokens(cfg, w, x[None], plan.as_mask()[None]).data[0]
        m = plan.as_mask()
        expected = w.params["mask_token"].data.reshape(-1) + w.pos_embed[1:][m]
        np.testing.assert_array_equal(seq[1:][m], expected)
        # the masked patch contents never reach the encoder input
        x2 = x.copy()
        x2[m] = 1e6
        np.testing.assert_array_equal(M.embed_tokens(cfg, w, x2[None], m[None]).data, seq[None])

    def test_cls_row_first(self, rng):
        cfg = micro()
        w = init_weights(cfg, dtype=np.float64)
        seq = M.embed_tokens(cfg, w, patches(cfg, rng)[None], np.zeros((1, 8), bool)).data[0]
        np.testing.assert_array_equal(seq[0], w.params["cls_token"].data.reshape(-1) + w.pos_embed[0])

    def test_chunked_scan_matches(self, toy, rng):
        w = init_weights(toy, dtype=np.float64)
        x = patches(toy, rng)
        a = M.encode(toy, w, x, chunk_len=None).data
        b = M.encode(toy, w, x, chunk_len=16).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    @pytest.mark.parametrize("bad", [(10, 63), (300, 64)])
    def test_bad_input_geometry(self, toy, bad):
        with pytest.raises(GeometryError):
            forward_pretrain(toy, init_weights(toy), np.zeros(bad))

    def test_plan_size_mismatch(self, toy):
        with pytest.raises(GeometryError):
            forward_pretrain(toy, init_weights(toy), np.zeros((toy.n_patches, 64)), empty_plan(10))


class TestPooling:
    def test_mean_skips_cls(self, rng):
        z = rng.standard_normal((5, 3))
        np.testing.assert_allclose(M.pool(z), z[1:].mean(0))
        np.testing.assert_array_equal(M.pool(z, "cls"), z[0])

    def test_unknown(self):
        with pytest.raises(ParameterError):
            M.pool(np.zeros((2, 2)), "max")


@pytest.mark.parametrize("variant", ["mamba", "vim"])
def test_pretrain_gradients(variant, rng):
    cfg = micro(variant=variant)
    w = init_weights(cfg, dtype=np.float64)
    x = patches(cfg, rng)
    plan = build_mask_plan(Rng(9), cfg.n_patches, 0.5)
    errs = grad_check_params(lambda: forward_pretrain(cfg, w, x, plan)[2], w.params, max_coords=6, rng=Rng(2))
    assert set(errs) == set(w.params)
    assert max(errs.values()) < 1e-4


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_loss_nonnegative(seed):
    cfg = micro()
    w = init_weights(cfg, seed=seed % 7, dtype=np.float64)
    x = np.random.default_rng(seed).standard_normal((8, 64))
    assert forward_pretrain(cfg, w, x, build_mask_plan(Rng(seed), 8, 0.5))[2].item() >= 0.0
