import math

import numpy as np
import pytest

from diffbev.decoder import (
    DecoderConfig,
    decoder_backward,
    decoder_forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    time_embedding,
    validate_params,
    zero_params,
)
from diffbev.features import FeatureGrid, GridConfig, build_bev_features, roi_pool_rotated
from diffbev.optim import AdamWState, adamw_step, one_cycle_lr

SMALL = DecoderConfig(pool_size=3, hidden=16, time_dim=8)


def random_batch(rng, n=5, cfg=SMALL):
    roi = rng.standard_normal((n, cfg.pool_size, cfg.pool_size, 4))
    sig = rng.uniform(-1.5, 1.5, (n, 5))
    return roi, sig


class TestFeatureGrid:
    def test_empty_cloud_all_zero(self):
        grid = build_bev_features(np.zeros((0, 3)), GridConfig())
        assert grid.values.shape == (176, 200, 4)
        assert not grid.values.any()

    def test_single_point(self):
        grid = build_bev_features(np.array([[10.1, 2.3, 1.2]]), GridConfig())
        occupied = np.nonzero(grid.values[:, :, 3])
        assert len(occupied[0]) == 1
        ix, iy = occupied[0][0], occupied[1][0]
        assert (ix, iy) == (int(10.1 / 0.4), int((2.3 + 40) / 0.4))
        assert grid.values[ix, iy, 0] == 1.0
        assert grid.values[ix, iy, 1] == 1.2
        assert grid.values[ix, iy, 2] == 1.2

    def test_density_sums_to_in_range_count(self):
        rng = np.random.default_rng(70)
        pts = np.stack(
            [rng.uniform(-10, 80, 5000), rng.uniform(-50, 50, 5000), rng.uniform(0, 2, 5000)],
            axis=1,
        )
        cfg = GridConfig()
        grid = build_bev_features(pts, cfg)
        in_range = (
            (pts[:, 0] >= cfg.x_min)
            & (pts[:, 0] < cfg.x_max)
            & (pts[:, 1] >= cfg.y_min)
            & (pts[:, 1] < cfg.y_max)
        )
        assert grid.values[:, :, 0].sum() == in_range.sum()
        assert np.all(np.isfinite(grid.values))

    def test_empty_cells_exactly_zero(self):
        grid = build_bev_features(np.array([[10.1, 2.3, -1.2]]), GridConfig())
        occ = grid.values[:, :, 3].astype(bool)
        assert not grid.values[~occ].any()


class TestRoiPool:
    def test_constant_grid_exact(self):
        cfg = GridConfig()
        const = np.array([3.0, -1.0, 0.5, 2.0])
        grid = FeatureGrid(values=np.ones((cfg.nx, cfg.ny, 4)) * const, config=cfg)
        pooled = roi_pool_rotated(grid, np.array([[35.0, 0.0, 4.0, 2.0, 0.7]]), 7)
        assert np.abs(pooled[0] - const).max() < 1e-12

    def test_linear_ramp_exact_at_samples(self):
        cfg = GridConfig()
        xs = cfg.x_min + (np.arange(cfg.nx) + 0.5) * cfg.cell
        ys = cfg.y_min + (np.arange(cfg.ny) + 0.5) * cfg.cell
        ramp = 2.0 * xs[:, None] + 0.3 * ys[None, :] - 1.0
        grid = FeatureGrid(values=np.repeat(ramp[:, :, None], 4, axis=2), config=cfg)
        box = (35.0, 0.0, 4.0, 2.0, 0.7)
        pooled = roi_pool_rotated(grid, np.array([box]), 7)
        offs = (np.arange(7) + 0.5) / 7 - 0.5
        c, s = math.cos(box[4]), math.sin(box[4])
        lx = offs[:, None] * box[2]
        ly = offs[None, :] * box[3]
        px = box[0] + c * lx - s * ly
        py = box[1] + s * lx + c * ly
        assert np.abs(pooled[0, :, :, 0] - (2.0 * px + 0.3 * py - 1.0)).max() < 1e-9

    def test_same_rectangle_same_features(self):
        rng = np.random.default_rng(71)
        cfg = GridConfig()
        grid = FeatureGrid(values=rng.standard_normal((cfg.nx, cfg.ny, 4)), config=cfg)
        a = roi_pool_rotated(grid, np.array([[35.0, 0.0, 4.0, 2.0, 0.0]]), 5)
        b = roi_pool_rotated(grid, np.array([[35.0, 0.0, 4.0, 2.0, math.pi]]), 5)
        assert np.array_equal(a, b)  # 0 and pi fold to the same float angle
        a = roi_pool_rotated(grid, np.array([[35.0, 0.0, 4.0, 2.0, 0.3]]), 5)
        b = roi_pool_rotated(grid, np.array([[35.0, 0.0, 4.0, 2.0, 0.3 + math.pi]]), 5)
        assert np.allclose(a, b, atol=1e-9)  # 0.3 + pi rounds; folds agree to 1 ulp

    def test_outside_grid_is_zero(self):
        cfg = GridConfig()
        grid = FeatureGrid(values=np.ones((cfg.nx, cfg.ny, 4)), config=cfg)
        pooled = roi_pool_rotated(grid, np.array([[200.0, 100.0, 4.0, 2.0, 0.0]]), 3)
        assert not pooled.any()


class TestDecoder:
    def test_dead_network_passthrough(self):
        rng = np.random.default_rng(72)
        roi, sig = random_batch(rng)
        out = decoder_forward(zero_params(SMALL), roi, 55, sig, SMALL)
        assert np.allclose(out.probs, 0.5, atol=0)
        assert np.array_equal(out.x0_signal, np.clip(sig, -2, 2))
        assert np.allclose(out.cz, SMALL.prior_cz) and np.allclose(out.dz, SMALL.prior_dz)

    def test_deterministic(self):
        rng = np.random.default_rng(73)
        params = init_params(SMALL, rng, head_scale=0.1)
        roi, sig = random_batch(np.random.default_rng(1))
        a = decoder_forward(params, roi, 17, sig, SMALL)
        b = decoder_forward(params, roi, 17, sig, SMALL)
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.x0_signal, b.x0_signal)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(74)
        params = init_params(SMALL, rng, head_scale=0.1)
        roi, sig = random_batch(np.random.default_rng(2), n=7)
        perm = np.random.default_rng(3).permutation(7)
        a = decoder_forward(params, roi, 400, sig, SMALL)
        b = decoder_forward(params, roi[perm], 400, sig[perm], SMALL)
        # no cross-proposal coupling; BLAS blocking may wobble the last ulp
        assert np.allclose(a.probs[perm], b.probs, atol=1e-12, rtol=0)
        assert np.allclose(a.x0_signal[perm], b.x0_signal, atol=1e-12, rtol=0)

    def test_lipschitz_sanity(self):
        rng = np.random.default_rng(75)
        params = init_params(SMALL, rng, head_scale=0.1)
        roi, sig = random_batch(rng, n=3)
        base = decoder_forward(params, roi, 100, sig, SMALL)
        ratios = []
        for _ in range(30):
            d_sig = rng.standard_normal(sig.shape) * 1e-4
            out = decoder_forward(params, roi, 100, sig + d_sig, SMALL)
            num = np.abs(out.x0_signal - base.x0_signal).max() + np.abs(out.probs - base.probs).max()
            ratios.append(num / np.abs(d_sig).max())
        assert max(ratios) < 1e4  # bounded response to input perturbation

    def test_non_finite_rejected(self):
        rng = np.random.default_rng(76)
        params = init_params(SMALL, rng, head_scale=0.1)
        params["w_cls"] = params["w_cls"] * np.inf
        roi, sig = random_batch(rng)
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
            decoder_forward(params, roi, 10, sig, SMALL)

    def test_time_embedding_bounds_and_determinism(self):
        for t in (0, 1, 500, 1000):
            e = time_embedding(t, 64)
            assert e.shape == (64,)
            assert np.all(e >= -1) and np.all(e <= 1)
            assert np.array_equal(e, time_embedding(t, 64))

    def test_validate_params_shape_errors(self):
        params = zero_params(SMALL)
        params["w_cls"] = np.zeros((3, 3))
        with pytest.raises(ValueError):
            validate_params(params, SMALL)


class TestDecoderGradients:
    def test_params_match_finite_differences(self):
        rng = np.random.default_rng(77)
        h = 1e-5
        worst = 0.0
        for seed in range(3):
            srng = np.random.default_rng(100 + seed)
            params = init_params(SMALL, srng, head_scale=0.3)
            roi, sig = random_batch(srng, n=4)
            t = int(srng.integers(1, 1000))
            d_prob = srng.standard_normal(4)
            d_x0 = srng.standard_normal((4, 5))
            d_cz = srng.standard_normal(4)
            d_dz = srng.standard_normal(4)

            out = decoder_forward(params, roi, t, sig, SMALL)
            grads, _ = decoder_backward(params, out.cache, d_prob, d_x0, d_cz, d_dz, SMALL)

            def scalar_loss(p):
                o = decoder_forward(p, roi, t, sig, SMALL)
                return float(
                    (d_prob * o.probs).sum()
                    + (d_x0 * o.x0_signal).sum()
                    + (d_cz * o.cz).sum()
                    + (d_dz * o.dz).sum()
                )

            for name in params:
                flat = params[name].ravel()
                for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                    hi = {k: v.copy() for k, v in params.items()}
                    hi[name].ravel()[idx] += h
                    lo = {k: v.copy() for k, v in params.items()}
                    lo[name].ravel()[idx] -= h
                    fd = (scalar_loss(hi) - scalar_loss(lo)) / (2 * h)
                    an = grads[name].ravel()[idx]
                    worst = max(worst, abs(fd - an) / max(abs(fd), 1e-6))
        assert worst < 1e-4

    def test_zero_loss_gradient_gives_zero_param_gradients(self):
        rng = np.random.default_rng(78)
        params = init_params(SMALL, rng, head_scale=0.3)
        roi, sig = random_batch(rng)
        out = decoder_forward(params, roi, 10, sig, SMALL)
        grads, igrads = decoder_backward(
            params, out.cache, np.zeros(5), np.zeros((5, 5)), np.zeros(5), np.zeros(5), SMALL
        )
        assert all(not g.any() for g in grads.values())
        assert not igrads["d_signal"].any()

    def test_prior_height_mode_kills_height_grads(self):
        cfg = DecoderConfig(pool_size=3, hidden=16, time_dim=8, height_mode="prior")
        rng = np.random.default_rng(79)
        params = init_params(cfg, rng, head_scale=0.3)
        roi, sig = random_batch(rng, cfg=cfg)
        out = decoder_forward(params, roi, 10, sig, cfg)
        assert np.allclose(out.cz, cfg.prior_cz) and np.allclose(out.dz, cfg.prior_dz)
        grads, _ = decoder_backward(
            params, out.cache, np.zeros(5), np.zeros((5, 5)), np.ones(5), np.ones(5), cfg
        )
        assert not grads["w_ht"].any() and not grads["b_ht"].any()


class TestOptimizer:
    def test_zero_grads_no_decay_unchanged(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamWState()
        out = adamw_step(params, {"w": np.zeros(2)}, state, lr=1e-3, weight_decay=0.0)
        assert np.array_equal(out["w"], params["w"])

    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([5.0])}
        state = AdamWState()
        out = adamw_step(params, {"w": np.array([3.0])}, state, lr=1e-3, weight_decay=0.0)
        # first bias-corrected step of the adaptive update is -lr * g/(|g| + eps)
        assert out["w"][0] == pytest.approx(5.0 - 1e-3, rel=1e-6)

    def test_decoupled_decay(self):
        params = {"w": np.array([10.0])}
        out = adamw_step(params, {"w": np.zeros(1)}, AdamWState(), lr=0.1, weight_decay=0.01)
        assert out["w"][0] == pytest.approx(10.0 - 0.1 * 0.01 * 10.0)

    def test_one_cycle_profile_endpoints(self):
        total = 1000
        assert one_cycle_lr(0, total) == pytest.approx(1e-3 / 25)
        assert one_cycle_lr(300, total) == pytest.approx(1e-3)
        assert one_cycle_lr(1000, total) == pytest.approx(1e-3 / 1000)
        vals = [one_cycle_lr(s, total) for s in range(0, 301)]
        assert vals == sorted(vals)
        vals = [one_cycle_lr(s, total) for s in range(300, 1001)]
        assert vals == sorted(vals, reverse=True)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(80)
        params = init_params(SMALL, rng, head_scale=0.2)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params, "proposals.n = 300\n")
        loaded, cfg_text = load_checkpoint(path)
        assert cfg_text == "proposals.n = 300\n"
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], params[k])
        validate_params(loaded, SMALL)

    def test_shapes_documented(self):
        shapes = param_shapes(SMALL)
        assert shapes["w_roi"] == (3 * 3 * 4, 16)
        assert shapes["w_h1"] == (2 * 16 + 5, 16)
        assert shapes["w_reg"] == (16, 5)
