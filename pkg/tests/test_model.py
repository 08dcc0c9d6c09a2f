import numpy as np
import pytest

import koopa.model as model_mod
from koopa.data import Dataset, chronological_split, synth_generate
from koopa.errors import TrainingError
from koopa.model import (
    ForecastResult,
    KoopaModel,
    ModelConfig,
    _backward_batch,
    _forward_batch,
    denormalize,
    edmd_fit,
    explosion_check,
    fit_mask,
    init_k_inv,
    koopa_forward,
    model_parameters,
    new_model,
    normalize_window,
    operator_stability,
    parameter_names,
    segment,
    time_inv_forward,
    time_var_forward,
    train,
)
from koopa.neural import Mlp, mlp_forward, seeded_rng
from koopa.spectral import SpectrumMask, spectrum_bins


def tiny_mask(t, kept=(0,)):
    return SpectrumMask(t, kept, alpha=1e-9 if len(kept) == 1 else len(kept) / spectrum_bins(t))


def small_model(t=8, h=4, c=1, d=4, s=4, b=2, hidden=(6,), seed=0, **kw):
    cfg = ModelConfig(
        lookback=t, horizon=h, variates=c, blocks=b, segment_len=s, embed_dim=d,
        alpha=0.25, hidden_dims=hidden, seed=seed, activation=kw.pop("activation", "tanh"), **kw
    )
    mask = tiny_mask(t, kept=(0, 1))
    return new_model(cfg, mask)


def zero_sum_basis(dim):
    """Orthonormal basis of the zero-entry-sum subspace of R^dim."""
    eye = np.eye(dim)
    raw = eye[:, : dim - 1] - 1.0 / dim
    q, _ = np.linalg.qr(raw)
    return q  # (dim, dim-1)


def linear_toy(segments, s=4, h=4):
    """One-block model with identity encoders/decoders on the variant branch.

    The invariant branch is zeroed out and the mask keeps only the DC bin, so
    zero-mean windows pass through the variant branch untouched: segment
    embeddings equal the flattened segments themselves.
    """
    t = s * segments
    cfg = ModelConfig(
        lookback=t, horizon=h, variates=1, blocks=1, segment_len=s, embed_dim=s,
        alpha=1e-9, hidden_dims=(), normalize=False, seed=1,
    )
    model = new_model(cfg, tiny_mask(t))
    model.phi_var_enc.weights[0][...] = np.eye(s)
    model.phi_var_enc.biases[0][...] = 0.0
    model.phi_var_dec.weights[0][...] = np.eye(s)
    model.phi_var_dec.biases[0][...] = 0.0
    model.phi_inv_enc.weights[0][...] = 0.0
    model.phi_inv_dec.weights[0][...] = 0.0
    model.phi_inv_dec.biases[0][...] = 0.0
    return model


class TestNormalize:
    def test_constant_variate(self):
        x = np.full((6, 2), 3.5)
        x_norm, mean, std = normalize_window(x)
        assert np.array_equal(x_norm, np.zeros_like(x))
        assert np.all(mean == 3.5)
        assert np.all(std == model_mod.NORM_STD_FLOOR)

    def test_standardizes_gaussian_column(self):
        x = seeded_rng(40).standard_normal((512, 1)) * 2.0 + 5.0
        x_norm, _, _ = normalize_window(x)
        assert abs(x_norm.mean()) < 1e-12
        assert abs(x_norm.std() - 1.0) < 1e-3

    def test_roundtrip(self):
        x = seeded_rng(41).standard_normal((16, 3))
        x_norm, mean, std = normalize_window(x)
        assert np.abs(denormalize(x_norm, mean, std) - x).max() <= 1e-9


class TestSegment:
    def test_even_split(self):
        x = np.arange(8.0).reshape(4, 2)
        segs = segment(x, 2)
        assert segs.shape == (2, 2, 2)
        assert np.array_equal(segs[0], x[:2])
        assert np.array_equal(segs[1], x[2:])

    def test_left_pad_repeats_first_row(self):
        x = np.arange(5.0)[:, None]
        segs = segment(x, 2)
        assert segs.shape == (3, 2, 1)
        assert np.array_equal(segs[0].ravel(), [0.0, 0.0])
        assert np.array_equal(segs[1].ravel(), [1.0, 2.0])
        assert np.array_equal(segs[2].ravel(), [3.0, 4.0])

    def test_single_segment_when_s_equals_t(self):
        x = np.arange(6.0).reshape(3, 2)
        segs = segment(x, 3)
        assert segs.shape == (1, 3, 2)
        assert np.array_equal(segs[0], x)

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            segment(np.zeros((4, 1)), 0)


class TestEdmdFit:
    def test_recovers_linear_map(self):
        rng = seeded_rng(42)
        for d in (2, 4, 8, 16):
            a = rng.standard_normal((d, d))
            a *= 0.9 / max(np.abs(np.linalg.eigvals(a)))
            z = np.empty((d, 2 * d + 1))
            z[:, 0] = rng.standard_normal(d)
            for j in range(2 * d):
                z[:, j + 1] = a @ z[:, j]
            assert np.linalg.norm(edmd_fit(z) - a) < 1e-6

    def test_rank_one_fixed_point(self):
        z0 = np.array([1.0, -2.0, 0.5])
        z = np.tile(z0[:, None], (1, 4))
        k = edmd_fit(z)
        assert np.allclose(k @ z0, z0, atol=1e-12)

    def test_scalar_geometric_sequence(self):
        assert np.allclose(edmd_fit(np.array([[2.0, 6.0, 18.0]])), [[3.0]])

    def test_needs_two_snapshots(self):
        with pytest.raises(ValueError):
            edmd_fit(np.ones((3, 1)))


class TestExplosionPolicy:
    def test_finite_passes_through(self):
        k = seeded_rng(43).standard_normal((3, 3))
        assert np.array_equal(explosion_check(k), k)

    def test_nan_replaced_by_identity(self):
        k = np.eye(3)
        k[1, 2] = np.nan
        assert np.array_equal(explosion_check(k), np.eye(3))

    def test_inf_replaced_by_identity(self):
        k = np.eye(2)
        k[0, 0] = np.inf
        assert np.array_equal(explosion_check(k), np.eye(2))


class TestInitKInv:
    def test_identity_by_default(self):
        assert np.array_equal(init_k_inv(3), np.eye(3))

    def test_unit_eigenvalues(self):
        ev = np.linalg.eigvals(init_k_inv(5, seed=2))
        assert np.allclose(ev, 1.0)

    def test_perturbation_keeps_moduli_near_one(self):
        for d in (4, 16, 64):
            ev = np.linalg.eigvals(init_k_inv(d, seed=3, perturb_scale=0.01))
            assert np.all(np.abs(np.abs(ev) - 1.0) < 0.1)


class TestOperatorStability:
    def test_identity_is_perfectly_stable(self):
        assert operator_stability(np.eye(4)) == 0.0

    def test_hand_computed_diagonal(self):
        assert operator_stability(np.diag([2.0, 0.5])) == pytest.approx(0.75)

    def test_orthogonal_matrix(self):
        q, _ = np.linalg.qr(seeded_rng(44).standard_normal((6, 6)))
        assert operator_stability(q) <= 1e-8


class TestTimeInvForward:
    def test_zero_operator_gives_bias_only_output(self):
        m = small_model()
        m.k_inv[0][...] = 0.0
        x = seeded_rng(45).standard_normal((8, 1))
        out = time_inv_forward(m, 0, x)
        bias_only, _ = mlp_forward(m.phi_inv_dec, np.zeros(m.config.embed_dim))
        assert np.allclose(out.ravel(), bias_only, atol=1e-12)

    def test_identity_operator_is_decode_of_encode(self):
        m = small_model()
        m.k_inv[0][...] = np.eye(m.config.embed_dim)
        x = seeded_rng(46).standard_normal((8, 1))
        z, _ = mlp_forward(m.phi_inv_enc, x.ravel())
        expected, _ = mlp_forward(m.phi_inv_dec, z)
        assert np.allclose(time_inv_forward(m, 0, x).ravel(), expected, atol=1e-12)

    def test_recompute_oracle(self):
        m = small_model(seed=9)
        x = seeded_rng(47).standard_normal((8, 1))
        z, _ = mlp_forward(m.phi_inv_enc, x.ravel())
        manual, _ = mlp_forward(m.phi_inv_dec, m.k_inv[1] @ z)
        assert np.allclose(time_inv_forward(m, 1, x).ravel(), manual, atol=1e-12)


class TestTimeVarForward:
    def test_constructed_linear_dynamics_fit_exactly(self):
        s, segments = 4, 4
        basis = zero_sum_basis(s)
        theta = 0.7
        rot3 = np.eye(3)
        rot3[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        a = basis @ rot3 @ basis.T
        z = np.empty((s, segments))
        z[:, 0] = basis @ np.array([1.0, 0.5, -0.3])
        for j in range(segments - 1):
            z[:, j + 1] = a @ z[:, j]
        x = z.T.reshape(-1, 1)
        m = linear_toy(segments, s=s, h=4)
        x_fit, y_var, k_var = time_var_forward(m, x)
        assert np.abs(x_fit[s:] - x[s:]).max() < 1e-6  # beyond segment 1
        assert np.abs(k_var @ z[:, 0] - z[:, 1]).max() < 1e-9
        assert np.abs(y_var.ravel() - a @ z[:, -1]).max() < 1e-9

    def test_horizon_equal_segment_is_single_operator_application(self):
        s, segments = 4, 3
        basis = zero_sum_basis(s)
        z = np.stack([basis[:, 0], basis[:, 1], basis[:, 2]], axis=1)
        x = z.T.reshape(-1, 1)
        m = linear_toy(segments, s=s, h=s)
        _, y_var, k_var = time_var_forward(m, x)
        assert np.allclose(y_var.ravel(), k_var @ z[:, -1], atol=1e-12)

    def test_nilpotent_operator_predictions_decay_to_decoded_zero(self):
        s = 4
        basis = zero_sum_basis(s)
        z = np.stack([basis[:, 0], basis[:, 1]], axis=1)
        x = z.T.reshape(-1, 1)
        m = linear_toy(2, s=s, h=8)
        x_fit, y_var, k_var = time_var_forward(m, x)
        assert np.abs(np.linalg.eigvals(k_var)).max() < 1e-10  # spectral radius 0
        assert np.abs(y_var).max() < 1e-10  # identity decoder, zero bias
        assert np.abs(x_fit[s:] - x[s:]).max() < 1e-10


class TestKoopaForward:
    def test_single_block_is_sum_of_branches(self):
        from koopa.spectral import fourier_filter

        m = small_model(b=1, normalize=False)
        x = seeded_rng(48).standard_normal((8, 1))
        res = koopa_forward(m, x)
        x_inv, x_var = fourier_filter(x, m.mask)
        y_inv = time_inv_forward(m, 0, x_inv)
        _, y_var, _ = time_var_forward(m, x_var)
        assert np.abs(res.prediction - y_inv - y_var).max() <= 1e-10

    def test_residual_trace_is_definitional(self):
        m = small_model(b=3)
        x = seeded_rng(49).standard_normal((8, 1))
        res = koopa_forward(m, x)
        assert len(res.residual_trace) == 4
        from koopa.spectral import fourier_filter

        for b in range(3):
            x_inv, x_var = fourier_filter(res.residual_trace[b], m.mask)
            x_fit, _, _ = time_var_forward(m, x_var)
            assert np.abs(res.residual_trace[b + 1] - (x_var - x_fit)).max() <= 1e-9

    def test_prediction_is_sum_of_contributions(self):
        m = small_model(b=2)
        x = seeded_rng(50).standard_normal((8, 1))
        res = koopa_forward(m, x)
        total = sum(yv + yi for yv, yi in res.per_block_contributions)
        x_norm, mean, std = normalize_window(x)
        assert np.abs(denormalize(total, mean[0], std[0]) - res.prediction).max() <= 1e-10

    def test_decomposition_closure_per_block(self):
        from koopa.spectral import fourier_filter

        m = small_model(b=2)
        x = seeded_rng(51).standard_normal((8, 1))
        res = koopa_forward(m, x)
        for r in res.residual_trace[:-1]:
            x_inv, x_var = fourier_filter(r, m.mask)
            assert np.abs((x_inv + x_var) - r).max() <= 1e-12

    def test_full_mask_degenerates_to_invariant_only(self):
        t = 8
        cfg = ModelConfig(lookback=t, horizon=4, variates=1, blocks=1, segment_len=4,
                          embed_dim=4, alpha=1.0, hidden_dims=(6,), seed=2)
        mask = SpectrumMask(t, tuple(range(spectrum_bins(t))), 1.0)
        m = new_model(cfg, mask)
        x = seeded_rng(52).standard_normal((t, 1))
        from koopa.spectral import fourier_filter

        x_norm, _, _ = normalize_window(x)
        _, x_var = fourier_filter(x_norm, mask)
        assert np.abs(x_var).max() <= 1e-10
        res = koopa_forward(m, x)
        assert np.all(np.isfinite(res.prediction))

    def test_batched_forward_matches_single(self):
        m = small_model(b=2, seed=5)
        xs = seeded_rng(53).standard_normal((6, 8, 1))
        cache = _forward_batch(m, xs)
        preds = denormalize(cache.y_norm, cache.mean, cache.std)
        for i in range(6):
            assert np.abs(preds[i] - koopa_forward(m, xs[i]).prediction).max() <= 1e-10

    def test_normalization_path_equals_prestandardized_path(self):
        # integer number of periods per window: every window shares its stats
        t, h = 16, 8
        grid = np.arange(256.0)
        series = np.sin(2 * np.pi * grid / 8.0)[:, None] * 1.7 + 0.4
        x = series[:t]
        x_norm, mean, std = normalize_window(x)
        cfg = dict(lookback=t, horizon=h, variates=1, blocks=2, segment_len=8,
                   embed_dim=6, alpha=0.3, hidden_dims=(8,), seed=7)
        m_norm = new_model(ModelConfig(normalize=True, **cfg), tiny_mask(t, (0, 2)))
        m_raw = new_model(ModelConfig(normalize=False, **cfg), tiny_mask(t, (0, 2)))
        pred_norm = koopa_forward(m_norm, x).prediction
        pred_raw = koopa_forward(m_raw, (x - mean[0]) / std[0]).prediction
        assert np.abs(denormalize(pred_raw, mean[0], std[0]) - pred_norm).max() <= 1e-6


class TestGradientIntegrity:
    def loss_and_grads(self, m, x, target):
        cache = _forward_batch(m, x)
        y_norm = (target - cache.mean) / cache.std
        diff = cache.y_norm - y_norm
        loss = float((diff**2).mean())
        grads = _backward_batch(m, cache, 2.0 * diff / diff.size)
        return loss, grads

    def loss_only(self, m, x, target):
        cache = _forward_batch(m, x)
        y_norm = (target - cache.mean) / cache.std
        return float(((cache.y_norm - y_norm) ** 2).mean())

    def test_full_model_matches_finite_differences(self):
        m = small_model(t=8, h=4, c=1, d=4, s=4, b=2, hidden=(6,), seed=11)
        x = seeded_rng(54).standard_normal((2, 8, 1))
        target = seeded_rng(55).standard_normal((2, 4, 1))
        _, grads = self.loss_and_grads(m, x, target)
        h_step = 1e-5
        worst = 0.0
        for name, param in zip(parameter_names(m), model_parameters(m)):
            g = grads.by_name[name]
            flat, gflat = param.reshape(-1), g.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h_step
                lp = self.loss_only(m, x, target)
                flat[idx] = orig - h_step
                lm = self.loss_only(m, x, target)
                flat[idx] = orig
                fd = (lp - lm) / (2 * h_step)
                worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-4))
        assert worst < 1e-3

    def test_detached_kvar_changes_variant_encoder_gradient(self):
        m_full = small_model(seed=13)
        m_det = small_model(seed=13, detach_kvar=True)
        x = seeded_rng(56).standard_normal((3, 8, 1))
        target = seeded_rng(57).standard_normal((3, 4, 1))
        _, g_full = self.loss_and_grads(m_full, x, target)
        _, g_det = self.loss_and_grads(m_det, x, target)
        name = "phi_var_enc.w0"
        assert not np.allclose(g_full.by_name[name], g_det.by_name[name])
        assert np.abs(g_det.by_name[name]).max() > 0  # direct paths still flow


def memorizable_dataset(n=160, t=16, seed=0):
    grid = np.arange(n, dtype=float)
    values = np.stack([np.sin(2 * np.pi * grid / 16.0)], axis=1)
    return chronological_split(Dataset("sine", values), ratios=(0.6, 0.2))


class TestTrain:
    def make_model(self, seed=0, **kw):
        cfg = ModelConfig(
            lookback=16, horizon=8, variates=1, blocks=2, segment_len=8, embed_dim=8,
            alpha=0.3, hidden_dims=(16,), lr=2e-3, batch_size=16, max_epochs=kw.pop("max_epochs", 10),
            patience=kw.pop("patience", 3), seed=seed, **kw
        )
        ds = memorizable_dataset()
        from koopa.data import windows

        mask = fit_mask(cfg, (w.lookback for w in windows(ds, "train", cfg.lookback, cfg.horizon)))
        return new_model(cfg, mask, scaler=ds.scaler), ds

    def test_memorizes_tiny_sinusoid(self):
        model, ds = self.make_model(max_epochs=40, patience=40)
        result = train(model, ds)
        assert result.log[-1].train_mse < 1e-2

    def test_seeded_runs_are_identical(self):
        r1 = train(*self.make_model(seed=3))
        r2 = train(*self.make_model(seed=3))
        assert [(row.train_mse, row.val_mse) for row in r1.log] == [
            (row.train_mse, row.val_mse) for row in r2.log
        ]

    def test_early_stopping_after_exactly_patience_epochs(self, monkeypatch):
        model, ds = self.make_model(max_epochs=50, patience=3)
        monkeypatch.setattr(model_mod, "validation_mse", lambda *a, **k: 1.0)
        result = train(model, ds)
        assert result.stopped_early
        assert result.epochs_run == 1 + 3  # first epoch sets best, then patience misses

    def test_explosion_event_is_logged_and_repaired(self):
        model, ds = self.make_model(max_epochs=1)
        model.k_inv[0][0, 0] = np.nan
        result = train(model, ds)
        assert any("explosion" in e for e in result.events)
        assert np.all(np.isfinite(model.k_inv[0]))
        assert result.epochs_run == 1

    def test_persistent_divergence_aborts_with_coordinates(self):
        model, ds = self.make_model(max_epochs=1)
        model.phi_inv_dec.weights[-1][...] = np.nan  # unrepairable by operator policy
        with pytest.raises(TrainingError) as err:
            train(model, ds)
        assert err.value.epoch == 1
        assert err.value.batch == model_mod.MAX_CONSECUTIVE_EXPLOSIONS - 1

    def test_best_validation_weights_are_restored(self):
        model, ds = self.make_model(max_epochs=6, patience=6)
        result = train(model, ds)
        from koopa.model import validation_mse

        val_vals = ds.split_values("val")
        origins = np.arange(val_vals.shape[0] - 16 - 8 + 1)
        assert validation_mse(model, val_vals, origins) == pytest.approx(result.best_val, rel=1e-9)
