import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abds.diffusion import estimate_x0, make_schedule
from abds.gmm import GmmDistribution, GmmScoreModel
from abds.guidance import (
    EditResult,
    GuidanceConfig,
    SamplingError,
    SimilarityKernel,
    grad_log_rsim,
    guidance_forward_match,
    guidance_naive,
    guidance_reverse_match,
    guided_sample,
    guided_sample_batch,
    ideal_guidance_gmm,
    rsim,
)
from abds.mlp import MlpEpsModel
from abds.oracle import angular_error_grid, fd_ideal_gradient, terminal_gradient_check
from abds.autodiff import Tensor


class TestKernel:
    def test_equal_points_give_one(self):
        k = SimilarityKernel(2.0)
        x = np.array([0.3, -0.7])
        assert rsim(x, x, k) == 1.0

    def test_hand_value(self):
        assert rsim(np.array([1.0]), np.array([0.0]), SimilarityKernel(1.0)) == (
            pytest.approx(0.36787944, abs=1e-8)
        )

    @settings(max_examples=25, derandomize=True, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        k = SimilarityKernel(float(rng.uniform(0.1, 3.0)))
        x, y = rng.normal(size=3), rng.normal(size=3)
        assert rsim(x, y, k) == rsim(y, x, k)
        assert 0.0 < rsim(x, y, k) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rsim(np.zeros(2), np.zeros(3), SimilarityKernel(1.0))

    def test_bad_sharpness(self):
        with pytest.raises(ValueError):
            SimilarityKernel(0.0)
        with pytest.raises(ValueError):
            SimilarityKernel(float("inf"))


class TestGradLogRsim:
    def test_zero_at_match(self):
        k = SimilarityKernel(1.5)
        x = np.array([0.2, 0.4])
        np.testing.assert_array_equal(grad_log_rsim(x, x, k), np.zeros(2))

    def test_hand_value(self):
        g = grad_log_rsim(np.array([1.0]), np.array([0.0]), SimilarityKernel(1.0))
        assert g[0] == -2.0

    def test_matches_finite_differences(self):
        k = SimilarityKernel(0.8)
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=3), rng.normal(size=3)
        h = 1e-6
        fd = np.zeros(3)
        for i in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (np.log(rsim(xp, y, k)) - np.log(rsim(xm, y, k))) / (2 * h)
        np.testing.assert_allclose(grad_log_rsim(x, y, k), fd, atol=1e-8)


class TestNaive:
    def test_zero_at_input(self):
        k = SimilarityKernel(1.0)
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(guidance_naive(x, x, k), np.zeros(2))

    def test_definitional(self):
        k = SimilarityKernel(0.6)
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=4), rng.normal(size=4)
        np.testing.assert_array_equal(guidance_naive(x, y, k), -2 * 0.6 * (x - y))

    def test_nonzero_at_terminal_step(self, sched_strong):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(3)
        y = rng.standard_normal(3)
        assert np.linalg.norm(guidance_naive(x, y, SimilarityKernel(1.0))) > 0.1


class TestForwardMatch:
    def test_no_noise_limit_reduces_to_naive(self, sched):
        k = SimilarityKernel(1.0)
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_array_equal(
            guidance_forward_match(x, y, 0, sched, k), guidance_naive(x, y, k)
        )

    def test_zero_at_transported_input(self, sched):
        k = SimilarityKernel(1.0)
        y = np.array([0.5, -1.0])
        t = 80
        x = np.sqrt(sched.abar(t)) * y
        np.testing.assert_allclose(
            guidance_forward_match(x, y, t, sched, k), np.zeros(2), atol=1e-15
        )

    def test_hand_value(self):
        s = make_schedule("linear", 1, 0.75, 0.75)  # abar_1 = 0.25
        g = guidance_forward_match(
            np.array([0.0]), np.array([2.0]), 1, s, SimilarityKernel(1.0)
        )
        assert g[0] == pytest.approx(2.0, rel=1e-12)


class TestReverseMatch:
    def test_zero_at_kernel_maximum(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        k = SimilarityKernel(1.0)
        t = 60
        y = np.array([0.4])
        x = y / np.sqrt(sched.abar(t))  # denoised mean equals y exactly
        np.testing.assert_allclose(
            guidance_reverse_match(x, y, t, model, sched, k), np.zeros(1), atol=1e-12
        )

    def test_single_gaussian_closed_form(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        lam = 0.8
        k = SimilarityKernel(lam)
        rng = np.random.default_rng(8)
        for t in (1, 50, 150, 200):
            ab = sched.abar(t)
            x, y = rng.normal(size=1), rng.normal(size=1)
            expect = -2 * lam * np.sqrt(ab) * (np.sqrt(ab) * x - y)
            np.testing.assert_allclose(
                guidance_reverse_match(x, y, t, model, sched, k), expect, rtol=1e-10
            )

    def test_mlp_matches_finite_differences(self, sched):
        model = MlpEpsModel.init(dim=3, hidden=(8, 8), activation="tanh", seed=0)
        lam = 0.7
        k = SimilarityKernel(lam)
        rng = np.random.default_rng(9)

        def logr(x, t, y):
            eps = model.predict_eps(x, t, sched)
            mu0 = estimate_x0(x, t, eps, sched).data
            return -lam * np.sum((mu0 - y) ** 2)

        worst = 0.0
        for _ in range(10):
            t = int(rng.integers(1, sched.T + 1))
            x, y = rng.normal(size=3), rng.normal(size=3)
            fd = np.zeros(3)
            h = 1e-5
            for i in range(3):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (logr(xp, t, y) - logr(xm, t, y)) / (2 * h)
            g = guidance_reverse_match(x, y, t, model, sched, k)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        assert worst <= 1e-5

    def test_requires_vjp_capable_model(self, sched):
        class Bare:
            pass

        with pytest.raises(TypeError):
            guidance_reverse_match(
                np.zeros(1), np.zeros(1), 5, Bare(), sched, SimilarityKernel(1.0)
            )


class TestIdealOracle:
    def test_terminal_gradient_property(self, sched_strong, gmm_two_2d):
        rows = terminal_gradient_check(gmm_two_2d, sched_strong, lam=0.7, n_probes=40, seed=12)
        assert all(r["reverse_ok"] for r in rows)
        assert all(r["ideal_ok"] for r in rows)
        assert sum(r["naive_violates"] for r in rows) >= 0.95 * len(rows)

    def test_single_gaussian_collinearity(self, sched):
        gmm = GmmDistribution([1.0], [[0.4, -0.2]], [[1.0, 1.0]])
        model = GmmScoreModel(gmm)
        lam = 0.9
        k = SimilarityKernel(lam)
        rng = np.random.default_rng(13)
        for t in (1, 25, 75, 140, 200):
            factor = 1 + 2 * lam * (1 - sched.abar(t))
            for _ in range(10):
                x = rng.normal(size=2) * 1.5
                y = rng.normal(size=2) * 1.5
                gi = ideal_guidance_gmm(x, y, t, gmm, sched, k)
                gr = guidance_reverse_match(x, y, t, model, sched, k)
                resid = np.linalg.norm(gr - factor * gi) / np.linalg.norm(gr)
                assert resid <= 1e-8

    def test_matches_quadrature_oracle(self, sched, gmm_two_1d):
        k = SimilarityKernel(0.7)
        y = np.array([1.4])
        rng = np.random.default_rng(14)
        for t in (30, 110, 185):
            x = rng.normal(size=1)
            g = ideal_guidance_gmm(x, y, t, gmm_two_1d, sched, k)
            fd = fd_ideal_gradient(gmm_two_1d, x, y, t, sched, 0.7)
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-3

    def test_t0_limit_is_naive(self, sched, gmm_two_2d):
        k = SimilarityKernel(1.2)
        x, y = np.array([0.6, 0.1]), np.array([-0.2, 0.9])
        np.testing.assert_array_equal(
            ideal_guidance_gmm(x, y, 0, gmm_two_2d, sched, k), guidance_naive(x, y, k)
        )

    def test_approximation_quality_ordering(self, sched, gmm_two_2d):
        errs = angular_error_grid(
            gmm_two_2d, sched, lam=1.0, y=np.array([1.8, 0.3]),
            t_values=[20, 60, 100, 140, 180], n_probes=20, seed=7,
        )
        assert errs["reverse_match"] < errs["forward_match"]
        assert errs["reverse_match"] < errs["naive"]


class TestGuidedSample:
    def test_edit_result_contract(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("reverse_match", SimilarityKernel(0.5))
        res = guided_sample(model, sched, cfg, np.array([1.0]), seed=3)
        assert res.steps_used == sched.T
        assert res.guidance_norms.shape == (sched.T,)
        assert res.edit.shape == res.input.shape

    def test_bit_reproducible(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("ideal_oracle", SimilarityKernel(0.5))
        a = guided_sample(model, sched, cfg, np.array([2.0]), seed=11)
        b = guided_sample(model, sched, cfg, np.array([2.0]), seed=11)
        assert a.edit.data.tobytes() == b.edit.data.tobytes()

    def test_zero_strength_matches_none_bitwise(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        k = SimilarityKernel(0.5)
        off = guided_sample(
            model, sched, GuidanceConfig("none", k), np.array([2.0]), seed=21
        )
        zero = guided_sample(
            model, sched, GuidanceConfig("reverse_match", k, strength=0.0),
            np.array([2.0]), seed=21,
        )
        assert off.edit.data.tobytes() == zero.edit.data.tobytes()
        assert np.all(off.guidance_norms == 0.0)
        assert np.any(zero.guidance_norms > 0.0)

    def test_unconditional_moment_check(self, sched_gentle, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("none", SimilarityKernel(1.0), strength=0.0)
        edits = guided_sample_batch(model, sched_gentle, cfg, np.zeros(1), n=10_000, seed=2)
        assert abs(edits.mean()) <= 3 / np.sqrt(10_000)
        assert abs(edits.var(ddof=1) - 1.0) <= 3 * np.sqrt(2 / 9999)

    def test_exact_conditional_sampling(self, sched, gmm_std_1d):
        # product of the unit-Gaussian prior and the kernel at lam=1/2 is
        # an exact Gaussian: mean c/2, variance 1/2
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("ideal_oracle", SimilarityKernel(0.5))
        c = 2.0
        edits = guided_sample_batch(model, sched, cfg, np.array([c]), n=10_000, seed=42)
        se = np.sqrt(0.5) / np.sqrt(10_000)
        assert abs(edits.mean() - c / 2) <= 3 * se
        assert abs(edits.var() - 0.5) / 0.5 <= 0.10

    def test_monotone_pull(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        k = SimilarityKernel(0.5)
        means = []
        for strength in (0.0, 0.5, 1.0, 2.0):
            cfg = GuidanceConfig("ideal_oracle", k, strength=strength)
            edits = guided_sample_batch(model, sched, cfg, np.array([2.0]), n=2000, seed=33)
            means.append(edits.mean())
        assert means[0] == pytest.approx(0.0, abs=0.08)
        assert all(b > a + 0.1 for a, b in zip(means, means[1:]))

    def test_ddim_sampler_runs_and_is_deterministic(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("ideal_oracle", SimilarityKernel(0.5))
        a = guided_sample(model, sched, cfg, np.array([2.0]), seed=5, sampler="ddim", ddim_steps=20)
        b = guided_sample(model, sched, cfg, np.array([2.0]), seed=5, sampler="ddim", ddim_steps=20)
        assert a.steps_used == 20
        assert a.edit.data.tobytes() == b.edit.data.tobytes()

    def test_nonfinite_abort_reports_step(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("naive", SimilarityKernel(100.0), strength=1e308)
        with np.errstate(over="ignore"), pytest.raises(SamplingError, match="timestep"):
            guided_sample(model, sched, cfg, np.array([2.0]), seed=1)

    def test_ideal_oracle_requires_gmm_model(self, sched):
        mlp = MlpEpsModel.init(dim=1, hidden=(4,), seed=0)
        cfg = GuidanceConfig("ideal_oracle", SimilarityKernel(1.0))
        with pytest.raises(ValueError, match="mixture"):
            guided_sample(mlp, sched, cfg, np.array([0.0]), seed=0)

    def test_clip_norm_bounds_trace(self, sched, gmm_std_1d):
        model = GmmScoreModel(gmm_std_1d)
        cfg = GuidanceConfig("naive", SimilarityKernel(5.0), clip_norm=0.1)
        res = guided_sample(model, sched, cfg, np.array([3.0]), seed=6)
        assert np.all(res.guidance_norms <= 0.1 + 1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GuidanceConfig("sideways", SimilarityKernel(1.0))
        with pytest.raises(ValueError):
            GuidanceConfig("naive", SimilarityKernel(1.0), strength=-1.0)
        with pytest.raises(ValueError):
            GuidanceConfig("naive", SimilarityKernel(1.0), clip_norm=0.0)

    def test_edit_result_validation(self):
        with pytest.raises(ValueError, match="shape"):
            EditResult(
                input=Tensor([1.0]),
                edit=Tensor([1.0, 2.0]),
                seed=0,
                steps_used=0,
                guidance_norms=np.array([]),
            )
