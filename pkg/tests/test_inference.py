import math

import numpy as np
import pytest
from scipy import stats

from disttpca.inference import (
    InferenceSummary,
    confidence_region_contains,
    estimate_lambda,
    inference_summary,
    normal_quantile,
    studentized,
    summarize,
)
from disttpca.runtime import MachineState
from disttpca.simgen import ScenarioConfig, gen_homogeneous, initialize
from disttpca.tensor import matricize, multi_mode_product, rho, svd_top_r
from disttpca.tucker import hooi

from conftest import low_rank_tensor, random_basis


class TestQuantile:
    def test_reference_value(self):
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-5)

    @pytest.mark.parametrize("q", [1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.5, 0.8, 0.975, 0.999, 1 - 1e-9])
    def test_against_scipy(self, q):
        assert normal_quantile(q) == pytest.approx(stats.norm.ppf(q), abs=1e-8)

    def test_symmetry_and_cdf_inverse(self):
        for q in np.linspace(0.01, 0.99, 25):
            x = normal_quantile(q)
            assert normal_quantile(1 - q) == pytest.approx(-x, abs=1e-9)
            assert 0.5 * math.erfc(-x / math.sqrt(2)) == pytest.approx(q, abs=1e-12)

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 2.0])
    def test_domain(self, q):
        with pytest.raises(ValueError):
            normal_quantile(q)


class TestSummary:
    def test_worked_example(self):
        s = inference_summary(1.0, [5.0, 5.0, 5.0], 50, 10)
        assert s.bias == pytest.approx(1.2, abs=1e-12)
        assert s.sd == pytest.approx(math.sqrt(400) / 10 * math.sqrt(3 / 625), rel=1e-12)
        assert s.sd == pytest.approx(0.138564, rel=1e-5)

    def test_scaling(self):
        a = inference_summary(0.7, [3.0, 4.0], 30, 5)
        b = inference_summary(0.7, [3.0, 4.0], 30, 10)
        c = inference_summary(2.1, [3.0, 4.0], 30, 5)
        assert b.bias == pytest.approx(a.bias / 2, rel=1e-15) and b.sd == pytest.approx(a.sd / 2, rel=1e-15)
        assert c.bias == pytest.approx(9 * a.bias, rel=1e-12) and c.sd == pytest.approx(9 * a.sd, rel=1e-12)

    def test_zero_noise(self):
        s = inference_summary(0.0, [2.0], 10, 3)
        assert s.bias == 0.0 and s.sd == 0.0

    @pytest.mark.parametrize("lam", [[1.0, 0.0], [-1.0], []])
    def test_rejects_nonpositive_singular_values(self, lam):
        with pytest.raises(ValueError):
            inference_summary(1.0, lam, 10, 2)


class TestLambda:
    def test_noiseless_spectrum(self, rng):
        t, core, us = low_rank_tensor(rng, (8, 9, 10), (3, 2, 2))
        for j in range(3):
            expected = np.linalg.svd(matricize(core, j), compute_uv=False)[: core.shape[j]]
            assert np.allclose(estimate_lambda(t, us, j), expected, atol=1e-8)

    def test_rank_one(self, rng):
        us = [random_basis(rng, 6, 1) for _ in range(3)]
        t = multi_mode_product(np.full((1, 1, 1), 4.5), us)
        m = MachineState(0, t)
        assert estimate_lambda(m, us, 1) == pytest.approx([4.5])

    def test_noisy_relative_error(self):
        good = 0
        for rep in range(100):
            cfg = ScenarioConfig(p=50, r_u=3, lam=50 ** 0.9, L=1, seed=7000 + rep)
            machines, truth = gen_homogeneous(cfg)
            fitted = hooi(machines[0].tensor, (3, 3, 3), max_iter=10, tol=1e-6)
            true = svd_top_r(matricize(truth.cores[0], 0), 3)[1]
            good += np.max(np.abs(estimate_lambda(machines[0], fitted, 0) / true - 1)) <= 0.05
        assert good >= 95

    def test_noisy_error_matches_perturbation_size(self):
        # lambda_hat_i ~ lambda_i + N(0, sigma^2) + p sigma^2 / (2 lambda_i) for the smallest entry
        errs = []
        for rep in range(100):
            cfg = ScenarioConfig(p=50, r_u=3, lam=50 ** 0.9, L=1, seed=7000 + rep)
            machines, truth = gen_homogeneous(cfg)
            true = svd_top_r(matricize(truth.cores[0], 0), 3)[1]
            errs.append(estimate_lambda(machines[0], truth.common, 0)[-1] - true[-1] - 50 / (2 * true[-1]))
        errs = np.array(errs)
        assert abs(errs.mean()) < 0.35
        assert 0.75 < errs.std() < 1.3


class TestRegion:
    def test_candidate_equal_to_estimate(self, rng):
        u = random_basis(rng, 10, 2)
        z = normal_quantile(0.975)
        inside = InferenceSummary(0, bias=0.1, sd=0.1, sigma_hat=1.0, lambda_hat=(1.0,))
        outside = InferenceSummary(0, bias=0.3, sd=0.1, sigma_hat=1.0, lambda_hat=(1.0,))
        assert confidence_region_contains(u, u, inside) == (0.1 <= z * 0.1)
        assert not confidence_region_contains(u, u, outside)

    def test_orthogonal_candidate_rejected(self, rng):
        q = np.linalg.qr(rng.standard_normal((10, 4)))[0]
        s = inference_summary(1.0, [20.0, 20.0], 10, 5)
        assert rho(q[:, :2], q[:, 2:]) ** 2 == pytest.approx(4.0)
        assert not confidence_region_contains(q[:, :2], q[:, 2:], s)

    def test_level_domain(self, rng):
        u = random_basis(rng, 5, 1)
        s = inference_summary(1.0, [3.0], 5, 2)
        with pytest.raises(ValueError):
            confidence_region_contains(u, u, s, xi=1.0)
        with pytest.raises(ValueError):
            confidence_region_contains(u, random_basis(rng, 5, 2), s)

    def test_noiseless_truth_is_covered(self):
        cfg = ScenarioConfig(p=12, r_u=2, lam=5.0, sigma=0.0, L=3, seed=2)
        machines, truth = gen_homogeneous(cfg)
        initialize(machines, 2, "oracle", truth)
        from disttpca.estimators import two_iteration_pca
        est = two_iteration_pca(machines, 2)
        for s in summarize(machines, est):
            assert s.sigma_hat < 1e-10
            assert s.bias < 1e-18 and s.sd < 1e-18
            # with a degenerate band only exact agreement counts; the estimate is exact up to rounding
            assert rho(est.factors[s.mode], truth.common[s.mode]) < 1e-8

    def test_studentized(self, rng):
        a, b = random_basis(rng, 6, 2), random_basis(rng, 6, 2)
        s = inference_summary(1.0, [2.0, 3.0], 6, 4)
        assert studentized(a, b, s) == pytest.approx((rho(a, b) ** 2 - s.bias) / s.sd)
