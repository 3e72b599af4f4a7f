"""Time-law reweighting: tilted densities, mass constants, dominance scans."""

import numpy as np
import pytest

from gmkit import timeweight as tw
from gmkit.errors import DomainViolation, UnboundedWeight, ZeroMass


class TestCatalog:
    def test_densities_normalize(self):
        for dist in (tw.uniform(), tw.beta(2, 2), tw.beta(3, 1), tw.truncated_exp(1.0)):
            assert abs(dist.normalization_check() - 1.0) < 1e-6

    def test_counter_based_sampler_is_pure(self):
        dist = tw.beta(2, 2)
        assert dist.sample(7, 3) == dist.sample(7, 3)
        assert dist.sample(7, 3) != dist.sample(7, 4)
        block = dist.sample_n(7, 0, 100)
        np.testing.assert_array_equal(block, dist.sample_n(7, 0, 100))

    def test_sampler_matches_density_moments(self):
        dist = tw.beta(2, 2)
        draws = dist.sample_n(1, 0, 200_000)
        assert abs(draws.mean() - 0.5) < 3 * draws.std(ddof=1) / np.sqrt(draws.size)
        quad_second = tw.simpson_integral(lambda t: t * t * dist.pdf(t))
        assert abs((draws**2).mean() - quad_second) < 4 * 0.01


class TestDominanceScan:
    def test_uniform_passes(self):
        assert tw.check_dominates(tw.uniform(), 1000).passed

    def test_beta_with_declared_exceptions_passes(self):
        report = tw.check_dominates(tw.beta(2, 2), 1000)
        assert report.passed

    def test_positive_measure_hole_fails(self):
        def dens(t):
            t = np.asarray(t, float)
            return np.where(t < 0.3, 0.0, 1.0 / 0.7)

        # discontinuous density: loosen the Simpson normalization tolerance
        holed = tw.TimeDistribution(
            "holed",
            density=dens,
            sample_block=lambda rng, n: 0.3 + 0.7 * rng.random(n),
            norm_tol=1e-3,
        )
        report = tw.check_dominates(holed, 1000)
        assert not report.passed
        assert report.n_zero > 100


class TestReweight:
    def test_linear_weight_on_uniform(self):
        tilted, k = tw.reweight(tw.uniform(), tw.linear_weight(2.0))
        assert k == pytest.approx(1.0, abs=1e-9)
        ts = np.linspace(0.05, 0.95, 19)
        np.testing.assert_allclose(tilted.pdf(ts), 2 * ts, atol=1e-9)

    def test_constant_weight_keeps_distribution(self):
        tilted, k = tw.reweight(tw.uniform(), tw.const_weight(5.0))
        assert k == pytest.approx(5.0, abs=1e-9)
        ts = np.linspace(0.0, 1.0, 11)
        np.testing.assert_allclose(tilted.pdf(ts), 1.0, atol=1e-12)

    def test_beta_with_endpoint_weight_normalizes(self):
        w = tw.WeightFn(lambda t: 1.0 / (1.0 - np.asarray(t, float) + 0.1), "inv_gap")
        tilted, k = tw.reweight(tw.beta(2, 2), w)
        assert k > 0
        assert abs(tilted.normalization_check() - 1.0) < 1e-6

    def test_roundtrip_with_inverse_weight(self):
        dist = tw.beta(2, 2)
        w = tw.linear_weight(2.0)
        tilted, k1 = tw.reweight(dist, w)
        inv = tw.WeightFn(lambda t: 1.0 / w(t), "inv", exception_set=w.exception_set)
        back, k2 = tw.reweight(tilted, inv)
        ts = np.linspace(0.01, 0.99, 99)
        np.testing.assert_allclose(back.pdf(ts), dist.pdf(ts), atol=1e-10)
        assert k1 * k2 == pytest.approx(1.0, abs=1e-9)

    def test_zero_mass_rejected(self):
        with pytest.raises((ZeroMass, DomainViolation)):
            tw.reweight(tw.uniform(), tw.WeightFn(lambda t: np.zeros_like(np.asarray(t, float)), "zero"))

    def test_unbounded_weight_rejected(self):
        w = tw.WeightFn(lambda t: 1.0 / (1.0 - np.asarray(t, float)) ** 4, "explode")
        with pytest.raises(UnboundedWeight):
            tw.reweight(tw.uniform(), w)

    def test_tilted_sampler_tracks_density(self):
        tilted, _ = tw.reweight(tw.uniform(), tw.linear_weight(2.0))
        draws = tilted.sample_n(3, 0, 100_000)
        # E[t] under density 2t is 2/3
        assert abs(draws.mean() - 2.0 / 3.0) < 4 * draws.std(ddof=1) / np.sqrt(draws.size)


class TestWeightedExpectation:
    def test_linear_weight_times_t(self):
        res = tw.expect_weighted(tw.uniform(), tw.linear_weight(2.0), lambda t: t, n=100_000, seed=5)
        assert res.quad == pytest.approx(2.0 / 3.0, abs=1e-8)
        assert abs(res.mc - 2.0 / 3.0) < 4 * res.mc_stderr

    def test_constant_identity(self):
        res = tw.expect_weighted(tw.uniform(), tw.const_weight(1.0), lambda t: np.ones_like(t), n=100, seed=1)
        assert res.mc == pytest.approx(1.0)
        assert res.quad == pytest.approx(1.0, abs=1e-10)

    def test_tilt_identity_matrix(self):
        dists = [tw.uniform(), tw.beta(2, 2), tw.beta(3, 1), tw.truncated_exp(1.0)]
        weights = [
            tw.const_weight(1.0),
            tw.linear_weight(2.0),
            tw.eps_regularized_weight(0.1),
            tw.sin_pi_weight(),
        ]
        fns = [
            lambda t: np.ones_like(t),
            lambda t: t,
            lambda t: t * t,
            lambda t: np.sin(np.pi * t),
        ]
        for dist in dists:
            for w in weights:
                tilted, k = tw.reweight(dist, w)
                for f in fns:
                    lhs = tw.expect_weighted(dist, w, f, n=40_000, seed=9).quad
                    rhs = k * tw.simpson_integral(lambda t: np.asarray(f(t)) * tilted.pdf(t))
                    assert abs(lhs - rhs) < 1e-8

    def test_mc_agrees_with_quadrature_within_noise(self):
        dist = tw.beta(2, 2)
        w = tw.WeightFn(lambda t: 1.0 / (1.0 - np.asarray(t, float) + 0.1), "inv_gap")
        res = tw.expect_weighted(dist, w, lambda t: np.sin(np.pi * t), n=200_000, seed=17)
        assert abs(res.mc - res.quad) < 3 * res.mc_stderr
