"""Jump kernels, masked and flip paths, hazard algebra."""

import numpy as np
import pytest

from gmkit import jumpkernels as jk
from gmkit.bregman import AtomicDistribution
from gmkit.errors import NonpositiveHazard, SchedulerInvalid, ZeroRate
from gmkit.simulate import kfe_residual


def random_kernel(rng, n_states=4, n_comp=8):
    """Dense random kernel on a small space with z-scaled multipliers."""
    targets = {x: tuple(rng.choice([y for y in range(n_states) if y != x], size=n_comp)) for x in range(n_states)}
    h = {x: rng.uniform(0.3, 2.0, n_comp) for x in range(n_states)}
    base = {x: rng.uniform(0.0, 1.5, n_comp) for x in range(n_states)}
    space = jk.FiniteSpace(tuple(f"s{i}" for i in range(n_states)))
    return jk.JumpKernelSpec(
        space=space,
        targets=lambda t, x: targets[x],
        hazards=lambda t, x: h[x] * (1.0 + 0.5 * t),
        cond_multipliers=lambda t, x, z: base[x] * (1.0 + 0.3 * float(z)),
    )


class TestRates:
    def test_total_rate_closed_case(self):
        space = jk.FiniteSpace(("a", "b", "c"))
        kernel = jk.JumpKernelSpec(
            space=space,
            targets=lambda t, x: (1, 2),
            hazards=lambda t, x: np.array([1.0, 2.0]),
            cond_multipliers=lambda t, x, z: np.array([0.5, 0.25]),
        )
        assert jk.total_rate(kernel, 0.3, 0, None) == pytest.approx(1.0)

    def test_zero_multipliers_absorb(self):
        space = jk.FiniteSpace(("a", "b"))
        kernel = jk.JumpKernelSpec(
            space=space,
            targets=lambda t, x: (1 - x,),
            hazards=lambda t, x: np.array([2.0]),
            cond_multipliers=lambda t, x, z: np.array([0.0]),
        )
        assert jk.total_rate(kernel, 0.1, 0, None) == 0.0
        with pytest.raises(ZeroRate):
            jk.normalized_jump_dist(kernel, 0.1, 0, None)

    def test_total_rate_matches_brute_sum(self):
        rng = np.random.default_rng(3)
        kernel = random_kernel(rng)
        for _ in range(20):
            t, x, z = rng.uniform(0, 0.9), int(rng.integers(4)), int(rng.integers(2))
            want = float(np.sum(np.asarray(kernel.hazards(t, x)) * np.asarray(kernel.cond_multipliers(t, x, z))))
            assert jk.total_rate(kernel, t, x, z) == pytest.approx(want, rel=1e-14)


class TestJumpDistribution:
    def test_single_component_point_mass(self):
        space = jk.FiniteSpace(("a", "b"))
        kernel = jk.JumpKernelSpec(
            space=space,
            targets=lambda t, x: (1,),
            hazards=lambda t, x: np.array([3.0]),
            cond_multipliers=lambda t, x, z: np.array([0.7]),
        )
        dist = jk.normalized_jump_dist(kernel, 0.2, 0, None)
        assert dist.points.tolist() == [[1.0]]
        assert dist.weights.tolist() == [1.0]

    def test_weights_proportional_to_hazard_times_multiplier(self):
        space = jk.FiniteSpace(("a", "b", "c"))
        kernel = jk.JumpKernelSpec(
            space=space,
            targets=lambda t, x: (1, 2),
            hazards=lambda t, x: np.array([1.0, 1.0]),
            cond_multipliers=lambda t, x, z: np.array([1.0, 3.0]),
        )
        dist = jk.normalized_jump_dist(kernel, 0.0, 0, None)
        np.testing.assert_allclose(dist.weights, [0.25, 0.75])

    def test_normalization_on_random_kernels(self):
        rng = np.random.default_rng(5)
        kernel = random_kernel(rng)
        for _ in range(20):
            t, x, z = rng.uniform(0, 0.9), int(rng.integers(4)), int(rng.integers(2))
            dist = jk.normalized_jump_dist(kernel, t, x, z)
            assert dist.weights.sum() == pytest.approx(1.0, abs=1e-14)
            h = np.asarray(kernel.hazards(t, x))
            r = np.asarray(kernel.cond_multipliers(t, x, z))
            lam = float(h @ r)
            # weights track h*R up to target dedup
            assert dist.weights.min() > 0
            assert lam > 0


class TestMarginalMultipliers:
    def test_point_mass_posterior(self):
        rng = np.random.default_rng(1)
        kernel = random_kernel(rng)
        post = AtomicDistribution([[1.0]], [1.0])
        got = jk.marginal_multipliers(kernel, post, 0.4, 2)
        np.testing.assert_allclose(got, kernel.cond_multipliers(0.4, 2, 1.0))

    def test_two_latents_average(self):
        space = jk.FiniteSpace(("a", "b"))
        kernel = jk.JumpKernelSpec(
            space=space,
            targets=lambda t, x: (1,),
            hazards=lambda t, x: np.array([1.0]),
            cond_multipliers=lambda t, x, z: np.array([2.0 * float(z)]),
        )
        post = AtomicDistribution([[0.0], [1.0]], [0.5, 0.5])
        np.testing.assert_allclose(jk.marginal_multipliers(kernel, post, 0.1, 0), [1.0])

    def test_matches_enumeration(self):
        rng = np.random.default_rng(9)
        kernel = random_kernel(rng)
        zs = rng.uniform(0, 1, size=(6, 1))
        w = rng.uniform(0.1, 1, 6)
        w /= w.sum()
        post = AtomicDistribution(zs, w)
        got = jk.marginal_multipliers(kernel, post, 0.3, 1)
        want = sum(wi * np.asarray(kernel.cond_multipliers(0.3, 1, zi[0])) for zi, wi in zip(zs, w))
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_marginal_total_rate_is_posterior_expectation(self):
        rng = np.random.default_rng(10)
        kernel = random_kernel(rng)
        zs = rng.uniform(0, 1, size=(5, 1))
        w = rng.uniform(0.1, 1, 5)
        w /= w.sum()
        post = AtomicDistribution(zs, w)
        t, x = 0.25, 0
        marg = jk.marginal_multipliers(kernel, post, t, x)
        lam_marg = float(np.asarray(kernel.hazards(t, x)) @ marg)
        lam_exp = sum(wi * jk.total_rate(kernel, t, x, zi[0]) for zi, wi in zip(zs, w))
        assert lam_marg == pytest.approx(lam_exp, abs=1e-14)


class TestHazardAlgebra:
    def test_rescale(self):
        np.testing.assert_allclose(jk.hazard_rescaled_rates([1.0], 2.0), [2.0])

    def test_rescale_fixed_point(self):
        u = np.array([0.3, 1.2])
        h = 1.7
        np.testing.assert_allclose(jk.hazard_rescaled_rates(u / h, h), u, atol=1e-15)

    def test_nonpositive_hazard_rejected(self):
        with pytest.raises(NonpositiveHazard):
            jk.hazard_rescaled_rates([1.0], 0.0)

    def test_weighted_norm_bound(self):
        rng = np.random.default_rng(17)
        kernel = random_kernel(rng)
        for _ in range(100):
            t, x, z = rng.uniform(0, 0.9), int(rng.integers(4)), int(rng.integers(2))
            assert jk.hazard_norm_bound_residual(kernel, t, x, z) <= 1e-12


class TestSchedulers:
    def test_linear_hazard(self):
        k = jk.linear_kappa()
        assert k.hazard(0.5) == pytest.approx(2.0)

    def test_invalid_scheduler_rejected(self):
        bad = jk.KappaScheduler(kappa=lambda t: t * t, kappa_dot=lambda t: -1.0)
        with pytest.raises(SchedulerInvalid):
            bad.validate()

    def test_cosine_endpoints(self):
        jk.cosine_kappa().validate()


class TestMaskedPath:
    def test_symmetric_midpoint(self):
        path = jk.masked_path_kernel(2, jk.linear_kappa())
        p = path.p_t(0.5)
        assert p[0] == pytest.approx(0.5)
        np.testing.assert_allclose(path.posterior(0.5, 0), [0.5, 0.5])

    def test_token_state_posterior_is_point_mass(self):
        path = jk.masked_path_kernel(3, jk.linear_kappa(), prior=np.array([0.5, 0.3, 0.2]))
        np.testing.assert_allclose(path.posterior(0.7, 2), [0.0, 1.0, 0.0])
        assert path.target_dim(2) == 0

    def test_posterior_at_mask_equals_prior(self):
        prior = np.array([0.6, 0.4])
        path = jk.masked_path_kernel(2, jk.cosine_kappa(), prior=prior)
        for t in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(path.posterior(t, 0), prior)

    def test_exact_kfe_by_finite_differences(self):
        path = jk.masked_path_kernel(2, jk.linear_kappa(), prior=np.array([0.25, 0.75]))
        grid = np.linspace(0.01, 0.99, 50)
        res, _ = kfe_residual(path.p_t, path.exact_rate_matrix, grid, dt=1e-4)
        assert res < 1e-6

    def test_sampler_matches_marginals(self):
        path = jk.masked_path_kernel(2, jk.linear_kappa(), prior=np.array([0.3, 0.7]))
        rng = np.random.default_rng(4)
        ts = np.full(200_000, 0.6)
        x, z, active = path.sample(rng, ts.size, ts)
        counts = np.bincount(x, minlength=3) / ts.size
        np.testing.assert_allclose(counts, path.p_t(0.6), atol=0.005)
        assert np.all(active == (x == 0))


class TestFlipPath:
    def test_marginals_interpolate(self):
        path = jk.TwoStateFlipPath(jk.linear_kappa(), prior=np.array([0.2, 0.8]))
        np.testing.assert_allclose(path.p_t(0.0), [0.5, 0.5])
        np.testing.assert_allclose(path.p_t(1.0), [0.2, 0.8])

    def test_posterior_moves_with_time(self):
        path = jk.TwoStateFlipPath(jk.linear_kappa())
        early = path.posterior(0.05, 0)
        late = path.posterior(0.95, 0)
        assert early[1] == pytest.approx(0.5, abs=0.05)
        assert late[1] < 0.05

    def test_exact_kfe(self):
        path = jk.TwoStateFlipPath(jk.linear_kappa(), prior=np.array([0.35, 0.65]))
        grid = np.linspace(0.01, 0.99, 50)
        res, _ = kfe_residual(path.p_t, path.exact_rate_matrix, grid, dt=1e-4)
        assert res < 1e-6
