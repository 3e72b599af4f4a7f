"""Pairings, posterior marginalization, expectation/pairing commutation."""

import numpy as np
import pytest

from gmkit import linparam as lp
from gmkit.bregman import AtomicDistribution, nonneg_orthant
from gmkit.errors import DimensionMismatch
from gmkit.flowpaths import linear_scheduler, scheduler_velocity, velocity_linear_param


class TestPairing:
    def test_euclidean(self):
        assert lp.pair(lp.euclidean(2), [1.0, 2.0], [3.0, 4.0]) == pytest.approx(11.0)

    def test_diag_weighted(self):
        assert lp.pair(lp.diag_weighted([1.0, 2.0]), [1.0, 1.0], [1.0, 1.0]) == pytest.approx(3.0)

    def test_bilinearity(self):
        rng = np.random.default_rng(2)
        space = lp.diag_weighted(rng.uniform(0.5, 2.0, 4))
        for _ in range(50):
            kf, F, G = rng.normal(size=(3, 4))
            a, b = rng.normal(size=2)
            lhs = lp.pair(space, kf, a * F + b * G)
            rhs = a * lp.pair(space, kf, F) + b * lp.pair(space, kf, G)
            assert abs(lhs - rhs) < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            lp.pair(lp.euclidean(2), [1.0], [1.0, 2.0])


class TestMarginalTarget:
    def test_midpoint(self):
        post = AtomicDistribution([[0.0], [1.0]], [0.5, 0.5])
        out = lp.marginal_target(post, lambda z: np.array([1.0 + 2.0 * z[0]]))
        np.testing.assert_allclose(out, [2.0])

    def test_point_mass(self):
        post = AtomicDistribution([[3.0]], [1.0])
        out = lp.marginal_target(post, lambda z: np.array([z[0] ** 2]))
        np.testing.assert_allclose(out, [9.0])

    def test_matches_brute_force_sum(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(0.1, 2.0, size=(8, 1))
        w = rng.uniform(0.2, 1.0, 8)
        w /= w.sum()
        post = AtomicDistribution(pts, w)

        def cond(z):
            return np.array([z[0], z[0] ** 2, np.exp(-z[0])])

        got = lp.marginal_target(post, cond, domain=nonneg_orthant(3))
        want = sum(wi * cond(zi) for zi, wi in zip(pts, w))
        np.testing.assert_allclose(got, want, atol=1e-14)


class TestCommutation:
    def test_point_mass_is_exact_zero(self):
        post = AtomicDistribution([[1.7]], [1.0])
        res = lp.commutation_check(lp.euclidean(2), post, [0.3, -1.2], lambda z: np.array([z[0], 2 * z[0]]))
        assert res == 0.0

    def test_two_atoms_euclidean(self):
        post = AtomicDistribution([[0.0], [1.0]], [0.5, 0.5])
        res = lp.commutation_check(lp.euclidean(1), post, [2.0], lambda z: np.array([np.sin(z[0])]))
        assert res < 1e-15

    def test_diag_weighted_random_posteriors(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            space = lp.diag_weighted(rng.uniform(0.5, 3.0, 3))
            pts = rng.normal(size=(8, 2))
            w = rng.uniform(0.1, 1.0, 8)
            w /= w.sum()
            post = AtomicDistribution(pts, w)
            kf = rng.normal(size=3)

            def cond(z):
                return np.array([z[0], z[1] ** 2, z[0] * z[1]])

            assert lp.commutation_check(space, post, kf, cond) < 1e-12


class TestDirectSum:
    def test_two_scalar_blocks(self):
        blocks = [
            lp.LinearParam(space_at=lambda t, x: lp.euclidean(1), K_apply=lambda t, x, f: np.array([2.0])),
            lp.LinearParam(space_at=lambda t, x: lp.euclidean(1), K_apply=lambda t, x, f: np.array([-1.0])),
        ]
        total = lp.direct_sum(blocks)
        f = lp.gaussian_bump()
        assert total.space_at(0.1, 0.0).dim == 2
        got = total.generator_apply(0.1, 0.0, f, [1.0, 3.0])
        want = blocks[0].generator_apply(0.1, 0.0, f, [1.0]) + blocks[1].generator_apply(0.1, 0.0, f, [3.0])
        assert got == pytest.approx(want)

    def test_velocity_two_block_split(self):
        # <A^T grad f, x1> + <b^T grad f, 1> equals grad f . (A x1 + b)
        sched = linear_scheduler()
        blocks = velocity_linear_param(sched)
        total = lp.direct_sum(blocks)
        vel = scheduler_velocity(sched)
        f = lp.gaussian_bump(center=0.3, width=0.8)
        rng = np.random.default_rng(4)
        for _ in range(20):
            t = rng.uniform(0.05, 0.9)
            x = rng.normal(size=1)
            x1 = rng.normal(size=1)
            F = np.concatenate([x1, [1.0]])
            got = total.generator_apply(t, x, f, F)
            grad = f.grad(x)
            want = float(grad @ (vel.A_at(t, x) @ x1 + vel.b_at(t, x)))
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_three_random_blocks_additive(self):
        rng = np.random.default_rng(12)
        mats = [rng.normal(size=(d,)) for d in (2, 1, 3)]
        blocks = [
            lp.LinearParam(
                space_at=lambda t, x, d=m.size: lp.euclidean(d),
                K_apply=lambda t, x, f, m=m: m * f.eval(np.atleast_1d(x))[0]
                if f.family != "finite_state"
                else m,
            )
            for m in mats
        ]
        total = lp.direct_sum(blocks)
        f = lp.poly_gaussian(1, 1.5)
        Fs = [rng.normal(size=m.size) for m in mats]
        got = total.generator_apply(0.4, 0.7, f, np.concatenate(Fs))
        want = sum(b.generator_apply(0.4, 0.7, f, F) for b, F in zip(blocks, Fs))
        assert abs(got - want) < 1e-12


class TestLinearity:
    def test_finite_state_map_is_exactly_linear(self):
        # K f = (f(target) - f(x))_j on a 3-state space
        targets = np.array([1, 2])

        def K_apply(t, x, f):
            vals = f.eval(np.arange(3))
            return vals[targets] - vals[int(x)]

        param = lp.LinearParam(space_at=lambda t, x: lp.euclidean(2), K_apply=K_apply)
        rng = np.random.default_rng(6)
        for _ in range(50):
            f = lp.finite_state_function(rng.normal(size=3))
            g = lp.finite_state_function(rng.normal(size=3))
            a, b = rng.normal(size=2)
            # no truncation error on finite spaces, only float re-association
            assert lp.check_linearity(param, 0.2, 0, f, g, a, b) < 1e-12

    def test_smooth_catalog_linearity(self):
        sched = linear_scheduler()
        block = velocity_linear_param(sched)[0]
        rng = np.random.default_rng(9)
        for _ in range(50):
            f = lp.gaussian_bump(rng.normal(), rng.uniform(0.5, 2.0))
            g = lp.poly_gaussian(rng.integers(0, 3), rng.uniform(0.8, 2.0))
            a, b = rng.normal(size=2)
            res = lp.check_linearity(block, rng.uniform(0.1, 0.9), rng.normal(size=1), f, g, a, b)
            assert res < 1e-12
