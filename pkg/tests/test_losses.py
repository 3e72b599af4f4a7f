"""Loss estimators: MC vs exact tiers, gap constancy, gradients, training."""

import numpy as np
import pytest
from scipy import optimize

from gmkit import bregman as br
from gmkit import jumpkernels as jk
from gmkit import losses as ls
from gmkit import timeweight as tw
from gmkit.errors import NonpositiveScaling
from gmkit.flowpaths import GaussianMixtureFlowPath, GMMTarget, linear_scheduler


def masked_spec(vocab=2, prior=None, divergence=None, weight=None, time_dist=None, n=20_000, seed=0):
    path = jk.masked_path_kernel(vocab, jk.linear_kappa(), prior=prior)
    return ls.LossSpec(
        path=path,
        divergence=divergence or br.bce(vocab),
        time_dist=time_dist or tw.uniform(),
        weight=weight or tw.const_weight(1.0),
        n_samples=n,
        seed=seed,
    )


def mask_state_theta(nt, n_states, out_dim, values):
    """Full TimeBinModel theta with only the mask-state slice set."""
    full = np.zeros((nt, n_states, out_dim))
    full[:, 0, :] = np.asarray(values, float)
    return full.ravel()


def flip_spec(divergence=None, weight=None, time_dist=None, n=20_000, seed=0, prior=None):
    path = jk.TwoStateFlipPath(jk.linear_kappa(), prior=prior)
    return ls.LossSpec(
        path=path,
        divergence=divergence or br.poisson(1),
        time_dist=time_dist or tw.uniform(),
        weight=weight or tw.const_weight(1.0),
        n_samples=n,
        seed=seed,
    )


class TestModels:
    @pytest.mark.parametrize(
        "make",
        [
            lambda: ls.TimePolyModel(n_states=3, out_dim=2, degree=2, link="sigmoid",
                                     theta=np.random.default_rng(0).normal(size=18)),
            lambda: ls.TimePolyModel(n_states=2, out_dim=1, degree=1, link="exp",
                                     theta=np.random.default_rng(1).normal(size=4)),
            lambda: ls.TimeBinModel(t_edges=np.linspace(0, 1, 5), n_states=3, out_dim=2, link="sigmoid",
                                    theta=np.random.default_rng(2).normal(size=24)),
            lambda: ls.MLPModel(in_dim=2, hidden=6, out_dim=2,
                                theta=np.random.default_rng(3).normal(size=2 * 6 + 6 + 6 * 2 + 2) * 0.5),
        ],
    )
    def test_jacobian_matches_finite_differences(self, make):
        model = make()
        t, x = 0.37, 1
        jac = model.jacobian(t, x)
        h = 1e-6
        for i in range(model.n_params):
            e = np.zeros(model.n_params)
            e[i] = h
            up = model.with_theta(model.theta + e).predict(t, x)
            dn = model.with_theta(model.theta - e).predict(t, x)
            fd = (up - dn) / (2 * h)
            np.testing.assert_allclose(jac[:, i], fd, rtol=1e-5, atol=1e-8)

    def test_binned_linear_jacobian(self):
        model = ls.BinnedLinearModel(
            t_edges=np.linspace(0, 1, 4),
            x_edges=np.linspace(-2, 2, 5),
            theta=np.random.default_rng(4).normal(size=3 * 4 * 2),
        )
        t, x = 0.5, np.array([0.3])
        jac = model.jacobian(t, x)
        h = 1e-6
        for i in np.nonzero(np.abs(jac[0]) > 0)[0]:
            e = np.zeros(model.n_params)
            e[i] = h
            fd = (model.with_theta(model.theta + e).predict(t, x) - model.with_theta(model.theta - e).predict(t, x)) / (2 * h)
            np.testing.assert_allclose(jac[:, i], fd, rtol=1e-6)

    def test_with_theta_copies(self):
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 3), n_states=2, out_dim=1)
        clone = model.with_theta(model.theta + 1.0)
        assert not np.shares_memory(clone.theta, model.theta)
        assert np.all(model.theta == 0.0)


class TestMonteCarloLoss:
    def test_degenerate_path_zero_loss(self):
        # single-token masked path with an exact identity-link predictor
        spec = masked_spec(vocab=1, divergence=br.mse(1), n=2000)
        model = ls.TimeBinModel(t_edges=np.array([0.0, 1.0]), n_states=2, out_dim=1,
                                link="identity", theta=np.array([1.0, 0.0]))
        val, se = ls.cgm_loss(spec, model)
        assert val == 0.0
        assert se == 0.0

    def test_mc_matches_exact_at_truth_within_noise(self):
        spec = masked_spec(vocab=2, divergence=br.poisson(2), n=40_000)
        truth = ls.TimeBinModel(t_edges=np.array([0.0, 1.0]), n_states=3, out_dim=2,
                                link="exp", theta=mask_state_theta(1, 3, 2, np.log([0.5, 0.5])))
        val, se = ls.cgm_loss(spec, truth)
        exact = ls.cgm_loss_exact(spec, truth)
        assert abs(val - exact) < 3 * se

    def test_two_seeds_agree_within_pooled_error(self):
        spec_a = masked_spec(seed=11, n=20_000)
        spec_b = masked_spec(seed=12, n=20_000)
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 3), n_states=3, out_dim=2,
                                link="sigmoid", theta=np.random.default_rng(5).normal(size=12))
        va, sa = ls.cgm_loss(spec_a, model)
        vb, sb = ls.cgm_loss(spec_b, model)
        assert abs(va - vb) < 6 * np.hypot(sa, sb)

    def test_jobs_do_not_change_result(self):
        spec = masked_spec(n=30_000)
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 3), n_states=3, out_dim=2)
        v1, s1 = ls.cgm_loss(spec, model, jobs=1)
        v2, s2 = ls.cgm_loss(spec, model, jobs=4)
        assert v1 == v2 and s1 == s2
        g1 = ls.grad_loss(spec, model, jobs=1)
        g2 = ls.grad_loss(spec, model, jobs=4)
        np.testing.assert_array_equal(g1, g2)


class TestExactLoss:
    def test_truth_model_zero_gm_loss(self):
        prior = np.array([0.3, 0.7])
        spec = masked_spec(vocab=2, prior=prior, divergence=br.mse(2))
        truth = ls.TimeBinModel(t_edges=np.array([0.0, 1.0]), n_states=3, out_dim=2,
                                link="identity", theta=mask_state_theta(1, 3, 2, prior))
        assert ls.gm_loss_exact(spec, truth) < 1e-28

    def test_time_scaled_divergence_equals_external_weight(self):
        base = br.bce(2)
        spec_w = masked_spec(divergence=base, weight=tw.const_weight(2.0))
        spec_ts = masked_spec(divergence=br.make_time_scaled(base, lambda t: 2.0),
                              weight=tw.const_weight(1.0))
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 3), n_states=3, out_dim=2,
                                theta=np.random.default_rng(6).normal(size=12))
        assert ls.gm_loss_exact(spec_w, model) == pytest.approx(ls.gm_loss_exact(spec_ts, model), rel=1e-14)

    def test_exact_gradients_match_finite_differences(self):
        spec = flip_spec(divergence=br.poisson(1))
        model = ls.TimePolyModel(n_states=2, out_dim=1, degree=2, link="exp",
                                 theta=np.random.default_rng(7).normal(size=6) * 0.4)
        for loss_fn, grad_fn in ((ls.gm_loss_exact, ls.grad_gm_exact), (ls.cgm_loss_exact, ls.grad_cgm_exact)):
            grad = grad_fn(spec, model, t_nodes=201)
            h = 1e-6
            for i in range(model.n_params):
                e = np.zeros(model.n_params)
                e[i] = h
                fd = (loss_fn(spec, model.with_theta(model.theta + e), t_nodes=201)
                      - loss_fn(spec, model.with_theta(model.theta - e), t_nodes=201)) / (2 * h)
                assert abs(grad[i] - fd) < 1e-6 * max(1.0, abs(fd))

    def test_stationary_at_marginal_target(self):
        prior = np.array([0.25, 0.75])
        spec = masked_spec(vocab=2, prior=prior, divergence=br.bce(2))
        logit = np.log(prior / (1 - prior))
        truth = ls.TimeBinModel(t_edges=np.array([0.0, 1.0]), n_states=3, out_dim=2,
                                link="sigmoid", theta=mask_state_theta(1, 3, 2, logit))
        g_exact = ls.grad_gm_exact(spec, truth)
        assert np.max(np.abs(g_exact)) < 1e-12
        g_cgm = ls.grad_cgm_exact(spec, truth)
        assert np.max(np.abs(g_cgm)) < 1e-12


class TestGapConstancy:
    def test_point_mass_latent_gap_is_zero(self):
        spec = masked_spec(vocab=1, divergence=br.mse(1))
        rng = np.random.default_rng(8)
        models = [ls.TimePolyModel(n_states=2, out_dim=1, degree=1, link="identity",
                                   theta=rng.normal(size=4)) for _ in range(4)]
        report = ls.prop2_gap_test(spec, models, t_nodes=201)
        assert report.passed
        np.testing.assert_allclose(report.gaps, 0.0, atol=1e-12)

    def test_flip_path_time_varying_posterior(self):
        spec = flip_spec(divergence=br.poisson(1), weight=tw.eps_regularized_weight(0.1),
                         prior=np.array([0.35, 0.65]))
        rng = np.random.default_rng(9)
        models = [ls.TimePolyModel(n_states=2, out_dim=1, degree=2, link="exp",
                                   theta=rng.normal(size=6) * 0.4) for _ in range(6)]
        report = ls.prop2_gap_test(spec, models, t_nodes=201)
        assert report.gap_spread < 1e-9
        assert report.cross_check_err < 1e-9
        assert report.grad_rel_err < 1e-8

    def test_masked_bce_with_beta_time(self):
        spec = masked_spec(vocab=2, divergence=br.bce(2), time_dist=tw.beta(2, 2))
        rng = np.random.default_rng(10)
        models = [ls.TimeBinModel(t_edges=np.linspace(0, 1, 4), n_states=3, out_dim=2,
                                  link="sigmoid", theta=rng.normal(size=18)) for _ in range(6)]
        report = ls.prop2_gap_test(spec, models, t_nodes=201)
        assert report.passed


class TestGradientUnbiasedness:
    def test_mc_gradient_unbiased_against_exact(self):
        spec = masked_spec(vocab=2, divergence=br.bce(2), n=4000)
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 3), n_states=3, out_dim=2,
                                link="sigmoid", theta=np.random.default_rng(11).normal(size=12) * 0.5)
        exact = ls.grad_cgm_exact(spec, model)
        reps = 200
        grads = np.empty((reps, model.n_params))
        for r in range(reps):
            rep_spec = masked_spec(vocab=2, divergence=br.bce(2), n=4000, seed=1000 + r)
            grads[r] = ls.grad_loss(rep_spec, model.with_theta(model.theta))
        mean = grads.mean(axis=0)
        se = grads.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(mean - exact) < 4 * se + 1e-12)

    def test_mc_gradient_small_at_truth(self):
        prior = np.array([0.5, 0.5])
        spec = masked_spec(vocab=2, prior=prior, divergence=br.bce(2), n=50_000)
        truth = ls.TimeBinModel(t_edges=np.array([0.0, 1.0]), n_states=3, out_dim=2,
                                link="sigmoid", theta=np.zeros(6))
        g = ls.grad_loss(spec, truth)
        # crude scale for the gradient noise at zero gradient
        assert np.max(np.abs(g)) < 3 * 0.5 / np.sqrt(spec.n_samples)


class TestNormalEquationsOracle:
    """Identity-link [1, x] predictor on a single-Gaussian endpoint law."""

    M_MEAN, M_SD = 1.0, 0.6

    def _spec(self, n=4096, seed=0):
        target = GMMTarget([[self.M_MEAN]], [[self.M_SD**2]], [1.0])
        path = GaussianMixtureFlowPath(target, linear_scheduler())
        return ls.LossSpec(path=path, divergence=br.mse(1), time_dist=tw.uniform(),
                           weight=tw.const_weight(1.0), n_samples=n, seed=seed)

    def _model(self, theta):
        def features_batch(t_arr, x_arr):
            xv = np.asarray(x_arr, float).reshape(len(t_arr), -1)[:, 0]
            out = np.empty((len(t_arr), 1, 2))
            out[:, 0, 0] = 1.0
            out[:, 0, 1] = xv
            return out

        return ls.LinearModel(theta=np.asarray(theta, float),
                              features=lambda t, x: np.array([[1.0, float(np.atleast_1d(x)[0])]]),
                              features_batch=features_batch)

    def _normal_equations(self):
        # closed-form Gaussian moments, Simpson in t
        m, s2 = self.M_MEAN, self.M_SD**2
        ts, wts = ls.simpson_nodes(801)
        a = ts
        sig2 = (1 - ts) ** 2
        ex = a * m
        exx = a * a * (s2 + m * m) + sig2
        ex1 = np.full_like(ts, m)
        exx1 = a * (s2 + m * m)
        M = np.zeros((2, 2))
        v = np.zeros(2)
        M[0, 0] = wts @ np.ones_like(ts)
        M[0, 1] = M[1, 0] = wts @ ex
        M[1, 1] = wts @ exx
        v[0] = wts @ ex1
        v[1] = wts @ exx1
        return M, v

    def test_exact_mc_gradient_matches_least_squares(self):
        M, v = self._normal_equations()
        theta = np.array([0.3, -0.2])
        want = 2 * (M @ theta - v)
        reps = 200
        grads = np.empty((reps, 2))
        for r in range(reps):
            grads[r] = ls.grad_loss(self._spec(seed=500 + r), self._model(theta))
        se = grads.std(axis=0, ddof=1) / np.sqrt(reps)
        np.testing.assert_array_less(np.abs(grads.mean(axis=0) - want), 4 * se)

    def test_training_recovers_posterior_mean_coefficients(self):
        M, v = self._normal_equations()
        theta_star = np.linalg.solve(M, v)
        spec = self._spec(n=4096, seed=3)
        result = ls.train(spec, self._model([0.0, 0.0]), steps=20_000, lr=0.05, decay=0.99985)
        np.testing.assert_allclose(result.model.theta, theta_star, rtol=0.02)
        assert result.losses[-1] < result.losses[0]

    def test_zero_steps_leave_theta_unchanged(self):
        model = self._model([0.11, 0.22])
        result = ls.train(self._spec(), model, steps=0, lr=0.1)
        np.testing.assert_array_equal(result.model.theta, [0.11, 0.22])
        assert result.final_step == 0


class TestExactTraining:
    def test_masked_rates_converge_to_prior(self):
        prior = np.array([0.3, 0.7])
        spec = masked_spec(vocab=2, prior=prior, divergence=br.bce(2))
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 5), n_states=3, out_dim=2, link="sigmoid")
        result = ls.train(spec, model, steps=400, lr=2.0, exact=True, t_nodes=201)
        for t in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(result.model.predict(t, 0), prior, atol=0.02)

    def test_minimizer_invariant_under_reweighting(self):
        # pointwise-expressive model: argmin identical for any a.e.-positive weight
        prior = np.array([0.4, 0.6])
        base = masked_spec(vocab=2, prior=prior, divergence=br.bce(2))
        tilted = masked_spec(vocab=2, prior=prior, divergence=br.bce(2),
                             weight=tw.eps_regularized_weight(0.1))
        model = ls.TimeBinModel(t_edges=np.linspace(0, 1, 5), n_states=3, out_dim=2, link="sigmoid")

        def solve(spec):
            res = optimize.minimize(
                lambda th: ls.gm_loss_exact(spec, model.with_theta(th), t_nodes=201),
                np.zeros(model.n_params),
                jac=lambda th: ls.grad_gm_exact(spec, model.with_theta(th), t_nodes=201),
                method="L-BFGS-B",
                tol=1e-14,
            )
            return res.x

        th_base, th_tilted = solve(base), solve(tilted)
        probe = np.linspace(0.05, 0.95, 9)
        for t in probe:
            pa = model.with_theta(th_base).predict(t, 0)
            pb = model.with_theta(th_tilted).predict(t, 0)
            np.testing.assert_allclose(pa, pb, atol=1e-6)


class TestJointRateTables:
    def _table(self, seed=0):
        return ls.EFRateTable.random(np.random.default_rng(seed), nx=3, nz=3, scale=1.0)

    def test_marginalized_rates_solve_marginal_kfe(self):
        table = self._table()
        assert table.marginal_kfe_residual(np.linspace(0.0, 1.0, 9)) < 1e-10

    def test_gap_constant_with_internal_scalings(self):
        table = self._table(1)
        div = br.poisson(2)
        a = lambda t: 1.0 + t
        b = lambda t: 2.0 - t
        w = lambda t: np.ones_like(np.asarray(t, float))
        rng = np.random.default_rng(12)
        models = [ls.TimePolyModel(n_states=3, out_dim=2, degree=1, link="exp",
                                   theta=rng.normal(size=12) * 0.3) for _ in range(5)]
        gaps = [
            ls.ef_loss(table, m, div, a, b, w, time_dist=tw.uniform(), t_nodes=201)
            - ls.ef_loss(table, m, div, a, b, w, time_dist=tw.uniform(), t_nodes=201, against="marginal")
            for m in models
        ]
        gaps = np.asarray(gaps)
        assert np.max(np.abs(gaps - gaps[0])) < 1e-9
        direct = ls.ef_constant_term(table, div, a, w, time_dist=tw.uniform(), t_nodes=201)
        assert np.max(np.abs(gaps - direct)) < 1e-9

    def test_hazard_rescaling_recovers_rates(self):
        table = self._table(2)
        kappa = jk.linear_kappa()
        div = br.mse(2)
        for t in (0.2, 0.5, 0.8):
            h = kappa.hazard(t)
            for x in range(3):
                v_star = ls.ef_pointwise_minimizer(table, div, a_val=1.0 / h, t=t, x=x)
                u = table.marginal_x_target_all(np.array([t]), x)[0]
                np.testing.assert_allclose(jk.hazard_rescaled_rates(v_star, h), u, atol=1e-8)

    def test_scaling_equivalence_by_homogeneity(self):
        table = self._table(3)
        c = lambda t: 1.0 + 0.5 * np.asarray(t, float)
        one = lambda t: np.ones_like(np.asarray(t, float))
        model = ls.TimePolyModel(n_states=3, out_dim=2, degree=1, link="exp",
                                 theta=np.random.default_rng(13).normal(size=12) * 0.3)
        # Poisson divergence is 1-homogeneous: a=b=c(t) equals weighting by c(t)
        lhs = ls.ef_loss(table, model, br.poisson(2), c, c, one, time_dist=tw.uniform(), t_nodes=201)
        rhs = ls.ef_loss(table, model, br.poisson(2), one, one, c, time_dist=tw.uniform(), t_nodes=201)
        assert lhs == pytest.approx(rhs, rel=1e-12)
        # squared error is 2-homogeneous: matching weight is c(t)^2
        c2 = lambda t: c(t) ** 2
        lhs = ls.ef_loss(table, model, br.mse(2), c, c, one, time_dist=tw.uniform(), t_nodes=201)
        rhs = ls.ef_loss(table, model, br.mse(2), one, one, c2, time_dist=tw.uniform(), t_nodes=201)
        assert lhs == pytest.approx(rhs, rel=1e-12)
        # and c(t)^1 does not match for squared error
        rhs_wrong = ls.ef_loss(table, model, br.mse(2), one, one, c, time_dist=tw.uniform(), t_nodes=201)
        assert abs(lhs - rhs_wrong) > 1e-6

    def test_nonpositive_scaling_rejected(self):
        table = self._table(4)
        model = ls.TimePolyModel(n_states=3, out_dim=2, degree=0, link="exp")
        bad = lambda t: np.asarray(t, float) - 0.5
        with pytest.raises(NonpositiveScaling):
            ls.ef_loss(table, model, br.mse(2), bad, lambda t: 1.0, lambda t: 1.0,
                       time_dist=tw.uniform(), t_nodes=201)

    def test_fixed_time_degenerate_mode(self):
        table = self._table(5)
        model = ls.TimePolyModel(n_states=3, out_dim=2, degree=0, link="exp",
                                 theta=np.random.default_rng(14).normal(size=6) * 0.3)
        one = lambda t: np.ones_like(np.asarray(t, float))
        val = ls.ef_loss(table, model, br.poisson(2), one, one, one, fixed_t=0.4)
        gap = val - ls.ef_loss(table, model, br.poisson(2), one, one, one, fixed_t=0.4, against="marginal")
        direct = ls.ef_constant_term(table, br.poisson(2), one, one, fixed_t=0.4)
        assert gap == pytest.approx(direct, abs=1e-12)
