import numpy as np
import pytest
from scipy.stats import multivariate_normal

from glmm_asym.fitting import fit
from glmm_asym.integrate import QuadratureError
from glmm_asym.matcalc import duplication_matrix, vec, vech_inv
from glmm_asym.model import GlmmSpec, GroupedDataset
from glmm_asym.oracle import (
    RateResult,
    ScoreTriple,
    approx_scores,
    exact_scores,
    group_sums,
    log_log_slope,
    miyata_rate,
    miyata_ratio,
    miyata_terms,
    moment_checks,
    quartic_problem,
    ratio_by_quadrature_1d,
    run_suite,
    u_star_expansion_check,
)
from glmm_asym.simulation import Truth, generate_dataset

SIGMA2 = np.array([[0.56, -0.34], [-0.34, 0.89]])


def gaussian_group(rng, n=7, d_F=3, d_R=2, sigma=SIGMA2, phi=0.6):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d_F - 1))])
    beta = rng.normal(size=d_F)
    u = rng.multivariate_normal(np.zeros(d_R), sigma)
    y = X @ beta + X[:, :d_R] @ u + rng.normal(0, np.sqrt(phi), n)
    return (X, y), beta, u


def conjugate_scores(group, beta, sigma, phi, d_R):
    X, y = group
    XA, XB = X[:, :d_R], X[:, d_R:]
    r = y - X @ beta
    Si = np.linalg.inv(sigma)
    P = np.linalg.inv(Si + XA.T @ XA / phi)
    mu = P @ XA.T @ r / phi
    S_A = Si @ mu
    S_B = XB.T @ (r - XA @ mu) / phi
    S_C = 0.5 * duplication_matrix(d_R).T @ vec(Si @ (P + np.outer(mu, mu) - sigma) @ Si)
    return S_A, S_B, S_C


class TestExactScores:
    @pytest.mark.parametrize("d_R,phi", [(1, 1.0), (2, 0.6), (2, 2.5)])
    def test_gaussian_conjugate_closed_form(self, rng, d_R, phi):
        sigma = SIGMA2[:d_R, :d_R]
        group, beta, _ = gaussian_group(rng, d_R=d_R, sigma=sigma, phi=phi)
        ex = exact_scores(group, beta, sigma, phi, "gaussian", d_R)
        S_A, S_B, S_C = conjugate_scores(group, beta, sigma, phi, d_R)
        np.testing.assert_allclose(ex.S_A, S_A, atol=1e-8)
        np.testing.assert_allclose(ex.S_B, S_B, atol=1e-8)
        np.testing.assert_allclose(ex.S_C, S_C, atol=1e-8)

    def test_gaussian_scores_are_marginal_gradients(self, rng):
        phi = 0.8
        group, beta, _ = gaussian_group(rng, phi=phi)
        X, y = group
        ex = exact_scores(group, beta, SIGMA2, phi, "gaussian", 2)

        def loglik(b, v):
            S = vech_inv(v)
            return multivariate_normal(X @ b, phi * np.eye(len(y)) + X[:, :2] @ S @ X[:, :2].T).logpdf(y)

        v0 = np.array([SIGMA2[0, 0], SIGMA2[1, 0], SIGMA2[1, 1]])
        h = 1e-6
        gb = [(loglik(beta + h * e, v0) - loglik(beta - h * e, v0)) / (2 * h) for e in np.eye(3)]
        gv = [(loglik(beta, v0 + h * e) - loglik(beta, v0 - h * e)) / (2 * h) for e in np.eye(3)]
        np.testing.assert_allclose(np.concatenate([ex.S_A, ex.S_B]), gb, atol=1e-6)
        np.testing.assert_allclose(ex.S_C, gv, atol=1e-6)

    @pytest.mark.slow
    def test_score_unbiased_over_simulated_responses(self):
        rng = np.random.default_rng(31)
        beta = np.array([0.2, -0.6])
        sigma = np.array([[0.7]])
        R = 10_000
        scores = np.empty((R, 3))
        for k in range(R):
            X = np.column_stack([np.ones(5), rng.uniform(size=5)])
            u = rng.normal(0, np.sqrt(sigma[0, 0]), 1)
            y = (rng.random(5) < 1 / (1 + np.exp(-(X @ beta + X[:, 0] * u)))).astype(float)
            scores[k] = exact_scores((X, y), beta, sigma, 1.0, "bernoulli", 1).vector()
        z = np.abs(scores.mean(axis=0)) / (scores.std(axis=0, ddof=1) / np.sqrt(R))
        assert np.all(z < 4), z

    def test_summed_scores_vanish_at_gaussian_fit(self):
        rng = np.random.default_rng(13)
        groups = [gaussian_group(rng, n=6, d_F=2, d_R=1, sigma=np.array([[0.5]]), phi=1.0)[0] for _ in range(25)]
        X = np.vstack([g[0] for g in groups])
        y = X @ [0.4, -0.3] + np.repeat(rng.normal(0, 0.7, 25), 6) + rng.normal(size=150)
        data = GroupedDataset(X, y, np.arange(0, 151, 6))
        res = fit(data, GlmmSpec("gaussian", 2, 1))
        total = sum(
            exact_scores(data.group(i), res.beta_hat, res.sigma_hat, res.phi_hat, "gaussian", 1).vector()
            for i in range(data.m)
        )
        assert np.max(np.abs(total)) < 10 * 1e-6

    def test_dimension_limit(self, rng):
        group, beta, _ = gaussian_group(rng, d_F=3, d_R=3, sigma=np.eye(3))
        with pytest.raises(ValueError):
            exact_scores(group, beta, np.eye(3), 1.0, "gaussian", 3)

    def test_failure_is_reported(self, rng):
        group, beta, _ = gaussian_group(rng)
        with pytest.raises(QuadratureError):
            exact_scores(group, beta, SIGMA2, 0.6, "poisson", 2, order=3)

    def test_score_triple_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ScoreTriple([np.nan], [], [0.0])


class TestApproxScores:
    def test_gaussian_first_order_forms(self, rng):
        phi = 0.6
        group, beta, u = gaussian_group(rng, phi=phi)
        X, y = group
        ap = approx_scores(group, beta, SIGMA2, phi, "gaussian", 2, u)
        XA, XB = X[:, :2], X[:, 2:]
        resid = y - X @ beta - XA @ u
        GA, GB = XA.T @ resid, XB.T @ resid
        H = XA.T @ XA
        Si = np.linalg.inv(SIGMA2)
        Hi = np.linalg.inv(H)
        S_B = (GB - XB.T @ XA @ Hi @ (GA - phi * Si @ u)) / phi
        S_A = Si @ (u + Hi @ GA - phi * Hi @ Si @ u)
        np.testing.assert_allclose(ap.S_B, S_B, atol=1e-10)
        np.testing.assert_allclose(ap.S_A, S_A, atol=1e-10)

    def test_gaussian_gap_to_exact_is_second_order(self, rng):
        phi = 1.0
        gaps = []
        for n in (50, 400):
            X = np.column_stack([np.ones(n), rng.normal(size=n)])
            beta = np.array([0.3, 0.7])
            u = np.array([0.5])
            y = X @ beta + u[0] + rng.normal(size=n)
            ex = exact_scores((X, y), beta, [[0.5]], phi, "gaussian", 1)
            ap = approx_scores((X, y), beta, [[0.5]], phi, "gaussian", 1, u)
            gaps.append(abs(ex.S_A[0] - ap.S_A[0]))
        assert gaps[1] < gaps[0] / 8

    def test_singular_curvature(self):
        X = np.column_stack([np.ones(4), np.ones(4), np.arange(4.0)])
        with pytest.raises(np.linalg.LinAlgError):
            approx_scores((X, np.zeros(4)), np.zeros(3), SIGMA2, 1.0, "gaussian", 2, np.zeros(2))

    def test_group_sums_gaussian(self, rng):
        group, beta, u = gaussian_group(rng)
        s = group_sums(group, beta, u, "gaussian", 2)
        X = group[0]
        np.testing.assert_allclose(s.H_AA, X[:, :2].T @ X[:, :2], rtol=1e-13)
        assert not np.any(s.H3_AAA) and not np.any(s.H3_AAB)


class TestUStarExpansion:
    def test_gaussian_is_exact(self, rng):
        group, beta, u = gaussian_group(rng)
        u_newton, u_three, gap = u_star_expansion_check(group, beta, u, "gaussian", 2)
        assert gap < 1e-8

    def test_zero_effect_zero_residual(self, rng):
        X = np.column_stack([np.ones(6), rng.normal(size=(6, 2))])
        beta = np.array([0.1, 0.2, 0.3])
        u_newton, u_three, gap = u_star_expansion_check((X, X @ beta), beta, np.zeros(2), "gaussian", 2)
        np.testing.assert_allclose(u_newton, 0.0, atol=1e-12)
        np.testing.assert_array_equal(u_three, 0.0)

    def test_bernoulli_gap_shrinks(self):
        truth = Truth.default()
        gaps = {}
        for n in (50, 800):
            vals = []
            for k in range(10):
                data, U = generate_dataset(1, n, truth, np.random.default_rng([n, k]), return_effects=True)
                vals.append(u_star_expansion_check(data.group(0), truth.beta, U[0], "bernoulli", 2)[2])
            gaps[n] = np.mean(vals)
        assert gaps[800] < gaps[50] / 16


class TestMiyata:
    def test_constant_g(self):
        val = miyata_ratio(lambda x: 2.5, lambda x: 1 + x * x, lambda x: np.cosh(x - 0.2), 30, 0.0)
        assert val == 2.5

    def test_odd_symmetry(self):
        assert miyata_ratio(lambda x: x, lambda x: 1.0, lambda x: x * x / 2, 10, 0.4) == pytest.approx(0.0, abs=1e-9)

    def test_supplied_derivatives_match_finite_differences(self):
        prob = quartic_problem()
        g, c, h = prob.pop("g"), prob.pop("c"), prob.pop("h")
        a = miyata_ratio(g, c, h, 64, 0.3, **prob)
        b = miyata_ratio(g, c, h, 64, 0.3)
        assert a == pytest.approx(b, abs=1e-6)

    def test_error_decays_quadratically(self):
        r = miyata_rate(analytic=True)
        assert r.slope <= -1.8

    def test_two_dimensional_case(self):
        from scipy.integrate import dblquad

        n = 200
        g = lambda x: x[0] ** 2 + x[1]
        c = lambda x: 1.0 + 0.2 * x[0]
        h = lambda x: 0.5 * (x[0] ** 2 + x[1] ** 2) + x[0] ** 4 / 8 + 0.1 * x[0] * x[1]
        approx = miyata_ratio(g, c, h, n, np.array([0.2, -0.1]))
        w = lambda a, b: c((a, b)) * np.exp(-n * h((a, b)))
        lim = 1.0
        num = dblquad(lambda b, a: g((a, b)) * w(a, b), -lim, lim, -lim, lim, epsabs=1e-14)[0]
        den = dblquad(lambda b, a: w(a, b), -lim, lim, -lim, lim, epsabs=1e-14)[0]
        assert abs(approx - num / den) < 5 / n**2

    def test_no_minimum(self):
        with pytest.raises(RuntimeError):
            miyata_terms(lambda x: 1.0, lambda x: 1.0, lambda x: -x * x, 10, 0.5)

    def test_reference_ratio_gaussian(self):
        val = ratio_by_quadrature_1d(lambda x: x * x, lambda x: 1.0, lambda x: x * x / 2, 25)
        assert val == pytest.approx(1 / 25, rel=1e-12)


class TestRates:
    def test_slope_of_power_law(self):
        ns = [10, 20, 40, 80]
        assert log_log_slope(ns, [3 * n**-1.5 for n in ns]) == pytest.approx(-1.5)

    def test_slope_needs_two_points(self):
        with pytest.raises(ValueError):
            log_log_slope([10], [1.0])

    def test_rate_result_pass_flag(self):
        assert RateResult("x", [1, 2], [1, 0.25], -2.0, -1.8).passed
        assert not RateResult("x", [1, 2], [1, 0.5], -1.0, -1.8).passed


class TestMoments:
    @pytest.mark.parametrize("family", ["gaussian", "bernoulli", "poisson"])
    def test_residual_moment_identities(self, family):
        rng = np.random.default_rng(17)
        truth = Truth.default()
        data, U = generate_dataset(1, 8, truth, rng, return_effects=True)
        for chk in moment_checks(data.X, truth.beta, U[0], family, 2, 1.0, 20_000, rng):
            assert chk.max_z < 4, chk.name

    def test_suite_names(self):
        with pytest.raises(ValueError):
            run_suite("everything")
        results = run_suite("moments", seed=3)
        assert results and all(r.passed for r in results)
