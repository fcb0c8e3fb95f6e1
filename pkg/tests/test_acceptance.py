"""End-to-end acceptance checks, one test per criterion.

Each test records what it measured before asserting, and a summary with one
PASS/FAIL line per criterion is written to the terminal when the module
finishes. Run on its own with ``python3 -m pytest tests/test_acceptance.py -v``.
"""

import math

import numpy as np
import pytest

from glmm_asym.asymvar import (
    CovarianceError,
    ExpMoments,
    PopulationModel,
    bracket_matrix,
    expectation_matrices,
    gaussian_closed_form,
    poisson_closed_form,
    two_term_covariances,
)
from glmm_asym.cli import main as cli_main
from glmm_asym.fitting import fit
from glmm_asym.matcalc import commutation_matrix, duplication_matrix, duplication_pinv, vec, vec_inv
from glmm_asym.model import GlmmSpec
from glmm_asym.oracle import miyata_rate, score_rates, u_star_rate
from glmm_asym.simulation import SimConfig, Truth, generate_dataset, run_coverage
from glmm_asym.studentize import asy_cov_estimates, e_hat, parameter_names

from conftest import random_spd

RESULTS: dict = {}
TITLES = {
    1: "matrix stack",
    2: "ratio expansion rate",
    3: "three-term mode expansion rate",
    4: "score approximation rates",
    5: "gaussian reduction",
    6: "poisson closed form",
    7: "schur identity",
    8: "studentization consistency",
    9: "logistic coverage",
    10: "simulation determinism",
}


def record(k: int, passed: bool, detail: str) -> None:
    RESULTS[k] = (bool(passed), detail)
    assert passed, detail


@pytest.fixture(scope="module", autouse=True)
def acceptance_summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = ["", "acceptance summary"]
    for k in sorted(TITLES):
        if k in RESULTS:
            ok, detail = RESULTS[k]
            lines.append(f"[{k:2d}] {'PASS' if ok else 'FAIL'}  {TITLES[k]}: {detail}")
        else:
            lines.append(f"[{k:2d}] FAIL  {TITLES[k]}: not measured (deselected, or errored before measuring)")
    for line in lines:
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)


def test_matrix_stack():
    rng = np.random.default_rng(1)
    printed = (
        duplication_matrix(2).tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]]
        and commutation_matrix(2).tolist() == [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]]
    )
    worst = 0.0
    for d in (1, 2, 3, 4):
        D, K, P = duplication_matrix(d), commutation_matrix(d), duplication_pinv(d)
        for _ in range(100):
            A, B, C, E = (rng.normal(size=(d, d)) for _ in range(4))
            b = rng.normal(size=(d, 1))
            S = random_spd(rng, d)
            Si = np.linalg.inv(S)
            a, bb = rng.normal(size=d), rng.normal(size=d * d)
            residuals = [
                K @ np.kron(A, b) - np.kron(b, A),
                K @ D - D,
                D.T @ vec(A) - D.T @ vec(A.T),
                D @ P @ np.kron(A, A) @ P.T - np.kron(A, A) @ P.T,
                np.linalg.inv(D.T @ np.kron(S, S) @ D) - P @ np.kron(Si, Si) @ P.T,
                vec(A @ B @ C) - np.kron(C.T, A) @ vec(B),
                np.kron(A, B) @ np.kron(C, E) - np.kron(A @ C, B @ E),
                np.kron(a[None, :], np.eye(d)) @ bb - vec_inv(bb, d) @ a,
                np.kron(np.eye(d), a[None, :]) @ bb - vec_inv(bb, d).T @ a,
            ]
            worst = max(worst, max(float(np.max(np.abs(r))) for r in residuals))
    record(1, printed and worst < 1e-10, f"printed D2/K2 exact={printed}, max identity error {worst:.1e} (limit 1e-10)")


def test_ratio_expansion_rate():
    res = miyata_rate()
    record(2, res.passed, f"log-log slope {res.slope:.3f} over n=16..1024 (limit -1.8)")


def test_mode_expansion_rate():
    res = u_star_rate()
    record(3, res.passed, f"slope {res.slope:.3f} over n=25..400, {res.replicates} groups per n (limit -1.3)")


def test_score_approximation_rates():
    rates = score_rates()
    parts = [f"{r.name} {r.slope:.3f} (limit {r.threshold})" for r in rates.results()]
    record(4, all(r.passed for r in rates.results()), ", ".join(parts))


def test_gaussian_reduction():
    rng = np.random.default_rng(5)
    worst = 0.0
    for d_R in (1, 2):
        X = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
        sigma = random_spd(rng, d_R, floor=0.2) * 0.5
        model = PopulationModel.from_sample(X, "gaussian", rng.normal(size=4), sigma, 0.8, d_R)
        rep = two_term_covariances(model, 150, 12)
        EXX = X.T @ X / X.shape[0]
        cb, cs = gaussian_closed_form(sigma, 0.8, EXX, 150, 12)
        for got, want in ((rep.cov_beta_two_term, cb), (rep.cov_vech_sigma_two_term, cs)):
            worst = max(worst, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))
    record(5, worst < 1e-6, f"max relative error {worst:.1e} for d_R in (1, 2) (limit 1e-6)")


def test_poisson_closed_form():
    worst = 0.0
    b0, s2 = 0.3, 0.6
    for b1 in (0.0, 0.8, -1.2):
        model = PopulationModel.uniform_design("poisson", [b0, b1], [[s2]], order=40)
        rep = two_term_covariances(model, 100, 10, tol=1e-10)
        closed = poisson_closed_form(b0, b1, s2, 1.0, ExpMoments.uniform(b1), 100, 10)
        worst = max(worst, float(np.max(np.abs(rep.cov_beta_two_term - closed))))
    c = 0.4
    degenerate_closed = degenerate_pipeline = False
    try:
        poisson_closed_form(b0, 1.0, s2, 1.0, (math.exp(c), c * math.exp(c), c * c * math.exp(c)), 100, 10)
    except CovarianceError:
        degenerate_closed = True
    try:
        flat = PopulationModel.from_sample(np.column_stack([np.ones(5), np.full(5, c)]), "poisson", [b0, 1.0], [[s2]])
        two_term_covariances(flat, 100, 10)
    except CovarianceError:
        degenerate_pipeline = True
    ok = worst < 1e-5 and degenerate_closed and degenerate_pipeline
    record(6, ok, f"max abs error {worst:.1e} for beta1 in (0, 0.8, -1.2) (limit 1e-5), degenerate X raises: "
                  f"closed form {degenerate_closed}, pipeline {degenerate_pipeline}")


def test_schur_identity():
    rng = np.random.default_rng(7)
    truth = Truth.default()
    exact = True
    worst = 0.0
    count = 0
    for family in ("bernoulli", "poisson", "gaussian"):
        for _ in range(3):
            X = np.column_stack([np.ones(200), rng.uniform(size=(200, 3))])
            beta = rng.normal(scale=0.5, size=4)
            model = PopulationModel.from_sample(X, family, beta, truth.sigma * 0.5, 1.0, 2)
            rep = two_term_covariances(model, 100, 10)
            E = rep.expectations
            exact &= bool(np.array_equal(rep.bracket_inverse[2:, 2:], rep.e_psi6_inverse))
            full = np.linalg.inv(bracket_matrix(E.lam_aa, E.lam_ab, E.e_psi6))[2:, 2:]
            worst = max(worst, float(np.max(np.abs(full - np.linalg.inv(E.e_psi6)) / np.max(np.abs(full)))))
            count += 1
    for seed in range(3):
        data = generate_dataset(60, 8, truth, np.random.default_rng([11, seed]))
        res = fit(data, GlmmSpec("bernoulli", 5, 2, "fixed"))
        cov = asy_cov_estimates(res, data).covariance
        exact &= bool(np.array_equal(cov.bracket_inverse[2:, 2:], cov.e_psi6_inverse))
        direct = np.linalg.inv(e_hat(res, data, "Psi6"))
        worst = max(worst, float(np.max(np.abs(cov.e_psi6_inverse - direct)) / np.max(np.abs(direct))))
        count += 1
    record(7, exact and worst < 1e-9, f"{count} instances, block identical to the inverse: {exact}, "
                                      f"dense-inverse relative gap {worst:.1e}")


def test_studentization_consistency():
    truth = Truth.default()
    population = PopulationModel.uniform_design("bernoulli", truth.beta, truth.sigma, 1.0, 2, order=8)
    target = expectation_matrices(population).e_psi6
    spec = GlmmSpec("bernoulli", 5, 2, "fixed")
    reps = 12
    means, ses, sizes = [], [], []
    for m in (100, 200, 400):
        n = m // 10
        dist = []
        for r in range(reps):
            data = generate_dataset(m, n, truth, np.random.default_rng([8, m, r]))
            res = fit(data, spec)
            dist.append(float(np.linalg.norm(e_hat(res, data, "Psi6") - target)))
        means.append(float(np.mean(dist)))
        ses.append(float(np.std(dist, ddof=1) / math.sqrt(reps)))
        sizes.append(m * n)
    ok = all(means[i + 1] <= means[i] + 2 * math.hypot(ses[i], ses[i + 1]) for i in range(2)) and means[2] < means[0]
    shown = ", ".join(f"mn={s}: {d:.4f} (se {e:.4f})" for s, d, e in zip(sizes, means, ses))
    record(8, ok, shown)


def test_logistic_coverage():
    config = SimConfig(m_grid=(100, 200), n_rule="m/10", replicates=200, alpha=0.05)
    run = run_coverage(config)
    names = parameter_names(5, 2)
    cov = {(r.m, r.parameter, r.method): r.coverage for r in run.records}
    focus = ["beta0", "beta1", "sigma11", "sigma12", "sigma22"]
    fixed_b = ["beta2", "beta3", "beta4"]
    a_vals = {p: cov[(200, p, "two-term")] for p in focus}
    part_a = all(0.92 <= v <= 0.98 for v in a_vals.values())
    part_b = all(
        abs(cov[(100, p, "two-term")] - 0.95) <= abs(cov[(100, p, "one-term")] - 0.95) for p in ("beta0", "beta1")
    )
    idx = [names.index(p) for p in fixed_b]
    same = all(np.array_equal(run.indicators(m)[:, 0, idx], run.indicators(m)[:, 1, idx]) for m in config.m_grid)
    c_vals = {(m, p): cov[(m, p, "two-term")] for m in config.m_grid for p in fixed_b}
    part_c = same and all(0.92 <= v <= 0.98 for v in c_vals.values())
    failures = {m: sum(1 for o in run.outcomes if o.m == m and o.covered is None) for m in config.m_grid}
    detail = (
        f"(a) {part_a} m=200 two-term " + " ".join(f"{p}={v:.3f}" for p, v in a_vals.items())
        + f"; (b) {part_b} m=100 "
        + " ".join(f"{p} 1t={cov[(100, p, 'one-term')]:.3f}/2t={cov[(100, p, 'two-term')]:.3f}" for p in ("beta0", "beta1"))
        + f"; (c) {part_c} identical={same} "
        + " ".join(f"{p}@{m}={v:.3f}" for (m, p), v in c_vals.items())
        + f"; failed fits {failures}"
    )
    record(9, part_a and part_b and part_c, detail)


def test_simulation_determinism(tmp_path, monkeypatch):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("m_grid = 40, 60\nn_rule = m/10\nreplicates = 4\nseed = 99\n")
    runs = []
    for label, workers, threads in (("a", "1", "1"), ("b", "1", "1"), ("c", "2", "2")):
        monkeypatch.setenv("OMP_NUM_THREADS", threads)
        out = tmp_path / label
        code = cli_main(["simulate", "--config", str(cfg), "--out", str(out), "--workers", workers])
        assert code in (0, 2)
        runs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    identical = runs[0] == runs[1] == runs[2] and len(runs[0]) > 0
    record(10, identical, f"{len(runs[0])} CSV files byte-identical across two serial runs and a two-worker run: {identical}")
