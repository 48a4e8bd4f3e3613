"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line (shown in the pytest summary and
printed when run as a script).  Wall-clock limits are part of each check.
The learning criteria are slow: about 13 minutes on one core.
"""

import functools
import math
import statistics
import sys
import time

import numpy as np
import pytest

from oracles import linear_ensemble_oracle, linear_pac2_oracle
from pac2bayes import bounds as b
from pac2bayes import evaluation as ev
from pac2bayes import experiment as exp
from pac2bayes import grad as g
from pac2bayes import objectives as O
from pac2bayes.models import GaussianLinearModel, MlpRegressionModel
from pac2bayes.posteriors import (
    DiracPosterior,
    FullGaussian,
    GaussianPrior,
    MeanFieldGaussian,
    ParticleEnsemble,
)
from pac2bayes.scenarios import training_data

RESULTS = []
SEEDS = (0, 1, 2)
RES = 1e-3


def record(num, ok, detail, seconds, limit):
    ok = bool(ok) and seconds < limit
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail} ({seconds:.1f}s, limit {limit:g}s)"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def toys():
    rng = np.random.default_rng(2024)
    return [b.reference_toy()] + [b.random_toy(rng, 3, 2, misspecified=True) for _ in range(5)]


@functools.lru_cache(maxsize=None)
def run_test_ll(scenario, method, seed, n_train=None):
    rep = exp.run(exp.RunConfig(scenario, method, seed=seed, n_train=n_train))
    return rep["metrics"]["test_ll"]


def medians(scenario, methods, n_train=None):
    return {m: statistics.median(run_test_ll(scenario, m, s, n_train) for s in SEEDS) for m in methods}


def fmt(d):
    return ", ".join(f"{k} {v:.2f}" for k, v in d.items())


# exact toy criteria --------------------------------------------------------

def test_c01_gap_chain():
    tick = time.perf_counter()
    worst = -np.inf
    for toy in toys():
        grid = b.simplex_grid(toy.size, RES)
        h = b.entropy(toy)
        code = b.expected_code_length(toy, grid)
        j2 = b.jensen2_bound(toy, grid)
        j = b.jensen_bound(toy, grid)
        worst = max(worst, np.max(h - code), np.max(code - j2), np.max(j2 - j))
    record(1, worst <= 1e-10, f"largest chain violation {worst:.2e} (tol 1e-10)",
           time.perf_counter() - tick, 1)


def test_c02_second_order_minimizer_is_better():
    tick = time.perf_counter()
    diffs = []
    for toy in toys():
        rj, _ = b.grid_minimize("jensen", toy)
        rj2, _ = b.grid_minimize("jensen2", toy)
        diffs.append(float(b.expected_code_length(toy, rj) - b.expected_code_length(toy, rj2)))
    ok = min(diffs) >= -1e-12 and max(diffs[1:]) >= 1e-4
    record(2, ok, f"L(J-min) - L(J2-min) per toy: {', '.join(f'{d:.2e}' for d in diffs)}",
           time.perf_counter() - tick, 1)


def test_c03_perfect_specification_collapse():
    tick = time.perf_counter()
    worst = 0.0
    for toy in toys():
        for row in toy.likelihood:
            perfect = toy.with_nu(row)
            h = b.entropy(perfect)
            for sel in ("code_length", "jensen2", "jensen"):
                rho, _ = b.grid_minimize(sel, perfect)
                worst = max(worst, abs(float(b.expected_code_length(perfect, rho)) - h))
    record(3, worst <= 2 * RES, f"largest |L - H| {worst:.2e} (tol {2 * RES:g})",
           time.perf_counter() - tick, 1)


def _reference_draws():
    toy = b.reference_toy()
    return toy, toy.sample(50, np.random.default_rng(0))


def test_c04_bayes_posterior_minimizes_first_order():
    tick = time.perf_counter()
    toy, data = _reference_draws()
    post = b.bayes_posterior(toy, data)
    at_post = float(b.empirical_first_order(toy, data, post))
    _, best = b.grid_minimize(lambda t, r: b.empirical_first_order(t, data, r), toy, RES)
    # grid optimum can sit at most one grid step away from the true optimum
    ok = at_post <= best + 1e-12 and best - at_post <= 1e-4
    record(4, ok, f"objective at posterior {at_post:.8f}, grid minimum {best:.8f}",
           time.perf_counter() - tick, 1)


def test_c05_fixed_point_iteration():
    tick = time.perf_counter()
    toy, data = _reference_draws()
    fp = b.iterate_pac2(toy, data, tol=1e-12, max_iter=10_000)
    at_fp = float(b.empirical_second_order(toy, data, fp.rho))
    _, best = b.grid_minimize(lambda t, r: b.empirical_second_order(t, data, r), toy, RES)
    ok = fp.converged and abs(at_fp - best) <= 1e-3
    record(5, ok, f"converged={fp.converged} after {fp.iterations} steps (last TV {fp.last_change:.2e}), "
                  f"objective gap {at_fp - best:.2e}", time.perf_counter() - tick, 5)


# gradients -----------------------------------------------------------------

PRIOR = GaussianPrior()
LIN = GaussianLinearModel()


def _linear_data():
    rng = np.random.default_rng(11)
    x = rng.uniform(-3, 3, 20)
    return x, 1 + x + 2 * rng.normal(size=20)


def _gaussian_cases(rho, model, x, y, variant, eps):
    """Builder and an oracle that differentiates with the stabilizers frozen."""
    def builder(lam):
        return O.pac2_variational_objective(lam, rho, model, x, y, PRIOR, eps, variant)

    def frozen_at(lam):
        th = np.asarray(rho.reparameterize(lam, eps.reshape((-1,) + eps.shape[2:])))
        ll = np.asarray(model.log_likelihood(th, x, y))
        stab = O.pac2_stabilizers(ll[0::2], ll[1::2], 0.1, variant)
        return lambda l: O.pac2_variational_objective(l, rho, model, x, y, PRIOR, eps, variant, stabilizers=stab)
    return builder, frozen_at


def test_c06_gradients_match_finite_differences():
    tick = time.perf_counter()
    x, y = _linear_data()
    mlp = MlpRegressionModel()
    rng = np.random.default_rng(5)
    worst, oracle_worst, count = 0.0, 0.0, 0

    def check(builder, lam, oracle=None):
        nonlocal worst, count
        worst = max(worst, g.check_gradient(builder, lam, 1e-5, oracle))
        count += 1

    for _ in range(20):
        # point estimates and plain variational objectives
        theta = rng.normal(size=2)
        check(lambda t: O.map_objective(t, LIN, x, y, PRIOR), theta)
        mf = MeanFieldGaussian(rng.normal(size=2), rng.normal(size=2))
        full = FullGaussian(rng.normal(size=2), np.tril(rng.normal(size=(2, 2))) + 2 * np.eye(2))
        for rho, fam in ((mf, "meanfield"), (full, "full")):
            lam = rho.to_vector()
            eps1 = rng.standard_normal(rho.noise_shape(3))
            check(lambda l: O.elbo_objective(l, rho, LIN, x, y, PRIOR, eps1), lam)
            eps = rng.standard_normal((2, 2, 2))
            for variant in ("simple", "tight_h"):
                builder, frozen_at = _gaussian_cases(rho, LIN, x, y, variant, eps)
                check(builder, lam, frozen_at(lam))
                th = np.asarray(rho.reparameterize(lam, eps.reshape(4, 2)))
                ll = np.asarray(LIN.log_likelihood(th, x, y))
                m, c = O.pac2_stabilizers(ll[0::2], ll[1::2], 0.1, variant)
                _, grad = g.evaluate_with_gradient(builder, lam)
                _, ref = linear_pac2_oracle(lam, fam, x, y, eps, m, c)
                oracle_worst = max(oracle_worst, g.relative_error(grad, ref))
        parts = rng.normal(size=(3, 2))
        ens = ParticleEnsemble(parts)
        check(lambda l: O.pac_ensemble_objective(ens.unpack(l), LIN, x, y, PRIOR), ens.to_vector())
        ll = np.asarray(LIN.log_likelihood(parts, x, y))
        for variant in ("simple", "tight_h"):
            stab = O.ensemble_stabilizers(ll, 0.1, variant)
            builder = lambda l: O.pac2_ensemble_objective(ens.unpack(l), LIN, x, y, PRIOR, variant)
            frozen = lambda l: O.pac2_ensemble_objective(ens.unpack(l), LIN, x, y, PRIOR, variant, stabilizers=stab)
            check(builder, ens.to_vector(), frozen)
            _, grad = g.evaluate_with_gradient(builder, ens.to_vector())
            _, ref = linear_ensemble_oracle(parts, x, y, *stab)
            oracle_worst = max(oracle_worst, g.relative_error(grad, ref))
    # the network model, fewer points since each check costs 2 * 61 evaluations per parameter block
    xm, ym = x[:8], y[:8]
    for _ in range(3):
        rho = MeanFieldGaussian(0.5 * rng.normal(size=mlp.n_params), rng.normal(size=mlp.n_params) - 2)
        lam = rho.to_vector()
        eps = rng.standard_normal((1, 2, mlp.n_params))
        builder, frozen_at = _gaussian_cases(rho, mlp, xm, ym, "tight_h", eps)
        check(builder, lam, frozen_at(lam))
        parts = 0.5 * rng.normal(size=(2, mlp.n_params))
        ens = ParticleEnsemble(parts)
        stab = O.ensemble_stabilizers(np.asarray(mlp.log_likelihood(parts, xm, ym)), 0.1, "tight_h")
        check(lambda l: O.pac2_ensemble_objective(ens.unpack(l), mlp, xm, ym, PRIOR),
              ens.to_vector(),
              lambda l: O.pac2_ensemble_objective(ens.unpack(l), mlp, xm, ym, PRIOR, stabilizers=stab))
    ok = worst <= 1e-5 and oracle_worst <= 1e-10
    record(6, ok, f"{count} finite-difference checks, worst rel. error {worst:.1e}; "
                  f"hand-derived oracle worst {oracle_worst:.1e}", time.perf_counter() - tick, 30)


def test_c07_h_lower_bound_and_limit():
    tick = time.perf_counter()
    alpha = -np.random.default_rng(7).uniform(1e-6, 20, 10_000)
    h = np.asarray(O.h_of_alpha(alpha))
    limit = float(O.h_of_alpha(-1e-4))
    ok = np.all(h >= 0.5) and abs(limit - 0.5) <= 1e-3
    record(7, ok, f"min h {h.min():.6f} over 1e4 samples, h(-1e-4) = {limit:.6f}",
           time.perf_counter() - tick, 1)


# learning criteria ---------------------------------------------------------

BASE = ("map", "vi", "pac2", "pac2h")


def test_c08_perfect_specification_parity():
    tick = time.perf_counter()
    vals = {(m, s): run_test_ll("linear_perfect", m, s) for m in BASE for s in SEEDS}
    ok = True
    for s in SEEDS:
        row = [vals[m, s] for m in BASE]
        ok &= all(-1.55 <= v <= -1.35 for v in row) and max(row) - min(row) <= 0.1
    detail = "; ".join(f"seed {s}: " + " ".join(f"{vals[m, s]:.3f}" for m in BASE) for s in SEEDS)
    record(8, ok, f"test LL map/vi/pac2/pac2h {detail}", time.perf_counter() - tick, 300)


def test_c09_misspecification_ordering():
    tick = time.perf_counter()
    med = medians("linear_misspec", BASE)
    ok = (med["pac2h"] >= med["pac2"] + 1 and med["pac2"] + 1 >= med["vi"] + 2
          and med["vi"] >= med["map"] - 0.5)
    record(9, ok, f"medians {fmt(med)}", time.perf_counter() - tick, 600)


def test_c10_sinusoidal_misspecification():
    tick = time.perf_counter()
    med = medians("sin_misspec", ("vi", "pac2h"), 2000)
    record(10, med["pac2h"] >= med["vi"] + 8, f"medians {fmt(med)}", time.perf_counter() - tick, 1200)


def test_c11_ensemble_diversity():
    tick = time.perf_counter()
    med = medians("sin_misspec", ("ens_pac", "ens_pac2", "ens_pac2h"), 2000)
    ok = med["ens_pac2h"] >= med["ens_pac2"] + 5 and med["ens_pac2"] + 5 >= med["ens_pac"] + 10
    record(11, ok, f"medians {fmt(med)}", time.perf_counter() - tick, 1200)


def test_c12_multimodal():
    tick = time.perf_counter()
    med = medians("multimodal", ("vi", "ens_pac2h"), 2000)
    record(12, med["ens_pac2h"] >= med["vi"] + 5, f"medians {fmt(med)}", time.perf_counter() - tick, 1200)


def test_c13_flat_minima():
    tick = time.perf_counter()
    coeff, vhat = {}, {}
    for m in BASE:
        cfg = exp.RunConfig("flat_minima", m, seed=0)
        rep = exp.run(cfg)
        sc = cfg.resolved().scenario_obj()
        x, y = training_data(sc, 0)
        sens = ev.perturbation_sensitivity(np.asarray(rep["mode"]), sc.model(), x, y, 100, 0.01,
                                           np.random.default_rng(0))
        coeff[m], vhat[m] = sens.coefficient, rep["metrics"]["vhat_h_sum"]
    ok = (coeff["pac2"] < coeff["map"] / 5 and coeff["pac2h"] < coeff["map"] / 5
          and vhat["pac2h"] > vhat["vi"])
    record(13, ok, f"coefficients % {fmt(coeff)}; V_h sums {fmt(vhat)}", time.perf_counter() - tick, 600)


def test_c14_degenerate_variance_is_zero():
    tick = time.perf_counter()
    x, y = _linear_data()
    mlp = MlpRegressionModel()
    atom_lin = np.array([0.4, 0.8])
    atom_mlp = 0.3 * np.random.default_rng(3).normal(size=mlp.n_params)
    values = []
    for model, atom in ((LIN, atom_lin), (mlp, atom_mlp)):
        same = np.tile(atom, (3, 1))
        # a zero-width Gaussian puts both members of every pair on the atom
        rho = MeanFieldGaussian(atom, np.full(atom.size, -np.inf))
        eps = np.random.default_rng(0).standard_normal((4, 2, atom.size))
        for variant in ("simple", "tight_h"):
            values.append(float(O.pac2_ensemble_terms(same, model, x, y, PRIOR, variant)["diversity"]))
            th = np.repeat(atom[None, :], 2, axis=0)
            ll = np.asarray(model.log_likelihood(th, x, y))
            m, c = O.pac2_stabilizers(ll[0], ll[1], 0.1, variant)
            a = np.exp(ll - m)
            values.append(float(np.mean(c * 0.5 * (a[0] - a[1]) ** 2)))
            values.append(ev.vhat_at_solution(DiracPosterior(atom), model, x, y, variant)["sum"])
            values.append(ev.vhat_at_solution(ParticleEnsemble(same), model, x, y, variant)["sum"])
            with np.errstate(all="ignore"):
                values.append(float(O.pac2_variational_terms(rho.to_vector(), rho, model, x, y, PRIOR,
                                                             eps, variant)["variance"]))
    toy = b.reference_toy()
    for k in range(toy.size):
        vertex = np.eye(toy.size)[k]
        values.append(float(b.variance_term(toy, vertex)))
        values.append(float(b.empirical_variance(toy, toy.sample(20, np.random.default_rng(k)), vertex)))
    ok = all(v == 0.0 for v in values)
    record(14, ok, f"{len(values)} degenerate variance/diversity terms, largest |value| "
                   f"{max(abs(v) for v in values):.1e}", time.perf_counter() - tick, 1)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
