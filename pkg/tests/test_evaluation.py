import math

import numpy as np
import pytest

from pac2bayes import evaluation as ev
from pac2bayes.models import GaussianLinearModel, MlpRegressionModel
from pac2bayes.posteriors import DiracPosterior, GaussianPrior, MeanFieldGaussian, ParticleEnsemble

LIN = GaussianLinearModel()


def linear_data(n, seed, sd=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, n)
    return x, 1 + x + sd * rng.normal(size=n)


def test_dirac_at_truth_hits_gaussian_entropy():
    x, y = linear_data(1_000_000, 0)
    score = ev.predictive_log_likelihood(DiracPosterior([1.0, 1.0]), LIN, x, y)
    assert abs(score.value - (-0.5 * math.log(2 * math.pi * math.e))) < 0.005
    assert score.mc_stderr == 0.0


def test_identical_particles_equal_single_model():
    x, y = linear_data(500, 1)
    atom = np.array([0.9, 1.1])
    single = ev.predictive_log_likelihood(DiracPosterior(atom), LIN, x, y)
    triple = ev.predictive_log_likelihood(ParticleEnsemble(np.tile(atom, (3, 1))), LIN, x, y)
    assert single.value == triple.value


def test_doubling_samples_within_mc_error():
    x, y = linear_data(2000, 2, sd=3.0)
    rho = MeanFieldGaussian.from_std([1.0, 1.0], [0.4, 0.3])
    a = ev.predictive_log_likelihood(rho, LIN, x, y, 2000, np.random.default_rng(0))
    b = ev.predictive_log_likelihood(rho, LIN, x, y, 4000, np.random.default_rng(1))
    assert abs(a.value - b.value) < 3 * max(a.mc_stderr, b.mc_stderr)
    assert a.mc_stderr > 0


def test_empty_test_set():
    with pytest.raises(ValueError):
        ev.predictive_log_likelihood(DiracPosterior([0.0, 0.0]), LIN, [], [])


def test_mixture_beats_average_component():
    x, y = linear_data(300, 3, sd=2.0)
    rho = MeanFieldGaussian.from_std([1.0, 1.0], [0.5, 0.5])
    theta = rho.sample(np.random.default_rng(4), 50)
    mixture = ev.predictive_log_likelihood(ParticleEnsemble(theta), LIN, x, y).value
    components = np.mean([ev.predictive_log_likelihood(DiracPosterior(t), LIN, x, y).value for t in theta])
    assert mixture >= components


def test_bands_dirac():
    grid = np.linspace(-3, 3, 7)
    bands = ev.uncertainty_bands(DiracPosterior([1.0, 1.0]), LIN, grid, 100, np.random.default_rng(0))
    assert np.all(bands["epistemic_sd"] == 0.0)
    assert np.all(np.abs(bands["total_sd"] - 1.0) < 0.15)
    assert np.allclose(bands["mean"], 1 + grid)


def test_bands_decomposition():
    grid = np.linspace(-3, 3, 9)
    rho = MeanFieldGaussian.from_std([1.0, 1.0], [0.5, 0.2])
    bands = ev.uncertainty_bands(rho, LIN, grid, 10_000, np.random.default_rng(1))
    assert np.all(bands["epistemic_sd"] <= bands["total_sd"] + 0.02)
    with pytest.raises(ValueError):
        ev.uncertainty_bands(rho, LIN, grid, 1)


def test_perturbation_zero_variance():
    x, y = linear_data(25, 5)
    sens = ev.perturbation_sensitivity(np.array([1.0, 1.0]), LIN, x, y, 100, 0.0, np.random.default_rng(0))
    assert sens.coefficient == 0.0


def test_perturbation_chi_square():
    m, lam = 40, 3.0
    loss = lambda th: 0.5 * lam * np.sum(th ** 2, axis=-1)
    sens = ev.perturbation_coefficient(np.zeros(m), loss, 20_000, 0.01, np.random.default_rng(1))
    assert sens.coefficient == pytest.approx(math.sqrt(2 / m) * 100, rel=0.03)


def test_perturbation_deterministic_and_duplication_invariant():
    x, y = linear_data(25, 6)
    theta = np.array([0.8, 1.2])
    a = ev.perturbation_sensitivity(theta, LIN, x, y, rng=np.random.default_rng(3))
    b = ev.perturbation_sensitivity(theta, LIN, x, y, rng=np.random.default_rng(3))
    assert a.coefficient == b.coefficient
    d = ev.perturbation_sensitivity(theta, LIN, np.tile(x, 2), np.tile(y, 2), rng=np.random.default_rng(3))
    assert d.coefficient == pytest.approx(a.coefficient, rel=1e-12)


def test_perturbation_rejects_nonpositive_mean():
    with pytest.raises(ValueError):
        ev.perturbation_coefficient(np.zeros(2), lambda th: -np.ones(th.shape[0]), 10, 0.01)


def test_vhat_degenerate():
    x, y = linear_data(25, 7)
    assert ev.vhat_at_solution(DiracPosterior([1.0, 1.0]), LIN, x, y)["sum"] == 0.0
    same = ParticleEnsemble(np.tile([1.0, 1.0], (3, 1)))
    for variant in ("simple", "tight_h"):
        assert ev.vhat_at_solution(same, LIN, x, y, variant)["sum"] == 0.0


def test_vhat_mc_convergence():
    x, y = linear_data(25, 8, sd=3.0)
    rho = MeanFieldGaussian.from_std([1.0, 1.0], [0.5, 0.3])
    a = ev.vhat_at_solution(rho, LIN, x, y, "tight_h", 1000, rng=np.random.default_rng(0))
    b = ev.vhat_at_solution(rho, LIN, x, y, "tight_h", 10_000, rng=np.random.default_rng(1))
    assert a["sum"] == pytest.approx(b["sum"], rel=0.05)
    assert a["mean"] == pytest.approx(a["sum"] / 25)


def test_run_certificate_orders():
    x, y = linear_data(100, 9)
    rho = MeanFieldGaussian.from_std([1.0, 1.0], [0.1, 0.1])
    c1 = ev.run_certificate(rho, LIN, x, y, GaussianPrior(), 1)
    c2 = ev.run_certificate(rho, LIN, x, y, GaussianPrior(), 2)
    assert c1.order == 1 and c2.order == 2 and c2.variance >= 0
    assert c1.value >= c1.loss
    cd = ev.run_certificate(DiracPosterior([1.0, 1.0]), LIN, x, y, GaussianPrior(), 2)
    assert cd.variance == 0.0


def test_mlp_score_finite():
    m = MlpRegressionModel(hidden=3)
    rho = MeanFieldGaussian.initialize(m.n_params, np.random.default_rng(0))
    x, y = linear_data(50, 10)
    s = ev.predictive_log_likelihood(rho, m, x, y, 100, np.random.default_rng(1))
    assert np.isfinite(s.value) and s.stderr > 0
