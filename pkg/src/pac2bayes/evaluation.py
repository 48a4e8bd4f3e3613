"""Predictive scores, uncertainty bands, flatness and variance diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad as g
from .bounds import BoundCertificate, pac_bayes_certificate
from .objectives import _coefficient
from .posteriors import (
    DiracPosterior,
    GaussianPrior,
    ParticleEnsemble,
    Posterior,
    ensemble_log_prior_regularizer,
    kl_to_prior,
)


def _draws(rho: Posterior, samples: int, rng) -> np.ndarray:
    """Parameter draws; exact atoms for point masses and ensembles."""
    if isinstance(rho, DiracPosterior):
        return rho.theta0[None, :]
    if isinstance(rho, ParticleEnsemble):
        return rho.particles
    if samples < 1:
        raise ValueError("need at least one posterior sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    return rho.sample(rng, samples)


@dataclass(frozen=True)
class PredictiveScore:
    value: float       # mean over test points of ln E_rho p(y|x, theta)
    stderr: float      # sampling error over test points
    mc_stderr: float   # Monte Carlo error from the finite parameter draws
    samples: int

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr,
                "mc_stderr": self.mc_stderr, "samples": self.samples}


def predictive_log_likelihood(rho: Posterior, model, x, y, samples: int = 1000, rng=None,
                              chunk: int = 2000) -> PredictiveScore:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.size == 0:
        raise ValueError("empty test set")
    theta = _draws(rho, samples, rng)
    s = theta.shape[0]
    per_point = np.empty(x.size)
    # z_s = mean_i w_is / wbar_i linearizes the estimator around the draws
    z = np.zeros(s)
    for lo in range(0, x.size, chunk):
        sl = slice(lo, lo + chunk)
        ll = np.asarray(model.log_likelihood(theta, x[sl], y[sl]))
        top = ll.max(axis=0)
        # log-mean-exp; exact when every draw agrees
        lme = top + np.log(np.mean(np.exp(ll - top), axis=0))
        per_point[sl] = lme
        z += np.exp(ll - lme).sum(axis=1)
    z /= x.size
    stderr = float(per_point.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    mc = float(z.std(ddof=1) / math.sqrt(s)) if s > 1 and not isinstance(rho, ParticleEnsemble) else 0.0
    return PredictiveScore(float(per_point.mean()), stderr, mc, s)


def uncertainty_bands(rho: Posterior, model, x_grid, draws: int = 100, rng=None) -> dict:
    """Per grid point: predictive mean, epistemic sd and total sd."""
    if draws < 2:
        raise ValueError("need at least two draws")
    rng = rng if rng is not None else np.random.default_rng(0)
    x_grid = np.atleast_1d(np.asarray(x_grid, dtype=float))
    if isinstance(rho, DiracPosterior):
        theta = np.repeat(rho.theta0[None, :], draws, axis=0)
    else:
        theta = rho.sample(rng, draws)
    f = np.asarray(model.predict(theta, x_grid))
    ys = model.predictive_sample(theta, x_grid, rng)
    epistemic = np.zeros(x_grid.size) if isinstance(rho, DiracPosterior) else f.std(axis=0, ddof=1)
    return {"x": x_grid, "mean": f.mean(axis=0), "epistemic_sd": epistemic,
            "total_sd": ys.std(axis=0, ddof=1)}


@dataclass(frozen=True)
class Sensitivity:
    losses: np.ndarray
    coefficient: float   # percent
    mode_loss: float

    def histogram(self, bins: int = 20):
        counts, edges = np.histogram(self.losses, bins=bins)
        return counts, edges

    def to_dict(self):
        return {"coefficient": self.coefficient, "mode_loss": self.mode_loss,
                "mean_loss": float(self.losses.mean()), "sd_loss": float(self.losses.std(ddof=1)),
                "n_perturb": int(self.losses.size)}


def perturbation_coefficient(theta, loss_fn, n_perturb: int = 100, variance: float = 0.01,
                             rng=None) -> Sensitivity:
    """Spread of ``loss_fn`` under isotropic Gaussian kicks of the given variance.

    ``loss_fn`` maps a (P, M) block of parameter vectors to P losses.  The
    coefficient is sd / mean * 100 over the perturbed losses.
    """
    if n_perturb < 2:
        raise ValueError("need at least two perturbations")
    if variance < 0:
        raise ValueError("perturbation variance must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    kicks = math.sqrt(variance) * rng.standard_normal((n_perturb, theta.size))
    losses = np.asarray(loss_fn(theta[None, :] + kicks), dtype=float)
    mode_loss = float(np.asarray(loss_fn(theta[None, :]))[0])
    mean = losses.mean()
    if not mean > 0:
        raise ValueError("mean perturbed loss is not positive; coefficient undefined")
    coeff = 0.0 if variance == 0 else float(losses.std(ddof=1) / mean * 100.0)
    return Sensitivity(losses, coeff, mode_loss)


def training_nll(model, x, y):
    """theta block -> total -ln p(D | theta)."""
    def loss(theta):
        return -np.asarray(model.log_likelihood(theta, x, y)).sum(axis=-1)
    return loss


def perturbation_sensitivity(theta_mode, model, x, y, n_perturb: int = 100, variance: float = 0.01,
                             rng=None) -> Sensitivity:
    theta = getattr(theta_mode, "values", theta_mode)
    return perturbation_coefficient(theta, training_nll(model, x, y), n_perturb, variance, rng)


def vhat_at_solution(rho: Posterior, model, x, y, variant: str = "tight_h", pairs: int = 1000,
                     epsilon: float = 0.1, rng=None) -> dict:
    """Monte Carlo estimate of the empirical variance credit at ``rho``.

    Uses the same max-normalized credit as training, per datum, and reports
    its sum over the data and per-datum mean.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if pairs < 1:
        raise ValueError("need at least one pair")
    if isinstance(rho, DiracPosterior):
        per = np.zeros(x.size)
    elif isinstance(rho, ParticleEnsemble):
        ll = np.asarray(model.log_likelihood(rho.particles, x, y))
        m = ll.max(axis=0) + epsilon
        mu = g.logsumexp(ll, axis=0) - math.log(rho.size)
        a = np.exp(ll - m)
        diffs = a[:, None, :] - a[None, :, :]
        per = _coefficient(mu - m, variant) * (diffs ** 2).sum(axis=(0, 1)) / (2.0 * rho.size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        per = np.zeros(x.size)
        block = max(1, min(pairs, 2_000_000 // (2 * x.size)))
        done = 0
        while done < pairs:
            k = min(block, pairs - done)
            theta = rho.sample(rng, 2 * k)
            ll = np.asarray(model.log_likelihood(theta, x, y))
            l1, l2 = ll[0::2], ll[1::2]
            m = np.maximum(l1, l2) + epsilon
            alpha = np.logaddexp(l1 - m, l2 - m) - math.log(2.0)
            c = _coefficient(alpha, variant)
            per += (c * 0.5 * (np.exp(l1 - m) - np.exp(l2 - m)) ** 2).sum(axis=0)
            done += k
        per /= pairs
    return {"sum": float(per.sum()), "mean": float(per.mean()), "variant": variant, "pairs": pairs}


def run_certificate(rho: Posterior, model, x, y, prior: GaussianPrior, order: int, xi: float = 0.05,
                    B: float | None = None, samples: int = 200, pairs: int = 200, variant: str = "simple",
                    rng=None) -> BoundCertificate:
    """Bound certificate at a trained posterior.

    The loss is clamped to [0, B]; by default B = max(1.5 * largest observed
    log-loss, 1).  Point masses and ensembles use the negative mean log-prior
    of the atoms in place of the KL term.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = _draws(rho, samples, rng)
    raw = -np.asarray(model.log_likelihood(theta, x, y))
    if B is None:
        B = max(1.5 * float(raw.max()), 1.0)
    loss = float(np.clip(raw, 0.0, B).mean())
    if isinstance(rho, (DiracPosterior, ParticleEnsemble)):
        kl = ensemble_log_prior_regularizer(rho, prior)
    else:
        kl = kl_to_prior(rho, prior)
    variance = None
    if order == 2:
        variance = vhat_at_solution(rho, model, x, y, variant, pairs, rng=rng)["mean"]
    return pac_bayes_certificate(order, loss, variance, kl, B, xi, x.size)
