"""Training criteria as graph builders.

Variational objectives are per-datum averages plus ``k/n * KL`` (k = 1 for
the first-order bound, 2 for the second-order one); point-estimate and
ensemble objectives are sums over the data, matching how they are usually
written as penalized log-likelihoods.  Random draws are always passed in
explicitly so any evaluation can be repeated with frozen noise.

Second-order terms are computed in a max-normalized form: with ``m`` the
largest log-likelihood among the draws plus a margin ``epsilon``, every
density enters as ``exp(ll - m) <= exp(-epsilon)``.  Both ``m`` and the
variance coefficient are treated as constants by the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grad as g
from .posteriors import (
    DiracPosterior,
    FullGaussian,
    GaussianPrior,
    MeanFieldGaussian,
    ParticleEnsemble,
    Posterior,
    UnsupportedFamily,
)

VARIANTS = ("map", "elbo", "pac2_simple", "pac2_h",
            "ensemble_pac", "ensemble_pac2_simple", "ensemble_pac2_h")

METHOD_VARIANTS = {
    "map": "map",
    "vi": "elbo",
    "pac2": "pac2_simple",
    "pac2h": "pac2_h",
    "ens_pac": "ensemble_pac",
    "ens_pac2": "ensemble_pac2_simple",
    "ens_pac2h": "ensemble_pac2_h",
}


def _check_data(x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.size == 0:
        raise ValueError("empty dataset")
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    return x, y


def _check_gaussian(rho):
    if not isinstance(rho, (MeanFieldGaussian, FullGaussian, DiracPosterior)):
        raise UnsupportedFamily(f"variational objectives need a Gaussian family, got {rho.family!r}")


# variance coefficient ------------------------------------------------------

def h_of_alpha(alpha):
    """Tight second-order coefficient at log-ratio alpha = ln(mean/max) < 0.

    Equals alpha/(1-e^alpha)^2 + 1/(e^alpha (1-e^alpha)); tends to 1/2 as
    alpha -> 0 and is never below it.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha >= 0):
        raise ValueError("h(alpha) needs alpha < 0; is the epsilon margin missing?")
    one_minus_u = -np.expm1(alpha)
    u = np.exp(alpha)
    small = alpha > -1e-3
    # the closed form cancels catastrophically near 0; use the series there
    series = 0.5 + alpha * (-2.0 / 3.0 + alpha * (5.0 / 12.0 - alpha * 29.0 / 180.0))
    with np.errstate(over="ignore"):
        closed = alpha / (one_minus_u * one_minus_u) + 1.0 / (u * one_minus_u)
    return np.where(small, series, closed)


def _coefficient(alpha, variant):
    if variant in ("tight_h", "h"):
        return h_of_alpha(alpha)
    if variant == "simple":
        return np.full_like(alpha, 0.5)
    raise ValueError(f"unknown variance variant {variant!r}")


def pac2_stabilizers(l1, l2, epsilon=0.1, variant="tight_h"):
    """Per-datum (m, c) for a pair of log-likelihood arrays."""
    l1, l2 = g.value(l1), g.value(l2)
    m = np.maximum(l1, l2) + epsilon
    alpha = np.logaddexp(l1 - m, l2 - m) - math.log(2.0)
    return m, _coefficient(alpha, variant)


def ensemble_stabilizers(ll, epsilon=0.1, variant="tight_h"):
    """Per-datum (m, c) from an (E, n) block of log-likelihoods."""
    ll = g.value(ll)
    m = ll.max(axis=0) + epsilon
    mu = g.logsumexp(ll, axis=0) - math.log(ll.shape[0])
    return m, _coefficient(mu - m, variant)


# point estimates -----------------------------------------------------------

def map_objective(theta, model, x, y, prior: GaussianPrior, n: int | None = None):
    """-sum_i ln p(y_i|x_i, theta) - ln prior(theta)."""
    x, y = _check_data(x, y)
    scale = 1.0 if n is None else n / x.size
    nll = g.neg(g.sum_(model.log_likelihood(theta, x, y)))
    return g.sub(g.mul(scale, nll), prior.log_density(theta))


# variational ---------------------------------------------------------------

def _kl(rho, lam, prior):
    if isinstance(rho, DiracPosterior):
        # point mass: the regularizer is -ln prior at the atom
        return g.neg(prior.log_density(lam))
    return rho.kl_graph(lam, prior)


def elbo_objective(lam, rho: Posterior, model, x, y, prior: GaussianPrior, eps, n: int | None = None):
    """(1/b) sum -ln p(y|x, theta) + KL/n over the draws θ = rho(lam, eps).

    ``eps`` has shape ``rho.noise_shape(S)``; S > 1 averages S draws.
    """
    _check_gaussian(rho)
    x, y = _check_data(x, y)
    n = x.size if n is None else n
    theta = rho.reparameterize(lam, eps)
    data = g.neg(g.mean(model.log_likelihood(theta, x, y)))
    return g.add(data, g.div(_kl(rho, lam, prior), float(n)))


def pac2_variational_terms(lam, rho, model, x, y, prior, eps, variant="tight_h",
                           epsilon=0.1, stabilizers=None):
    """Graph components of the second-order objective for paired draws.

    ``eps`` has shape (S, 2, ...) holding S independent (theta, theta')
    pairs.  The variance credit averages both orderings of each pair, which
    is ``c/2 (a - a')^2`` with ``a = exp(ll - m)``.  Returns a dict with the
    data term, the variance credit and the KL value.
    """
    _check_gaussian(rho)
    x, y = _check_data(x, y)
    eps = np.asarray(eps, dtype=float)
    pairs = eps.shape[0]
    theta = rho.reparameterize(lam, eps.reshape((2 * pairs,) + eps.shape[2:]))
    ll = model.log_likelihood(theta, x, y)
    l1, l2 = ll[0::2], ll[1::2]
    if stabilizers is None:
        m = g.add(g.stop_gradient(g.maximum(l1, l2)), epsilon)
        _, c = pac2_stabilizers(l1, l2, epsilon, variant)
    else:
        m, c = stabilizers
    a = g.exp(g.sub(l1, m))
    b = g.exp(g.sub(l2, m))
    credit = g.mean(g.mul(c, g.mul(0.5, g.square(g.sub(a, b)))))
    data = g.neg(g.mean(ll))
    return {"data": data, "variance": credit, "kl": _kl(rho, lam, prior)}


def pac2_variational_objective(lam, rho, model, x, y, prior, eps, variant="tight_h",
                               epsilon=0.1, n: int | None = None, stabilizers=None):
    """E[-ln p] - c V + (2/n) KL for paired reparameterized draws."""
    terms = pac2_variational_terms(lam, rho, model, x, y, prior, eps, variant,
                                   epsilon, stabilizers)
    n = np.atleast_1d(x).size if n is None else n
    return g.add(g.sub(terms["data"], terms["variance"]), g.div(g.mul(2.0, terms["kl"]), float(n)))


# ensembles -----------------------------------------------------------------

def pac_ensemble_objective(particles, model, x, y, prior, n: int | None = None):
    """sum_j [-sum_i ln p(y_i|x_i, theta_j) - ln prior(theta_j)]; particles is (E, M)."""
    x, y = _check_data(x, y)
    scale = 1.0 if n is None else n / x.size
    nll = g.neg(g.sum_(model.log_likelihood(particles, x, y)))
    return g.sub(g.mul(scale, nll), g.sum_(prior.log_density(particles)))


def ensemble_diversity(ll, m, count):
    """Per-datum (1/E) sum_jk [a_j^2 - a_j a_k] written as pairwise squares.

    The pairwise form is exactly zero for coincident particles.
    """
    a = g.exp(g.sub(ll, m))
    total = None
    for j in range(count):
        for k in range(j + 1, count):
            d = g.square(g.sub(a[j], a[k]))
            total = d if total is None else g.add(total, d)
    if total is None:
        return np.zeros(g.value(ll).shape[1:])
    return g.div(total, float(count))


def pac2_ensemble_terms(particles, model, x, y, prior, variant="tight_h", epsilon=0.1,
                        stabilizers=None):
    x, y = _check_data(x, y)
    ll = model.log_likelihood(particles, x, y)
    count = g.value(ll).shape[0]
    if stabilizers is None:
        m = g.add(_col_max(ll), epsilon)
        _, c = ensemble_stabilizers(ll, epsilon, variant)
    else:
        m, c = stabilizers
    diversity = ensemble_diversity(ll, m, count)
    return {
        "data": g.neg(g.sum_(ll)),
        "diversity": g.sum_(g.mul(c, diversity)),
        "log_prior": g.sum_(prior.log_density(particles)),
    }


def _col_max(ll):
    # max over particles, computed by pairwise maxima so ties stay deterministic
    rows = [ll[j] for j in range(g.value(ll).shape[0])]
    out = rows[0]
    for r in rows[1:]:
        out = g.maximum(out, r)
    return g.stop_gradient(out)


def pac2_ensemble_objective(particles, model, x, y, prior, variant="tight_h", epsilon=0.1,
                            n: int | None = None, stabilizers=None):
    """sum_ij -ln p_ij - sum_i c_i (1/E) sum_jk [a_ij^2 - a_ij a_ik] - sum_j ln prior."""
    terms = pac2_ensemble_terms(particles, model, x, y, prior, variant, epsilon, stabilizers)
    b = np.atleast_1d(x).size
    scale = 1.0 if n is None else n / b
    fit = g.mul(scale, g.sub(terms["data"], terms["diversity"]))
    return g.sub(fit, terms["log_prior"])


# configuration -------------------------------------------------------------

@dataclass
class ObjectiveConfig:
    variant: str
    epsilon: float = 0.1
    batch_size: int | None = None
    mc_pairs: int = 1

    def __post_init__(self):
        if self.variant in METHOD_VARIANTS:
            self.variant = METHOD_VARIANTS[self.variant]
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown objective variant {self.variant!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.mc_pairs < 1:
            raise ValueError("need at least one Monte Carlo pair")

    @property
    def kl_weight(self) -> float:
        """Multiple of KL/n in the objective."""
        return 2.0 if self.variant.startswith(("pac2", "ensemble_pac2")) else 1.0

    @property
    def variance_variant(self) -> str | None:
        if self.variant.endswith("_h"):
            return "tight_h"
        if self.variant.endswith("_simple"):
            return "simple"
        return None

    @property
    def is_ensemble(self) -> bool:
        return self.variant.startswith("ensemble")


@dataclass
class Objective:
    """A configured criterion over a flat parameter vector.

    ``draw`` consumes randomness in a fixed order (minibatch indices, then
    reparameterization noise) and ``builder`` turns those draws into a graph
    builder, so a step can be replayed exactly.
    """

    config: ObjectiveConfig
    posterior: Posterior
    model: object
    prior: GaussianPrior
    x: np.ndarray
    y: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        self.x, self.y = _check_data(self.x, self.y)
        self.n = self.x.size
        cfg = self.config
        if cfg.batch_size is not None and not 1 <= cfg.batch_size <= self.n:
            raise ValueError("minibatch size must be in [1, n]")
        if cfg.is_ensemble and not isinstance(self.posterior, ParticleEnsemble):
            raise UnsupportedFamily("ensemble objectives need a ParticleEnsemble")
        if cfg.variant == "map" and not isinstance(self.posterior, DiracPosterior):
            raise UnsupportedFamily("MAP needs a DiracPosterior")
        if cfg.variant in ("elbo", "pac2_simple", "pac2_h"):
            _check_gaussian(self.posterior)

    @property
    def initial(self) -> np.ndarray:
        return self.posterior.to_vector()

    def draw(self, rng: np.random.Generator) -> dict:
        cfg = self.config
        out = {"batch": None, "eps": None}
        if cfg.batch_size is not None and cfg.batch_size < self.n:
            out["batch"] = np.sort(rng.choice(self.n, size=cfg.batch_size, replace=False))
        if cfg.variant == "elbo":
            out["eps"] = rng.standard_normal(self.posterior.noise_shape(cfg.mc_pairs))
        elif cfg.variant in ("pac2_simple", "pac2_h"):
            shape = self.posterior.noise_shape(2 * cfg.mc_pairs)
            out["eps"] = rng.standard_normal(shape).reshape((cfg.mc_pairs, 2) + shape[1:])
        return out

    def builder(self, draws: dict):
        cfg = self.config
        x, y = self.x, self.y
        if draws.get("batch") is not None:
            x, y = x[draws["batch"]], y[draws["batch"]]
        rho, model, prior, n = self.posterior, self.model, self.prior, self.n
        scale_n = None if x.size == n else n
        v = cfg.variant
        if v == "map":
            return lambda lam: map_objective(lam, model, x, y, prior, n=scale_n)
        if v == "elbo":
            return lambda lam: elbo_objective(lam, rho, model, x, y, prior, draws["eps"], n=n)
        if v in ("pac2_simple", "pac2_h"):
            return lambda lam: pac2_variational_objective(
                lam, rho, model, x, y, prior, draws["eps"], cfg.variance_variant,
                cfg.epsilon, n=n)
        if v == "ensemble_pac":
            return lambda lam: pac_ensemble_objective(rho.unpack(lam), model, x, y, prior, n=scale_n)
        return lambda lam: pac2_ensemble_objective(
            rho.unpack(lam), model, x, y, prior, cfg.variance_variant, cfg.epsilon, n=scale_n)

    def value_and_grad(self, lam, rng):
        return g.evaluate_with_gradient(self.builder(self.draw(rng)), lam)

    def posterior_at(self, lam) -> Posterior:
        return self.posterior.with_vector(lam)
