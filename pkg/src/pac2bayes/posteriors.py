"""Mixture distributions rho over parameter space.

Each family packs its variational parameters into one unconstrained flat
vector (``to_vector`` / ``with_vector``) that the trainer optimizes, and
exposes graph-aware ``reparameterize`` and regularizer functions of that
vector.  Standard deviations go through softplus, never exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad as g
from .models import ParamVector

LOG_2PI = math.log(2.0 * math.pi)


class UnsupportedFamily(TypeError):
    pass


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic zero-mean Normal prior."""

    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("prior standard deviation must be positive")

    def log_density(self, theta):
        """Summed over the last axis."""
        var = self.std ** 2
        m = g.value(theta).shape[-1]
        const = -0.5 * m * (LOG_2PI + math.log(var))
        return g.sub(const, g.div(g.sum_(g.square(theta), axis=-1), 2.0 * var))


class Posterior:
    family: str

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def to_vector(self) -> np.ndarray:
        raise NotImplementedError

    def with_vector(self, lam) -> "Posterior":
        raise NotImplementedError

    def noise_shape(self, draws: int) -> tuple:
        """Shape of the standard-Normal block consumed by ``reparameterize``."""
        return (draws, self.dim)

    def reparameterize(self, lam, eps):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        draws = 1 if size is None else size
        eps = rng.standard_normal(self.noise_shape(draws))
        theta = np.asarray(self.reparameterize(self.to_vector(), eps))
        return theta[0] if size is None else theta

    def mode(self) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class DiracPosterior(Posterior):
    theta0: np.ndarray
    family = "dirac"

    def __post_init__(self):
        t = np.array(getattr(self.theta0, "values", self.theta0), dtype=float).reshape(-1)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite Dirac location")
        object.__setattr__(self, "theta0", t)

    @property
    def dim(self):
        return self.theta0.size

    def to_vector(self):
        return self.theta0.copy()

    def with_vector(self, lam):
        return DiracPosterior(np.asarray(lam))

    def noise_shape(self, draws):
        return (draws, 0)

    def reparameterize(self, lam, eps):
        draws = np.shape(eps)[0]
        return g.add(np.zeros((draws, 1)), lam[None, :])

    def mode(self):
        return self.theta0.copy()

    def to_dict(self):
        return {"family": self.family, "theta0": self.theta0.tolist()}


@dataclass(frozen=True, eq=False)
class MeanFieldGaussian(Posterior):
    """theta_i ~ Normal(mean_i, softplus(scale_raw_i)^2) independently."""

    mean: np.ndarray
    scale_raw: np.ndarray
    family = "meanfield"

    def __post_init__(self):
        object.__setattr__(self, "mean", np.array(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, "scale_raw", np.array(self.scale_raw, dtype=float).reshape(-1))
        if self.mean.shape != self.scale_raw.shape:
            raise ValueError("mean and scale must have the same length")

    @classmethod
    def from_std(cls, mean, std):
        return cls(mean, inverse_softplus(std))

    @classmethod
    def initialize(cls, dim, rng, mean_std=0.1, std=0.05):
        return cls.from_std(mean_std * rng.standard_normal(dim), np.full(dim, std))

    @property
    def dim(self):
        return self.mean.size

    @property
    def std(self):
        return np.asarray(g.softplus(self.scale_raw))

    def to_vector(self):
        return np.concatenate([self.mean, self.scale_raw])

    def with_vector(self, lam):
        lam = np.asarray(lam)
        return MeanFieldGaussian(lam[: self.dim], lam[self.dim:])

    def reparameterize(self, lam, eps):
        d = self.dim
        return g.add(lam[None, :d], g.mul(g.softplus(lam[None, d:]), eps))

    def kl_graph(self, lam, prior: GaussianPrior):
        d = self.dim
        mu, sigma = lam[:d], g.softplus(lam[d:])
        var_p = prior.std ** 2
        terms = g.add(g.sub(math.log(prior.std), g.log(sigma)),
                      g.div(g.add(g.square(sigma), g.square(mu)), 2.0 * var_p))
        return g.sum_(g.sub(terms, 0.5))

    def mode(self):
        return self.mean.copy()

    def to_dict(self):
        return {"family": self.family, "mean": self.mean.tolist(),
                "scale_raw": self.scale_raw.tolist(), "std": self.std.tolist()}


@dataclass(frozen=True, eq=False)
class FullGaussian(Posterior):
    """theta ~ Normal(mean, L L^T) with L lower triangular, positive diagonal."""

    mean: np.ndarray
    chol: np.ndarray
    family = "fullgauss"

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        chol = np.array(self.chol, dtype=float)
        if chol.shape != (mean.size, mean.size):
            raise ValueError("Cholesky factor must be d x d")
        if np.any(np.triu(chol, 1) != 0):
            raise ValueError("Cholesky factor must be lower triangular")
        if np.any(np.diag(chol) <= 0):
            raise ValueError("Cholesky diagonal must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def initialize(cls, dim, rng, mean_std=0.1, std=0.05):
        return cls(mean_std * rng.standard_normal(dim), std * np.eye(dim))

    @property
    def dim(self):
        return self.mean.size

    @property
    def covariance(self):
        return self.chol @ self.chol.T

    def _tril(self):
        return np.tril_indices(self.dim, -1)

    def to_vector(self):
        rows, cols = self._tril()
        return np.concatenate([self.mean, inverse_softplus(np.diag(self.chol)),
                               self.chol[rows, cols]])

    def with_vector(self, lam):
        lam = np.asarray(lam, dtype=float)
        d = self.dim
        chol = np.diag(np.asarray(g.softplus(lam[d:2 * d])))
        rows, cols = self._tril()
        chol[rows, cols] = lam[2 * d:]
        return FullGaussian(lam[:d], chol)

    def _factor_entries(self, lam):
        d = self.dim
        diag = g.softplus(lam[d:2 * d])
        off = {}
        for k, (i, j) in enumerate(zip(*self._tril())):
            off[(int(i), int(j))] = lam[2 * d + k]
        return diag, off

    def reparameterize(self, lam, eps):
        d = self.dim
        diag, off = self._factor_entries(lam)
        cols = []
        for i in range(d):
            row = g.add(lam[i], g.mul(diag[i], eps[:, i]))
            for j in range(i):
                row = g.add(row, g.mul(off[(i, j)], eps[:, j]))
            cols.append(row)
        return g.stack(cols, axis=-1)

    def kl_graph(self, lam, prior: GaussianPrior):
        d = self.dim
        diag, off = self._factor_entries(lam)
        var_p = prior.std ** 2
        trace = g.sum_(g.square(diag))
        for v in off.values():
            trace = g.add(trace, g.square(v))
        quad = g.sum_(g.square(lam[:d]))
        logdet = g.mul(2.0, g.sum_(g.log(diag)))
        inner = g.add(g.div(g.add(trace, quad), var_p), d * math.log(var_p) - d)
        return g.mul(0.5, g.sub(inner, logdet))

    def mode(self):
        return self.mean.copy()

    def to_dict(self):
        return {"family": self.family, "mean": self.mean.tolist(), "chol": self.chol.tolist()}


@dataclass(frozen=True, eq=False)
class ParticleEnsemble(Posterior):
    """Uniform mixture of Dirac atoms at the rows of ``particles``."""

    particles: np.ndarray
    family = "ensemble"

    def __post_init__(self):
        p = np.array(self.particles, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("particles must be an (E, M) array with E >= 1")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite particle")
        object.__setattr__(self, "particles", p)

    @classmethod
    def initialize(cls, size, dim, rng, std=0.1):
        return cls(std * rng.standard_normal((size, dim)))

    @property
    def size(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def to_vector(self):
        return self.particles.reshape(-1).copy()

    def with_vector(self, lam):
        return ParticleEnsemble(np.asarray(lam).reshape(self.size, self.dim))

    def unpack(self, lam):
        """(E, M) view of a flat parameter vector, graph-aware."""
        e, m = self.size, self.dim
        return g.stack([lam[j * m:(j + 1) * m] for j in range(e)], axis=0)

    def sample_with_index(self, rng):
        j = int(rng.integers(self.size))
        return self.particles[j].copy(), j

    def sample(self, rng, size=None):
        if size is None:
            return self.sample_with_index(rng)[0]
        return self.particles[rng.integers(self.size, size=size)]

    def mode(self):
        return self.particles.mean(axis=0)

    def to_dict(self):
        return {"family": self.family, "particles": self.particles.tolist()}


def kl_to_prior(rho: Posterior, prior: GaussianPrior) -> float:
    """Closed-form KL(rho || prior) for the Gaussian families."""
    if not isinstance(rho, (MeanFieldGaussian, FullGaussian)):
        raise UnsupportedFamily(f"no closed-form KL for family {rho.family!r}")
    return float(rho.kl_graph(rho.to_vector(), prior))


def ensemble_log_prior_regularizer(rho, prior: GaussianPrior):
    """-(1/E) sum_j ln prior(theta_j), the point-mass stand-in for KL."""
    if isinstance(rho, DiracPosterior):
        atoms = rho.theta0[None, :]
    elif isinstance(rho, ParticleEnsemble):
        atoms = rho.particles
    else:
        raise UnsupportedFamily(f"regularizer is defined for point masses, not {rho.family!r}")
    return float(-np.mean(prior.log_density(atoms)))


def predictive_mixture_density(rho: Posterior, model, x, y, samples: int = 1000, rng=None) -> np.ndarray:
    """E_rho[p(y|x, theta)], exact for point masses, Monte Carlo otherwise."""
    if isinstance(rho, DiracPosterior):
        return np.exp(model.log_likelihood(rho.theta0, x, y))
    if isinstance(rho, ParticleEnsemble):
        ll = np.asarray(model.log_likelihood(rho.particles, x, y))
        return np.exp(g.logsumexp(ll, axis=0) - math.log(rho.size))
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng()
    ll = np.asarray(model.log_likelihood(rho.sample(rng, samples), x, y))
    return np.exp(g.logsumexp(ll, axis=0) - math.log(samples))


_FAMILIES = {"dirac", "meanfield", "fullgauss", "ensemble"}


def posterior_from_dict(d: dict) -> Posterior:
    fam = d["family"]
    if fam == "dirac":
        return DiracPosterior(d["theta0"])
    if fam == "meanfield":
        if "scale_raw" in d:
            return MeanFieldGaussian(d["mean"], d["scale_raw"])
        return MeanFieldGaussian.from_std(d["mean"], d["std"])
    if fam == "fullgauss":
        return FullGaussian(d["mean"], d["chol"])
    if fam == "ensemble":
        return ParticleEnsemble(d["particles"])
    raise UnsupportedFamily(f"unknown posterior family {fam!r}")


def as_param_vector(theta, model) -> ParamVector:
    return ParamVector(np.asarray(theta), model.layout)
