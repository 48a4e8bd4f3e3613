"""Exact bound computations on finite toy models, plus bound certificates.

A toy has a finite sample space and a finite parameter set, so every
expectation is a finite sum.  Functions taking ``rho`` accept one weight
vector of shape (K,) or a batch of shape (G, K) and return a scalar or a
(G,) array accordingly.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grad import NumericFailure


class InfiniteCodeLength(ArithmeticError):
    pass


class UnsupportedSize(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteToyModel:
    xs: tuple
    thetas: tuple
    likelihood: np.ndarray   # (K, |X|), row-stochastic
    nu: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        lik = np.array(self.likelihood, dtype=float)
        nu = np.array(self.nu, dtype=float)
        prior = np.array(self.prior, dtype=float)
        object.__setattr__(self, "xs", tuple(self.xs))
        object.__setattr__(self, "thetas", tuple(self.thetas))
        if lik.shape != (len(self.thetas), len(self.xs)):
            raise ValueError(f"likelihood table must be {len(self.thetas)} x {len(self.xs)}")
        for name, arr in (("likelihood", lik), ("nu", nu), ("prior", prior)):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} entries must be finite and non-negative")
        if np.any(np.abs(lik.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("every likelihood row must sum to 1")
        if nu.shape != (len(self.xs),) or abs(nu.sum() - 1.0) > 1e-12:
            raise ValueError("nu must be a probability vector over X")
        if prior.shape != (len(self.thetas),) or abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must be a probability vector over Theta")
        object.__setattr__(self, "likelihood", lik)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "prior", prior)

    @property
    def size(self) -> int:
        return len(self.thetas)

    def index_of(self, x) -> int:
        return self.xs.index(x)

    def to_dict(self):
        return {"xs": list(self.xs), "thetas": list(self.thetas),
                "likelihood": self.likelihood.tolist(), "nu": self.nu.tolist(),
                "prior": self.prior.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["xs"], d["thetas"], d["likelihood"], d["nu"], d["prior"])

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n indices into ``xs`` drawn from nu."""
        return rng.choice(len(self.xs), size=n, p=self.nu)

    def with_nu(self, nu):
        return DiscreteToyModel(self.xs, self.thetas, self.likelihood, nu, self.prior)


def reference_toy() -> DiscreteToyModel:
    """Binary outcomes, two coins with heads probability 0.2 and 0.8, nu(1) = 0.4."""
    return DiscreteToyModel((0, 1), ("A", "B"), [[0.8, 0.2], [0.2, 0.8]], [0.6, 0.4], [0.5, 0.5])


def random_toy(rng: np.random.Generator, n_x: int = 3, n_theta: int = 2,
               misspecified: bool = False) -> DiscreteToyModel:
    """Dirichlet likelihood rows and data distribution.

    With ``misspecified`` the data distribution is a random interior mixture
    of the rows, so no single parameter reproduces it but a mixture does.
    """
    lik = rng.dirichlet(np.ones(n_x), size=n_theta)
    lik /= lik.sum(axis=1, keepdims=True)
    if misspecified:
        nu = rng.dirichlet(np.full(n_theta, 2.0)) @ lik
    else:
        nu = rng.dirichlet(np.ones(n_x))
    nu /= nu.sum()
    prior = np.full(n_theta, 1.0 / n_theta)
    return DiscreteToyModel(tuple(range(n_x)), tuple(f"t{k}" for k in range(n_theta)), lik, nu, prior)


def _as_rho(rho, k):
    r = np.asarray(rho, dtype=float)
    if r.shape[-1] != k:
        raise ValueError(f"rho needs {k} weights")
    if np.any(r < 0) or np.any(np.abs(r.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("rho must be a probability vector")
    return r


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, y, 1.0)), 0.0)


# population quantities ----------------------------------------------------

def entropy(toy: DiscreteToyModel) -> float:
    return float(-_xlogy(toy.nu, toy.nu).sum())


def per_theta_loss(toy: DiscreteToyModel) -> np.ndarray:
    """L(theta) = -sum_x nu(x) ln p(x|theta); inf where nu(x) > 0 but p = 0."""
    with np.errstate(divide="ignore"):
        logp = np.log(toy.likelihood)
    return -np.where(toy.nu > 0, toy.nu * logp, 0.0).sum(axis=1)


def predictive(toy, rho) -> np.ndarray:
    return _as_rho(rho, toy.size) @ toy.likelihood


def expected_code_length(toy: DiscreteToyModel, rho):
    p = predictive(toy, rho)
    if np.any((p <= 0) & (toy.nu > 0)):
        raise InfiniteCodeLength("predictive mass 0 at an observed outcome")
    out = -_xlogy(np.broadcast_to(toy.nu, p.shape), p).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def jensen_bound(toy: DiscreteToyModel, rho):
    r = _as_rho(rho, toy.size)
    loss = per_theta_loss(toy)
    live = r > 0
    if np.any(live & ~np.isfinite(loss)):
        raise InfiniteCodeLength("zero likelihood at an observed outcome")
    out = np.where(live, r * np.where(np.isfinite(loss), loss, 0.0), 0.0).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _pairwise_variance(r, lik):
    # Var_rho = 1/2 sum_jk rho_j rho_k (p_j - p_k)^2, exactly 0 for coincident rows
    diff = lik[:, None, :] - lik[None, :, :]
    return 0.5 * np.einsum("...j,...k,jkx->...x", r, r, diff * diff)


def variance_term(toy: DiscreteToyModel, rho):
    """sum_x nu(x) Var_rho(p(x|theta)) / (2 max_{supp rho} p(x|theta)^2)."""
    r = _as_rho(rho, toy.size)
    lik = toy.likelihood
    var = _pairwise_variance(r, lik)
    peak = np.where((r > 0)[..., :, None], lik, 0.0).max(axis=-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(peak > 0, var / (2.0 * peak ** 2), 0.0)
    out = (scaled * toy.nu).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def jensen2_bound(toy: DiscreteToyModel, rho):
    return jensen_bound(toy, rho) - variance_term(toy, rho)


SELECTORS = {
    "code_length": expected_code_length,
    "jensen": jensen_bound,
    "jensen2": jensen2_bound,
}


# grid search --------------------------------------------------------------

MAX_GRID_POINTS = 2_000_000


def simplex_grid(k: int, resolution: float) -> np.ndarray:
    """All weight vectors on the simplex with entries in multiples of ``resolution``.

    Rows come out in lexicographic order.
    """
    steps = int(round(1.0 / resolution))
    if k < 1:
        raise UnsupportedSize("need at least one parameter")
    if k > 4 or math.comb(steps + k - 1, k - 1) > MAX_GRID_POINTS:
        raise UnsupportedSize(f"simplex grid too large for |Theta|={k} at resolution {resolution}")
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        w = np.arange(steps + 1) / steps
        return np.stack([w, 1.0 - w], axis=1)
    rows = []
    for head in itertools.product(range(steps + 1), repeat=k - 1):
        if sum(head) <= steps:
            rows.append(head + (steps - sum(head),))
    return np.asarray(rows, dtype=float) / steps


def _safe(fn, toy, grid):
    try:
        return np.asarray(fn(toy, grid), dtype=float)
    except InfiniteCodeLength:
        vals = []
        for r in grid:
            try:
                vals.append(fn(toy, r))
            except InfiniteCodeLength:
                vals.append(np.inf)
        return np.asarray(vals)


def grid_minimize(selector, toy: DiscreteToyModel, resolution: float = 1e-3, refine: float | None = 1e-5):
    """Brute-force minimizer of a bound over the rho-simplex.

    ``selector`` is a name from SELECTORS or a function (toy, rho) -> value.
    Ties go to the lexicographically smallest rho.  For two parameters the
    incumbent is refined on a finer grid within one coarse step.
    """
    fn = SELECTORS[selector] if isinstance(selector, str) else selector
    grid = simplex_grid(toy.size, resolution)
    vals = _safe(fn, toy, grid)
    best = int(np.argmin(vals))
    rho, val = grid[best], float(vals[best])
    if refine and toy.size == 2 and refine < resolution:
        w0 = rho[0]
        w = np.arange(max(w0 - resolution, 0.0), min(w0 + resolution, 1.0) + refine / 2, refine)
        w = np.clip(w, 0.0, 1.0)
        fine = np.stack([w, 1.0 - w], axis=1)
        fvals = _safe(fn, toy, fine)
        j = int(np.argmin(fvals))
        if fvals[j] < val:
            rho, val = fine[j], float(fvals[j])
    return rho, val


# empirical objectives on a sample ----------------------------------------

def _counts(toy, data):
    idx = np.asarray(data, dtype=int)
    if idx.size == 0:
        raise ValueError("empty dataset")
    return np.bincount(idx, minlength=len(toy.xs)), idx.size


def kl_discrete(rho, prior):
    r = np.asarray(rho, dtype=float)
    out = _xlogy(r, r).sum(axis=-1) - _xlogy(r, np.broadcast_to(prior, r.shape)).sum(axis=-1)
    if np.any((r > 0) & (np.asarray(prior) == 0)):
        return np.inf
    return out


def empirical_first_order(toy: DiscreteToyModel, data, rho):
    """(1/n) sum_i E_rho[-ln p(x_i|theta)] + KL(rho, prior)/n."""
    counts, n = _counts(toy, data)
    r = _as_rho(rho, toy.size)
    with np.errstate(divide="ignore"):
        nll = -(np.log(toy.likelihood) @ counts) / n
    out = np.where(r > 0, r * nll, 0.0).sum(axis=-1) + kl_discrete(r, toy.prior) / n
    return float(out) if np.ndim(out) == 0 else out


def empirical_variance(toy: DiscreteToyModel, data, rho):
    """(1/n) sum_i Var_rho(p(x_i|theta)) / (2 max_theta p(x_i|theta)^2)."""
    counts, n = _counts(toy, data)
    r = _as_rho(rho, toy.size)
    lik = toy.likelihood
    var = _pairwise_variance(r, lik)
    scaled = var / (2.0 * lik.max(axis=0) ** 2)
    out = scaled @ counts / n
    return float(out) if np.ndim(out) == 0 else out


def empirical_second_order(toy: DiscreteToyModel, data, rho):
    """(1/n) sum_i E_rho[-ln p(x_i|theta)] - variance + 2 KL(rho, prior)/n."""
    counts, n = _counts(toy, data)
    r = _as_rho(rho, toy.size)
    first = empirical_first_order(toy, data, r)
    kl = kl_discrete(r, toy.prior)
    return first + kl / n - empirical_variance(toy, data, r)


def bayes_posterior(toy: DiscreteToyModel, data) -> np.ndarray:
    counts, _ = _counts(toy, data)
    with np.errstate(divide="ignore"):
        logw = np.log(toy.prior) + np.log(toy.likelihood) @ counts
    if not np.any(np.isfinite(logw)):
        raise NumericFailure("posterior", "bayes_posterior")
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def exact_pac2_update(toy: DiscreteToyModel, data, rho) -> np.ndarray:
    """One step of the second-order fixed-point map, computed in log space.

    rho'(theta) is proportional to prior(theta) exp(sum_i ln p_i + (p_i^2 - p_i pbar_i) / (2 max p_i^2))
    with p_i = p(x_i|theta) and pbar_i its rho-average.
    """
    counts, _ = _counts(toy, data)
    r = _as_rho(rho, toy.size)
    lik = toy.likelihood
    pbar = r @ lik
    scale = 2.0 * lik.max(axis=0) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.log(lik) + (lik ** 2 - lik * pbar) / scale
        logw = np.log(toy.prior) + np.where(counts > 0, expo * counts, 0.0).sum(axis=1)
    top = logw.max()
    if not np.isfinite(top):
        raise NumericFailure("mass", "exact_pac2_update")
    w = np.exp(logw - top)
    return w / w.sum()


@dataclass
class FixedPoint:
    rho: np.ndarray
    iterations: int
    converged: bool
    last_change: float


def iterate_pac2(toy: DiscreteToyModel, data, rho0=None, tol: float = 1e-12, max_iter: int = 10_000) -> FixedPoint:
    """Iterate the fixed-point map until the total-variation change is below ``tol``."""
    rho = toy.prior.copy() if rho0 is None else _as_rho(rho0, toy.size).copy()
    change = np.inf
    for it in range(1, max_iter + 1):
        nxt = exact_pac2_update(toy, data, rho)
        change = 0.5 * float(np.abs(nxt - rho).sum())
        rho = nxt
        if change < tol:
            return FixedPoint(rho, it, True, change)
    return FixedPoint(rho, max_iter, False, change)


# certificates -------------------------------------------------------------

@dataclass(frozen=True)
class BoundCertificate:
    order: int
    B: float
    xi: float
    n: int
    loss: float
    variance: float | None
    kl: float
    multiplier: float
    additive: float
    value: float

    def to_dict(self):
        return asdict(self)


def catoni_multiplier(b: float) -> float:
    """b / (1 - e^-b), computed without cancellation for small b."""
    return b / -math.expm1(-b)


def pac_bayes_certificate(order: int, loss: float, variance: float | None, kl: float,
                          B: float, xi: float, n: int) -> BoundCertificate:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if not B > 0:
        raise ValueError("clamp bound B must be positive")
    if not 0 < xi < 1:
        raise ValueError("confidence xi must lie in (0, 1)")
    if n < 1:
        raise ValueError("need n >= 1")
    if (variance is None) == (order == 2):
        raise ValueError("a variance term is required exactly for order 2")
    for v in (loss, kl) + ((variance,) if variance is not None else ()):
        if not math.isfinite(v):
            raise ValueError("certificate terms must be finite")
    log_conf = math.log(1.0 / xi)
    if order == 1:
        mult = catoni_multiplier(B)
        add = 0.0
        value = mult * (loss + (kl + log_conf) / n)
    else:
        mult = catoni_multiplier(B + 1.0)
        add = 0.5 * (mult - 1.0)
        value = mult * (loss - variance + (2.0 * kl + log_conf) / n) + add
    return BoundCertificate(order, float(B), float(xi), int(n), float(loss),
                            None if variance is None else float(variance), float(kl),
                            mult, add, float(value))


# gap curves ---------------------------------------------------------------

def gap_curve(toy: DiscreteToyModel, resolution: float = 1e-3) -> np.ndarray:
    """Columns (w, H, code length, jensen2, jensen) along rho = (w, 1 - w)."""
    if toy.size != 2:
        raise UnsupportedSize("gap curves need exactly two parameters")
    grid = simplex_grid(2, resolution)
    h = np.full(grid.shape[0], entropy(toy))
    return np.column_stack([grid[:, 0], h, _safe(expected_code_length, toy, grid),
                            _safe(jensen2_bound, toy, grid), _safe(jensen_bound, toy, grid)])


def gap_curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["w", "H", "L", "L_J2", "L_J"])
    for row in curve:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def gap_summary(toy: DiscreteToyModel, resolution: float = 1e-3, data=None,
                xi: float = 0.05, B: float | None = None) -> dict:
    """Minimizers of the three population criteria, their code lengths and gaps.

    With ``data`` (indices into xs) also reports the fixed point of the
    second-order update and both certificates at it.
    """
    h = entropy(toy)
    out = {"entropy": h, "minimizers": {}}
    for name in ("code_length", "jensen2", "jensen"):
        rho, val = grid_minimize(name, toy, resolution)
        out["minimizers"][name] = {"rho": rho.tolist(), "value": val,
                                   "code_length": float(expected_code_length(toy, rho))}
    best = out["minimizers"]["code_length"]["code_length"]
    out["gaps"] = {
        "kl": best - h,
        "jensen": out["minimizers"]["jensen"]["code_length"] - best,
        "jensen2": out["minimizers"]["jensen2"]["code_length"] - best,
    }
    if data is not None:
        fp = iterate_pac2(toy, data)
        counts, n = _counts(toy, data)
        with np.errstate(divide="ignore"):
            pointwise = -np.log(toy.likelihood[:, counts > 0])
        finite = pointwise[np.isfinite(pointwise)]
        B = float(B if B is not None else max(1.5 * float(finite.max(initial=0.0)), 1.0))
        loss = float(fp.rho @ (np.minimum(pointwise, B) @ counts[counts > 0]) / n)
        kl = float(kl_discrete(fp.rho, toy.prior))
        out["fixed_point"] = {"rho": fp.rho.tolist(), "iterations": fp.iterations,
                              "converged": fp.converged, "last_change": fp.last_change,
                              "objective": float(empirical_second_order(toy, data, fp.rho))}
        out["certificates"] = {
            "first_order": pac_bayes_certificate(1, loss, None, kl, B, xi, n).to_dict(),
            "second_order": pac_bayes_certificate(
                2, loss, float(empirical_variance(toy, data, fp.rho)), kl, B, xi, n).to_dict(),
        }
    return out
