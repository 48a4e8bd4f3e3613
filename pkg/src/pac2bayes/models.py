"""Regression likelihoods p(y | x, theta) with a Gaussian noise model.

Parameters arrive as flat vectors (numpy or graph values) whose last axis is
the parameter axis; any leading axes index independent draws, so a block of
S posterior samples evaluates in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grad as g


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with named slices."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if vals.size != size:
            raise LayoutError(f"{vals.size} values for a layout of {size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite parameter")

    def __len__(self):
        return self.values.size

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        shape = dict(self.layout)[name]
        return self.values[self.offsets()[name]].reshape(shape)

    def to_dict(self) -> dict:
        return {"layout": [[n, list(s)] for n, s in self.layout], "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        return cls(np.asarray(d["values"], dtype=float), tuple((n, tuple(s)) for n, s in d["layout"]))


def _as_theta(theta):
    return theta.values if isinstance(theta, ParamVector) else theta


class _GaussianNoiseModel:
    noise_var: float
    layout: tuple

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def params(self, values) -> ParamVector:
        return ParamVector(values, self.layout)

    def _check(self, theta):
        m = g.value(theta).shape[-1] if g.value(theta).ndim else 1
        if m != self.n_params:
            raise LayoutError(f"expected {self.n_params} parameters, got {m}")

    def predict(self, theta, x):
        """f_theta(x); shape (..., n) for x of shape (n,), (...) for scalar x."""
        theta = _as_theta(theta)
        self._check(theta)
        xa = np.asarray(x, dtype=float)
        out = self._forward(theta, np.atleast_1d(xa))
        return out[..., 0] if xa.ndim == 0 else out

    def log_likelihood(self, theta, x, y):
        """Normal log-density of y at f_theta(x), in nats."""
        resid = g.sub(np.asarray(y, dtype=float), self.predict(theta, x))
        return g.sub(-0.5 * math.log(2.0 * math.pi * self.noise_var),
                     g.div(g.square(resid), 2.0 * self.noise_var))

    def predictive_sample(self, theta, x, rng: np.random.Generator):
        mean = np.asarray(self.predict(g.value(_as_theta(theta)), x))
        return mean + math.sqrt(self.noise_var) * rng.standard_normal(mean.shape)

    def clamped_log_loss(self, theta, x, y, bound: float):
        """-log p clipped to [0, bound]; for bound certificates only."""
        if not bound > 0:
            raise ValueError("clamp bound must be positive")
        loss = -np.asarray(self.log_likelihood(g.value(_as_theta(theta)), x, y))
        return np.clip(loss, 0.0, bound)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianLinearModel(_GaussianNoiseModel):
    """y ~ Normal(theta0 + theta1 x, noise_var)."""

    noise_var: float = 1.0
    layout: tuple = field(default=(("theta0", (1,)), ("theta1", (1,))), init=False)

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")

    def _forward(self, theta, x):
        return g.add(theta[..., 0:1], g.mul(theta[..., 1:2], x))

    def to_dict(self):
        return {"kind": "linear", "noise_var": self.noise_var}


@dataclass(frozen=True)
class MlpRegressionModel(_GaussianNoiseModel):
    """One hidden softplus layer, scalar in and out."""

    hidden: int = 20
    noise_var: float = 1.0
    activation: str = "softplus"

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        if self.activation not in ("softplus", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layout(self):
        h = self.hidden
        return (("w1", (1, h)), ("b1", (h,)), ("w2", (h, 1)), ("b2", (1,)))

    def _forward(self, theta, x):
        h = self.hidden
        w1 = theta[..., None, 0:h]
        b1 = theta[..., None, h:2 * h]
        w2 = theta[..., None, 2 * h:3 * h]
        b2 = theta[..., 3 * h:3 * h + 1]
        act = g.softplus if self.activation == "softplus" else g.tanh
        hidden = act(g.add(g.mul(x[:, None], w1), b1))
        return g.add(g.sum_(g.mul(hidden, w2), axis=-1), b2)

    def to_dict(self):
        return {"kind": "mlp", "hidden": self.hidden, "noise_var": self.noise_var,
                "activation": self.activation}


def model_from_dict(d: dict):
    if d["kind"] == "linear":
        return GaussianLinearModel(noise_var=d["noise_var"])
    if d["kind"] == "mlp":
        return MlpRegressionModel(hidden=d["hidden"], noise_var=d["noise_var"],
                                  activation=d.get("activation", "softplus"))
    raise ValueError(f"unknown model kind {d['kind']!r}")


# functional aliases
def log_likelihood(model, theta, x, y):
    return model.log_likelihood(theta, x, y)


def predictive_sample(model, theta, x, rng):
    return model.predictive_sample(theta, x, rng)


def clamped_log_loss(model, theta, x, y, bound):
    return model.clamped_log_loss(theta, x, y, bound)
