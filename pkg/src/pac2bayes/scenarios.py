"""Synthetic regression scenarios and their default learning setups.

Noise levels are given as standard deviations of the generative noise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .models import GaussianLinearModel, MlpRegressionModel


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str            # linear | sin | multimodal
    noise_sd: float
    n_train: int
    x_low: float
    x_high: float
    model_kind: str      # linear | mlp
    model_noise_var: float
    steps: int
    mc_pairs: int = 1       # posterior draw pairs per step for variational methods
    amplitude: float = 5.0  # s(x) = amplitude * sin(x)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def model(self):
        if self.model_kind == "linear":
            return GaussianLinearModel(noise_var=self.model_noise_var)
        return MlpRegressionModel(hidden=20, noise_var=self.model_noise_var)

    def signal(self, x):
        if self.kind == "linear":
            return 1.0 + x
        return self.amplitude * np.sin(x)

    def sample(self, n: int, rng: np.random.Generator):
        x = rng.uniform(self.x_low, self.x_high, size=n)
        mean = self.signal(x)
        if self.kind == "multimodal":
            branch = rng.random(n) < 0.5
            mean = np.where(branch, mean, -mean)
        y = mean + self.noise_sd * rng.standard_normal(n)
        return x, y

    def true_log_density(self, x, y):
        """ln nu(y|x) of the generative distribution."""
        var = self.noise_sd ** 2
        def normal(mu):
            return -0.5 * math.log(2 * math.pi * var) - (y - mu) ** 2 / (2 * var)
        mean = self.signal(x)
        if self.kind == "multimodal":
            return np.logaddexp(normal(mean), normal(-mean)) - math.log(2.0)
        return normal(mean)


SCENARIOS = {
    "linear_perfect": Scenario("linear_perfect", "linear", 1.0, 100, -3.0, 3.0, "linear", 1.0, 2000, 10),
    "linear_misspec": Scenario("linear_misspec", "linear", 5.0, 100, -3.0, 3.0, "linear", 1.0, 2000, 10),
    "sin_perfect": Scenario("sin_perfect", "sin", 1.0, 10000, -4.0, 4.0, "mlp", 1.0, 5000),
    "sin_misspec": Scenario("sin_misspec", "sin", 10.0, 10000, -4.0, 4.0, "mlp", 1.0, 5000),
    "multimodal": Scenario("multimodal", "multimodal", 1.0, 10000, -4.0, 4.0, "mlp", 1.0, 5000, amplitude=8.0),
    "flat_minima": Scenario("flat_minima", "linear", 2.0, 25, -3.0, 3.0, "mlp", 0.01, 10000),
}


class UnknownScenario(KeyError):
    pass


def get_scenario(name: str, **overrides) -> Scenario:
    try:
        sc = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return replace(sc, **overrides) if overrides else sc


def _streams(seed: int):
    # independent train / test streams from one seed
    train, test = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train), np.random.default_rng(test)


def training_data(sc: Scenario, seed: int | None = None):
    seed = sc.seed if seed is None else seed
    return sc.sample(sc.n_train, _streams(seed)[0])


def test_data(sc: Scenario, seed: int | None = None, size: int = 10000):
    seed = sc.seed if seed is None else seed
    return sc.sample(size, _streams(seed)[1])


def dataset_csv(x, y) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for xi, yi in zip(x, y):
        w.writerow([repr(float(xi)), repr(float(yi))])
    return buf.getvalue()


def write_dataset(path, x, y, sidecar: dict):
    path = Path(path)
    path.write_text(dataset_csv(x, y))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["x"]) for r in rows]), np.array([float(r["y"]) for r in rows]))


def generate(name: str, seed: int, out_path, n_train: int | None = None):
    sc = get_scenario(name, **({"n_train": n_train} if n_train else {}))
    x, y = training_data(sc, seed)
    sidecar = {"scenario": sc.to_dict(), "seed": seed, "rows": int(x.size)}
    write_dataset(out_path, x, y, sidecar)
    return x, y
