"""End-to-end runs: data, training, evaluation and the JSON run report."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .models import model_from_dict
from .objectives import METHOD_VARIANTS, ObjectiveConfig
from .posteriors import (
    DiracPosterior,
    FullGaussian,
    GaussianPrior,
    MeanFieldGaussian,
    ParticleEnsemble,
    posterior_from_dict,
)
from .scenarios import get_scenario, test_data, training_data
from .trainer import OptimizerConfig, train

log = logging.getLogger(__name__)

METHODS = tuple(METHOD_VARIANTS)


@dataclass
class RunConfig:
    scenario: str
    method: str
    seed: int = 0
    steps: int | None = None          # None: scenario budget
    lr: float = 0.01
    batch: int | None = None
    mc_pairs: int | None = None       # None: scenario default
    ensemble_size: int = 3
    epsilon: float = 0.1
    n_train: int | None = None
    test_size: int = 10000
    samples: int = 1000
    vhat_pairs: int = 1000
    prior_std: float = 1.0
    xi: float = 0.05

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        get_scenario(self.scenario)
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def resolved(self) -> "RunConfig":
        """Fill scenario-dependent defaults."""
        sc = self.scenario_obj()
        return replace(self, steps=self.steps or sc.steps,
                       mc_pairs=self.mc_pairs or sc.mc_pairs,
                       n_train=self.n_train or sc.n_train)

    def scenario_obj(self):
        return get_scenario(self.scenario, **({"n_train": self.n_train} if self.n_train else {}))

    def to_dict(self):
        return asdict(self)


def initial_posterior(method: str, model, rng, ensemble_size: int = 3):
    m = model.n_params
    if method == "map":
        return DiracPosterior(0.1 * rng.standard_normal(m))
    if method.startswith("ens_"):
        return ParticleEnsemble.initialize(ensemble_size, m, rng)
    if model.to_dict()["kind"] == "linear":
        return FullGaussian.initialize(m, rng)
    return MeanFieldGaussian.initialize(m, rng)


def fit(cfg: RunConfig):
    """Train one method; returns (posterior, trace, scenario, (x, y))."""
    cfg = cfg.resolved()
    sc = cfg.scenario_obj()
    model = sc.model()
    x, y = training_data(sc, cfg.seed)
    rho0 = initial_posterior(cfg.method, model, np.random.default_rng(cfg.seed), cfg.ensemble_size)
    obj_cfg = ObjectiveConfig(cfg.method, epsilon=cfg.epsilon)
    opt_cfg = OptimizerConfig(lr=cfg.lr, steps=cfg.steps, batch_size=cfg.batch,
                              mc_pairs=cfg.mc_pairs, seed=cfg.seed)
    post, trace = train(obj_cfg, model, rho0, x, y, opt_cfg, GaussianPrior(cfg.prior_std))
    return post, trace, sc, (x, y)


def evaluate_run(cfg: RunConfig, post, trace, sc, data) -> dict:
    cfg = cfg.resolved()
    model = sc.model()
    prior = GaussianPrior(cfg.prior_std)
    x, y = data
    xt, yt = test_data(sc, cfg.seed, cfg.test_size)
    rng = np.random.default_rng([cfg.seed, 1])
    score = ev.predictive_log_likelihood(post, model, xt, yt, cfg.samples, rng)
    vhat = ev.vhat_at_solution(post, model, x, y, "tight_h", cfg.vhat_pairs, cfg.epsilon, rng)
    certs = {}
    for order in (1, 2):
        certs[f"order{order}"] = ev.run_certificate(post, model, x, y, prior, order, cfg.xi,
                                                     rng=rng).to_dict()
    return {
        "test_ll": score.value,
        "test_ll_stderr": score.stderr,
        "test_ll_mc_stderr": score.mc_stderr,
        "train_ll_mean": float(np.mean(model.log_likelihood(post.mode(), x, y))),
        "vhat_h_sum": vhat["sum"],
        "vhat_h_mean": vhat["mean"],
        "final_objective": float(trace.objective[-1]),
        "certificates": certs,
    }


def run(cfg: RunConfig, out_dir=None) -> dict:
    """Train, evaluate and (optionally) write the report and trace."""
    cfg = cfg.resolved()
    tick = time.perf_counter()
    post, trace, sc, data = fit(cfg)
    metrics = evaluate_run(cfg, post, trace, sc, data)
    log.info("%s/%s seed %d: test ll %.3f (%.1f s)", cfg.scenario, cfg.method, cfg.seed,
             metrics["test_ll"], time.perf_counter() - tick)
    stem = f"{cfg.scenario}_{cfg.method}_seed{cfg.seed}"
    report = {
        "method": cfg.method,
        "scenario": sc.to_dict(),
        "config": cfg.to_dict(),
        "model": sc.model().to_dict(),
        "posterior": post.to_dict(),
        "mode": post.mode().tolist(),
        "metrics": metrics,
        "trace": f"{stem}_trace.csv",
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out / report["trace"])
        write_report(out / f"{stem}.json", report)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_report(path, report: dict):
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def report_posterior(report: dict):
    return posterior_from_dict(report["posterior"])


def report_model(report: dict):
    return model_from_dict(report["model"])
