"""Learning predictive posteriors by minimizing second-order PAC-Bayes bounds."""

from .bounds import DiscreteToyModel, pac_bayes_certificate, reference_toy
from .experiment import RunConfig, run
from .models import GaussianLinearModel, MlpRegressionModel, ParamVector
from .objectives import ObjectiveConfig, h_of_alpha
from .posteriors import (
    DiracPosterior,
    FullGaussian,
    GaussianPrior,
    MeanFieldGaussian,
    ParticleEnsemble,
)
from .trainer import OptimizerConfig, train

__version__ = "0.1.0"
