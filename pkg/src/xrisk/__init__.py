"""Transfer-risk minimization and baselines on synthetic multi-environment
classification, with closed-form 2-d population analyses, a brute-force
angle oracle, and a Monte-Carlo counterexample certificate."""

from .analysis import (Certificate, ConstructionSpec, PiecewiseClassifier,
                       RatioSweepResult, bruteforce_ratio,
                       build_counterexample, certify_counterexample,
                       default_construction, ratio_sweep, trailing_ratio,
                       weight_ratio)
from .envgen import (Dataset, EnvironmentSuite, GaussianEnvSpec, SuiteConfig,
                     make_suite)
from .linear2d import Population2D
from .objectives import (RiskReport, SimplexWeights, TRMHyper, eg_update,
                         transfer_risk)
from .solver import NeumannConfig, solve_optimal_predictor
from .trainer import (RunMetrics, TrainConfig, TrainerError, predictor_distance,
                      regret_trace, train, train_baseline, train_trm)

__version__ = "0.1.0"

__all__ = [
    "Certificate", "ConstructionSpec", "Dataset", "EnvironmentSuite",
    "GaussianEnvSpec", "NeumannConfig", "PiecewiseClassifier",
    "Population2D", "RatioSweepResult", "RiskReport", "RunMetrics",
    "SimplexWeights", "SuiteConfig", "TRMHyper", "TrainConfig",
    "TrainerError", "bruteforce_ratio", "build_counterexample",
    "certify_counterexample", "default_construction", "eg_update",
    "make_suite", "predictor_distance", "ratio_sweep", "regret_trace",
    "solve_optimal_predictor", "trailing_ratio", "train", "train_baseline",
    "train_trm", "transfer_risk", "weight_ratio",
]
