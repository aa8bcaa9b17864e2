"""Information-theoretic generalization bounds for noisy iterative algorithms.

The package pairs instrumented training loops (noisy SGD, DP-SGD, SGLD,
federated averaging) with evaluators that turn the recorded gradient
statistics into bounds on the expected generalization gap.
"""
from .bound_engine import (
    BoundReport,
    BoundSpec,
    bound_curve,
    bound_ordering_check,
    decay_product,
    dp_sgd_bound_gaussian,
    dp_sgd_bound_laplace,
    evaluate,
    generic_bound,
    sgld_bound,
    sgld_mi_surrogate,
    sgld_trajectory_bound,
)
from .estimators import DPSGDClassifier, NoisyIterativeClassifier, SGLDClassifier
from .fed_sim import FedConfig, client_bound, run_fed
from .learning_core import (
    LabeledDataset,
    LogisticModel,
    MLPModel,
    corrupt_labels,
    load_csv,
    measure_gap,
    save_csv,
    synth_blobs,
    zero_one_loss,
)
from .noise_channels import Divergence, NoiseModel, cost, delta, oracle_divergence_1d
from .optimizers import DomainSpec, LearningRate, TrainConfig, project, run_training
from .stat_estimators import LossAssumption

__version__ = "0.1.0"
