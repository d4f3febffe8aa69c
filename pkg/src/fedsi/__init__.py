"""Personalized federated learning with subnetwork Laplace inference.

A numpy/scipy simulation engine: a manually differentiated MLP split into
representation and decision blocks, Gauss-Newton subnetwork posteriors
with probit-calibrated predictions, federated training rounds with
degenerate-Gaussian aggregation, reference baselines, label-skew data
partitioning, and calibration metrics.
"""

__version__ = "0.1.0"

from .config import DataConfig, ExperimentConfig
from .data import (
    FederatedDataset,
    LabeledSet,
    parse_idx_images,
    parse_idx_labels,
    partition_label_skew,
    subset_protocol,
    synthetic_mixture,
)
from .errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    EmptyRecords,
    EmptyUpdateSet,
    FedsiError,
    IndexOutOfRange,
    InsufficientExamples,
    NonFiniteLoss,
    NotPositiveDefinite,
    SizeTooLarge,
    TruncatedPayload,
)
from .federation import (
    ClientUpdate,
    GlobalDistribution,
    TrainResult,
    aggregate,
    broadcast_prior,
    client_update,
    evaluate_novel_client,
    evaluate_run,
    finalize_client,
    run_rounds,
)
from .laplace import (
    GaussianPriorView,
    SubnetPosterior,
    assemble_ggn,
    assemble_ggn_diag,
    lambda_softmax,
    map_train,
    marginal_variances,
    predictive_classify,
    predictive_covariance,
    predictive_regress,
    select_subnetwork,
    subnet_posterior,
    wasserstein_diag,
)
from .linalg import CholeskyFactor, chol_solve, cholesky, cholesky_with_jitter, sym_inverse
from .metrics import accuracy, brier, ece, mce, reliability_bins
from .model import ClientModel, LayerLayout, adam_step, forward, init_model, per_sample_jacobian

__all__ = [name for name in dir() if not name.startswith("_")]
