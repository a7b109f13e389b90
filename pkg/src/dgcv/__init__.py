"""Divide-and-conquer kernel ridge regression with distributed GCV tuning."""

__version__ = "0.1.0"

from .block_krr import (
    BlockFit,
    TuneState,
    dense_averaged_hat,
    fit_block,
    fit_state,
    predict_averaged,
    predict_block,
)
from .datasets import (
    Dataset,
    Partition,
    WeightScheme,
    load_csv,
    load_dataset,
    make_weights,
    random_partition,
    save_csv,
    simulate_beta_mixture,
    simulate_song_surrogate,
    simulate_wendland_field,
)
from .diagnostics import (
    DiagnosticsReport,
    c1_prime_statistic,
    c1_statistic,
    c4_statistic,
    d_lambda,
    q_statistics,
    resample_conditions,
    theorem1_gap,
)
from .errors import (
    DgcvError,
    IngestionError,
    InvalidArgumentError,
    NoSelectionError,
    ResourceLimitError,
    SingularSystemError,
    UnsupportedOperationError,
)
from .kernels import KernelSpec, bernoulli_polynomial, eval_kernel, gram, gram_derivative
from .newton import NewtonOptions, OptimResult, alpha_gamma, log_dgcv_derivatives, newton_optimize
from .tuning import (
    ScoreKind,
    TuneReport,
    cp_score,
    dgcv_score,
    dgcv_star_score,
    lambda_grid,
    profile_m,
    risk_score,
    sub_gcv_score,
    true_loss,
    tune_grid,
    tune_ngcv,
)
