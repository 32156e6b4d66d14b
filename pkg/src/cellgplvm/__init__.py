"""Sparse-variational GPLVM for large expression matrices.

Known technical/biological covariates enter the model as random effects whose
marginal covariance (nu * Phi Phi^T) is folded into the kernel as a linear
term over partitioned inducing inputs.  That keeps the likelihood factorized
over cells and genes, so the bound can be trained by plain minibatch SVI.
"""

__version__ = "0.1.0"

from .data import (
    CovariateTable,
    DesignMatrix,
    ExpressionMatrix,
    apply_design,
    build_design,
    cell_cycle_score,
    encode_severity,
    initialize,
    load_covariates,
    load_expression,
    preprocess,
    principal_components,
    write_expression,
)
from .elbo import ElboBreakdown, elbo_full, elbo_minibatch, kl_gaussians
from .encoder import EncoderParams, amortized_elbo_terms, encode, init_encoder
from .evaluation import (
    SignatureScore,
    SweepResult,
    knn_purity,
    lv_signature_correlation,
    rank_dimensions,
    severity_sweep,
    signature_score,
)
from .exceptions import (
    BlockFormError,
    CellGplvmError,
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    IllConditionedMatrixError,
    NonFiniteError,
    UnsupportedOperationError,
)
from .kernel import (
    GramBundle,
    InducingInputs,
    KernelSpec,
    gram_bundle,
    jittered_cholesky,
    kernel_eval,
)
from .model import (
    ModelState,
    PredictiveGaussian,
    conditional_f_given_u,
    decompose_linear_nonlinear,
    load_checkpoint,
    nonlinear_part_conditional,
    predict_expression,
    save_checkpoint,
)
from .oracle import (
    EquivalenceReport,
    augmented_log_marginal,
    dense_variational_predictive,
    decomposition_check,
    equivalence_check,
    exact_log_marginal,
    finite_difference_check,
    make_blockform_state,
    make_instance,
)
from .trainer import TrainConfig, TrainTrace, fit, gradients, minibatch_sampler
