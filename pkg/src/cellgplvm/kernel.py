"""Augmented covariance function and Gram assembly.

The covariance over a pair of (latent, covariate) inputs is

    k((x, phi), (x', phi')) = sf2 * k_per(x_1, x'_1) * k_ard(x_2:, x'_2:)
                              + nu * <phi, phi'>

with a periodic factor on the first latent dimension (period fixed at 2*pi),
an ARD squared-exponential over the remaining latent dimensions, and a scaled
linear term over the known covariates.  Inducing inputs carry Q + P columns so
the cross-covariances pick up the linear term as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import chol_with_jitter
from .exceptions import ConfigError, DimensionMismatchError, NonFiniteError


@dataclass
class KernelSpec:
    """Hyperparameters of the augmented kernel.

    signal_variance : sf2, scale of the nonlinear (periodic * SE-ARD) part.
    lengthscales    : Q positive reals; entry 0 belongs to the periodic
                      dimension, entries 1..Q-1 to the SE-ARD dimensions.
    linear_scale    : nu >= 0, scale of the linear covariate term.
    q_total         : number of latent dimensions Q (>= 1).
    p_linear        : number of covariate columns P (>= 0).
    """

    signal_variance: float
    lengthscales: np.ndarray
    linear_scale: float
    q_total: int
    p_linear: int

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.q_total < 1:
            raise ConfigError("q_total must be >= 1")
        if self.p_linear < 0:
            raise ConfigError("p_linear must be >= 0")
        if self.lengthscales.shape != (self.q_total,):
            raise DimensionMismatchError(
                f"expected {self.q_total} lengthscales, got {self.lengthscales.shape}"
            )
        if np.any(self.lengthscales <= 0):
            raise ConfigError("all lengthscales must be > 0")
        if self.signal_variance <= 0:
            raise ConfigError("signal_variance must be > 0")
        if self.linear_scale < 0:
            raise ConfigError("linear_scale must be >= 0")


@dataclass
class InducingInputs:
    """M inducing locations over Q latent plus P covariate columns.

    The column layout is [periodic | se-ard | linear] = [1 | Q-1 | P].
    `nonlin_active` marks rows whose periodic*SE-ARD contribution is live;
    inactive rows act purely through the linear term (the two-block layout
    used to split the posterior into linear and nonlinear parts).
    """

    values: np.ndarray
    q_total: int
    p_linear: int
    nonlin_active: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DimensionMismatchError("inducing inputs must be an M x (Q+P) matrix")
        m, width = self.values.shape
        if width != self.q_total + self.p_linear:
            raise DimensionMismatchError(
                f"inducing inputs have {width} columns, expected "
                f"Q + P = {self.q_total + self.p_linear}"
            )
        if m <= self.p_linear:
            raise ConfigError(
                f"need more inducing points ({m}) than covariate columns "
                f"({self.p_linear}): M points define a hyperplane only if M > P"
            )
        if self.nonlin_active is not None:
            self.nonlin_active = np.asarray(self.nonlin_active, dtype=bool)
            if self.nonlin_active.shape != (m,):
                raise DimensionMismatchError("nonlin_active must have one flag per row")

    @property
    def m_inducing(self):
        return self.values.shape[0]

    @property
    def latent(self):
        """The Q latent-space columns."""
        return self.values[:, : self.q_total]

    @property
    def linear(self):
        """The P covariate columns."""
        return self.values[:, self.q_total :]


@dataclass
class GramBundle:
    """Gram pieces used by the sparse conditionals: only the data diagonal
    of the full kernel matrix is ever materialized."""

    knn_diag: np.ndarray  # (N,)
    knm: np.ndarray  # (N, M)
    kmm: np.ndarray  # (M, M)


def kernel_eval(x, x2, phi, phi2, spec: KernelSpec) -> float:
    """Evaluate the augmented kernel between two single inputs."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float).ravel()
    phi2 = np.asarray(phi2, dtype=float).ravel()
    if x.shape != (spec.q_total,) or x2.shape != (spec.q_total,):
        raise DimensionMismatchError(
            f"latent inputs must have {spec.q_total} dimensions"
        )
    if phi.shape != (spec.p_linear,) or phi2.shape != (spec.p_linear,):
        raise DimensionMismatchError(
            f"covariate inputs must have {spec.p_linear} dimensions"
        )
    ls = spec.lengthscales
    per = np.exp(-2.0 * np.sin(np.abs(x[0] - x2[0]) / 2.0) ** 2 / ls[0] ** 2)
    if spec.q_total > 1:
        ard = np.exp(-0.5 * np.sum((x[1:] - x2[1:]) ** 2 / ls[1:] ** 2))
    else:
        ard = 1.0
    return float(spec.signal_variance * per * ard + spec.linear_scale * phi @ phi2)


def _nonlin_cross(a, b, spec: KernelSpec):
    """sf2 * k_per * k_ard between latent coordinate blocks a (n,Q), b (m,Q)."""
    ls = spec.lengthscales
    diff1 = a[:, :1] - b[:, :1].T
    per = np.exp(-2.0 * np.sin(diff1 / 2.0) ** 2 / ls[0] ** 2)
    if spec.q_total > 1:
        sa = a[:, 1:] / ls[1:]
        sb = b[:, 1:] / ls[1:]
        sq = (
            np.sum(sa * sa, axis=1)[:, None]
            + np.sum(sb * sb, axis=1)[None, :]
            - 2.0 * sa @ sb.T
        )
        ard = np.exp(-0.5 * np.maximum(sq, 0.0))
    else:
        ard = 1.0
    return spec.signal_variance * per * ard


def gram_bundle(x, phi, z: InducingInputs, spec: KernelSpec) -> GramBundle:
    """Assemble the cross-covariances against the inducing inputs.

    knm = K_nm + nu * Phi Z_lin^T, kmm = K_mm + nu * Z_lin Z_lin^T, and the
    data diagonal sf2 + nu * ||phi_n||^2, where K_nm, K_mm are the
    periodic*SE-ARD matrices over the latent columns only.
    """
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.q_total:
        raise DimensionMismatchError(f"latents must be N x {spec.q_total}")
    if phi.ndim != 2 or phi.shape[1] != spec.p_linear:
        raise DimensionMismatchError(f"covariates must be N x {spec.p_linear}")
    if x.shape[0] != phi.shape[0]:
        raise DimensionMismatchError("latents and covariates disagree on N")
    if z.q_total != spec.q_total or z.p_linear != spec.p_linear:
        raise DimensionMismatchError("inducing partition does not match kernel spec")
    if not (np.isfinite(x).all() and np.isfinite(phi).all() and np.isfinite(z.values).all()):
        raise NonFiniteError("non-finite entries in gram_bundle inputs")

    knm = _nonlin_cross(x, z.latent, spec)
    kmm = _nonlin_cross(z.latent, z.latent, spec)
    if z.nonlin_active is not None:
        knm = knm * z.nonlin_active[None, :]
        kmm = kmm * np.outer(z.nonlin_active, z.nonlin_active)
    zl = z.linear
    knm = knm + spec.linear_scale * phi @ zl.T
    kmm = kmm + spec.linear_scale * zl @ zl.T
    diag = spec.signal_variance + spec.linear_scale * np.sum(phi * phi, axis=1)
    return GramBundle(knn_diag=diag, knm=knm, kmm=kmm)


def jittered_cholesky(a, name="matrix"):
    """Lower Cholesky factor of a + delta*I for the smallest workable delta.

    Returns (L, delta); raises IllConditionedMatrixError naming `name` if the
    whole jitter ladder fails.
    """
    return chol_with_jitter(a, name=name)
