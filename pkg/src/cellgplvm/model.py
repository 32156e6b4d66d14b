"""Model state, sparse-GP conditionals and checkpoint serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .encoder import EncoderParams
from .exceptions import BlockFormError, DataFormatError, DimensionMismatchError
from .kernel import GramBundle, InducingInputs, KernelSpec, _nonlin_cross, gram_bundle, jittered_cholesky

CHECKPOINT_TAG = "gplvm-v1"


@dataclass
class PredictiveGaussian:
    """Marginal predictive moments; variances are floored at zero."""

    mean: np.ndarray
    variance: np.ndarray


@dataclass
class ModelState:
    """Everything the trained model consists of.

    x          : (N, Q) latent point estimates.
    inducing   : inducing locations over the Q + P input columns.
    var_means  : (D, M) variational means, one row per gene.
    var_chol   : (D, M, M) lower Cholesky factors of the variational
                 covariances S_d = C_d C_d^T.
    spec       : kernel hyperparameters.
    mu_f       : constant process mean.
    zeta       : (P, D) fixed-effect mean coefficients, column d per gene.
    sigma_y2   : observation noise variance.
    dim_roles  : human-readable role of each latent dimension
                 ("periodic", "rbf", "severity").
    zeta_shared: if True the zeta columns are tied during training.
    encoder    : present when the latents are amortized by a network.
    """

    x: np.ndarray
    inducing: InducingInputs
    var_means: np.ndarray
    var_chol: np.ndarray
    spec: KernelSpec
    mu_f: float
    zeta: np.ndarray
    sigma_y2: float
    dim_roles: list = field(default_factory=list)
    zeta_shared: bool = False
    encoder: EncoderParams | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.var_means = np.asarray(self.var_means, dtype=float)
        self.var_chol = np.asarray(self.var_chol, dtype=float)
        if self.spec.p_linear > 0:
            self.zeta = np.asarray(self.zeta, dtype=float).reshape(self.spec.p_linear, -1)
        else:
            self.zeta = np.zeros((0, self.var_means.shape[0]))
        if self.sigma_y2 <= 0:
            raise DimensionMismatchError("sigma_y2 must be > 0")
        if not self.dim_roles:
            self.dim_roles = ["periodic"] + ["rbf"] * (self.spec.q_total - 1)

    @property
    def n_cells(self):
        return self.x.shape[0]

    @property
    def n_genes(self):
        return self.var_means.shape[0]

    def cov_factor(self, d):
        return self.var_chol[d]

    def cov(self, d):
        c = self.var_chol[d]
        return c @ c.T


def conditional_f_given_u(bundle: GramBundle, m_d, s_d) -> PredictiveGaussian:
    """Marginals of q(f) = Int p(f | u) N(u | m_d, s_d) du.

    mean[n]     = k_n^T Kmm^-1 m_d
    variance[n] = q_nn + lam_n^T s_d lam_n,   lam_n = Kmm^-1 k_n
    with q_nn the Nystroem gap knn_diag[n] - k_n^T Kmm^-1 k_n.
    """
    m_d = np.asarray(m_d, dtype=float).ravel()
    s_d = np.asarray(s_d, dtype=float)
    m = bundle.kmm.shape[0]
    if m_d.shape != (m,) or s_d.shape != (m, m):
        raise DimensionMismatchError("variational parameters disagree with bundle M")
    lower, _ = jittered_cholesky(bundle.kmm, name="kmm")
    kmn = bundle.knm.T
    w = solve_triangular(lower, kmn, lower=True)
    lam = solve_triangular(lower, w, lower=True, trans="T")  # (M, N)
    mean = lam.T @ m_d
    q_nn = bundle.knn_diag - np.sum(kmn * lam, axis=0)
    var = q_nn + np.sum(lam * (s_d @ lam), axis=0)
    return PredictiveGaussian(mean=mean, variance=np.maximum(var, 0.0))


def predict_expression(
    x_star, phi_star, state: ModelState, d: int, observation_level=False
) -> PredictiveGaussian:
    """Posterior predictive for gene `d` at new inputs.

    The latent-function mean is shifted by mu_f + phi* zeta_d; observation
    noise is added only when `observation_level` is set.
    """
    if not 0 <= d < state.n_genes:
        raise IndexError(f"gene index {d} out of range [0, {state.n_genes})")
    bundle = gram_bundle(x_star, phi_star, state.inducing, state.spec)
    out = conditional_f_given_u(bundle, state.var_means[d], state.cov(d))
    out.mean = out.mean + state.mu_f + np.asarray(phi_star, dtype=float) @ state.zeta[:, d]
    if observation_level:
        out.variance = out.variance + state.sigma_y2
    return out


def _block_split(inducing: InducingInputs):
    """Indices of the (nonlinear, linear) blocks; raises unless the inducing
    inputs really are in two-block form."""
    active = inducing.nonlin_active
    if active is None:
        raise BlockFormError(
            "inducing inputs carry no block structure; build them with a "
            "nonlin_active mask to use the linear/nonlinear split"
        )
    if active.all() or not active.any():
        raise BlockFormError("block form needs both a nonlinear and a linear block")
    if inducing.p_linear == 0:
        raise BlockFormError("no covariate columns: there is no linear part")
    if np.any(np.abs(inducing.linear[active]) > 0):
        raise BlockFormError("nonlinear-block rows must have zero linear columns")
    return np.flatnonzero(active), np.flatnonzero(~active)


def decompose_linear_nonlinear(state: ModelState, phi_star, d: int = 0) -> PredictiveGaussian:
    """Marginals of the linear (covariate random-effect) part of the posterior.

    With A = Z2^T (Z2 Z2^T)^-1 over the linear-block rows Z2,
        mean = Phi A m_lin
        cov  = Phi (nu I + A (S_lin - nu Z2 Z2^T) A^T) Phi^T
    which reduces to the unit-scale form when nu = 1.  Jitter is applied to
    Z2 Z2^T before factoring.
    """
    _, lin_idx = _block_split(state.inducing)
    phi_star = np.asarray(phi_star, dtype=float)
    z2 = state.inducing.linear[lin_idx]
    m_lin = state.var_means[d][lin_idx]
    s_full = state.cov(d)
    s_lin = s_full[np.ix_(lin_idx, lin_idx)]
    nu = state.spec.linear_scale

    gram = z2 @ z2.T
    lower, _ = jittered_cholesky(gram, name="Z_lin Z_lin^T")
    # a_t = G^-1 Z2, so A = a_t^T
    a_t = solve_triangular(lower, solve_triangular(lower, z2, lower=True), lower=True, trans="T")
    mean = phi_star @ (a_t.T @ m_lin)
    core = nu * np.eye(z2.shape[1]) + a_t.T @ (s_lin - nu * gram) @ a_t
    var = np.sum((phi_star @ core) * phi_star, axis=1)
    return PredictiveGaussian(mean=mean, variance=np.maximum(var, 0.0))


def nonlinear_part_conditional(state: ModelState, x_star, d: int = 0) -> PredictiveGaussian:
    """Marginals of the periodic*SE-ARD part of a block-form posterior."""
    nl_idx, _ = _block_split(state.inducing)
    x_star = np.asarray(x_star, dtype=float)
    z1 = state.inducing.latent[nl_idx]
    knm = _nonlin_cross(x_star, z1, state.spec)
    kmm = _nonlin_cross(z1, z1, state.spec)
    diag = np.full(x_star.shape[0], state.spec.signal_variance)
    bundle = GramBundle(knn_diag=diag, knm=knm, kmm=kmm)
    s_full = state.cov(d)
    return conditional_f_given_u(
        bundle, state.var_means[d][nl_idx], s_full[np.ix_(nl_idx, nl_idx)]
    )


# -- checkpoint container ------------------------------------------------------
#
# Single deterministic binary file: a tag line, a JSON header with scalars and
# the array manifest, then raw little-endian float64 array bytes in manifest
# order.  No timestamps anywhere, so identical states serialize byte-identically.


def _state_arrays(state: ModelState):
    arrays = {
        "x": state.x,
        "z": state.inducing.values,
        "var_means": state.var_means,
        "var_chol": state.var_chol,
        "zeta": state.zeta,
        "lengthscales": state.spec.lengthscales,
    }
    if state.encoder is not None:
        for name, value in state.encoder.weights.items():
            arrays[f"enc.{name}"] = value
    return arrays


def save_checkpoint(state: ModelState, path):
    arrays = _state_arrays(state)
    header = {
        "format": CHECKPOINT_TAG,
        "scalars": {
            "signal_variance": state.spec.signal_variance,
            "linear_scale": state.spec.linear_scale,
            "mu_f": state.mu_f,
            "sigma_y2": state.sigma_y2,
        },
        "q_total": state.spec.q_total,
        "p_linear": state.spec.p_linear,
        "dim_roles": list(state.dim_roles),
        "zeta_shared": bool(state.zeta_shared),
        "nonlin_active": (
            None
            if state.inducing.nonlin_active is None
            else state.inducing.nonlin_active.astype(int).tolist()
        ),
        "encoder": None
        if state.encoder is None
        else {
            "hidden": list(state.encoder.hidden),
            "n_latent": state.encoder.n_latent,
            "n_input": state.encoder.n_input,
            "append_covariates": state.encoder.append_covariates,
        },
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_TAG.encode() + b"\n")
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        tag = fh.readline().strip().decode()
        if tag != CHECKPOINT_TAG:
            raise DataFormatError(f"not a {CHECKPOINT_TAG} checkpoint: tag {tag!r}")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode())
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            arrays[entry["name"]] = data.reshape(shape).copy()

    scalars = header["scalars"]
    spec = KernelSpec(
        signal_variance=scalars["signal_variance"],
        lengthscales=arrays["lengthscales"],
        linear_scale=scalars["linear_scale"],
        q_total=header["q_total"],
        p_linear=header["p_linear"],
    )
    mask = header["nonlin_active"]
    inducing = InducingInputs(
        values=arrays["z"],
        q_total=header["q_total"],
        p_linear=header["p_linear"],
        nonlin_active=None if mask is None else np.asarray(mask, dtype=bool),
    )
    encoder = None
    if header["encoder"] is not None:
        meta = header["encoder"]
        weights = {
            name[len("enc.") :]: arr
            for name, arr in arrays.items()
            if name.startswith("enc.")
        }
        encoder = EncoderParams(
            weights=weights,
            hidden=tuple(meta["hidden"]),
            n_latent=meta["n_latent"],
            n_input=meta["n_input"],
            append_covariates=meta["append_covariates"],
        )
    return ModelState(
        x=arrays["x"],
        inducing=inducing,
        var_means=arrays["var_means"],
        var_chol=arrays["var_chol"],
        spec=spec,
        mu_f=scalars["mu_f"],
        zeta=arrays["zeta"],
        sigma_y2=scalars["sigma_y2"],
        dim_roles=header["dim_roles"],
        zeta_shared=header["zeta_shared"],
        encoder=encoder,
    )
