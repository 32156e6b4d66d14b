#!/usr/bin/env python3
"""A tour of the augmented covariance function.

The kernel has three pieces: a periodic factor on latent dimension 0 (period
fixed at 2*pi), an ARD squared-exponential over the remaining latent
dimensions, and a scaled linear term over the known covariates.  The linear
term is what lets random effects ride inside the GP: its Gram contribution is
exactly nu * Phi Phi^T.
"""

import numpy as np

from cellgplvm import InducingInputs, KernelSpec, gram_bundle, jittered_cholesky, kernel_eval

rng = np.random.default_rng(0)

spec = KernelSpec(
    signal_variance=1.0,
    lengthscales=np.array([0.7, 1.2, 0.9]),  # [periodic, rbf, rbf]
    linear_scale=0.5,
    q_total=3,
    p_linear=2,
)

print("== single evaluations ==")
x = np.array([0.3, -0.5, 1.0])
phi = np.array([1.0, 0.0])
print("k(x, x) with zero covariates  :", kernel_eval(x, x, [0, 0], [0, 0], spec), "(= sf2)")
print("k(x, x) with one-hot covariate:", kernel_eval(x, x, phi, phi, spec), "(= sf2 + nu)")

shifted = x.copy()
shifted[0] += 2 * np.pi
print("periodic dim shifted by 2*pi  :", kernel_eval(x, shifted, phi, phi, spec), "(back to the top)")

print()
print("== Gram bundle over partitioned inducing inputs ==")
n, m = 200, 12
X = rng.normal(size=(n, 3))
Phi = np.zeros((n, 2))
Phi[np.arange(n), rng.integers(0, 2, n)] = 1.0  # a 2-level batch covariate
Z = InducingInputs(rng.normal(size=(m, 5)), q_total=3, p_linear=2)

bundle = gram_bundle(X, Phi, Z, spec)
print("knm shape:", bundle.knm.shape, " kmm shape:", bundle.kmm.shape)
print("only the diagonal of the N x N kernel matrix is ever formed:", bundle.knn_diag.shape)

# the linear term separates additively
spec_nonlin = KernelSpec(1.0, spec.lengthscales, 0.0, 3, 2)
pure = gram_bundle(X, Phi, Z, spec_nonlin)
manual = pure.knm + spec.linear_scale * Phi @ Z.linear.T
print("additive split of knm exact to:", np.abs(bundle.knm - manual).max())

print()
print("== jitter ladder ==")
lower, delta = jittered_cholesky(bundle.kmm)
print(f"kmm factors with delta = {delta:g}")
rank_deficient = Z.linear @ Z.linear.T  # rank 2 < M
lower, delta = jittered_cholesky(rank_deficient)
print(f"a rank-2 linear Gram block needs delta = {delta:g}")
