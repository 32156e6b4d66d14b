#!/usr/bin/env python3
"""The built-in verification suite, narrated.

Three independent ways of computing the same things keep the main path
honest: a dense entry-by-entry marginal likelihood with the random effects
integrated out, the augmented-kernel marginal, and finite differences against
the reverse-mode gradients.  `cellgplvm check` runs the same suite from the
command line.
"""

import numpy as np

from cellgplvm import elbo_full
from cellgplvm.oracle import (
    decomposition_check,
    equivalence_check,
    exact_log_marginal,
    finite_difference_check,
    make_instance,
)

print("== the central identity ==")
print("integrating out B with coefficient covariance nu*I == adding the")
print("linear kernel term nu * Phi Phi^T, checked on random instances:\n")
for seed in range(4):
    inst = make_instance(seed, n=14, d_genes=2, p=3, q=2, m_inducing=6)
    print(f"  seed {seed}:", equivalence_check(inst))

print()
print("== the bound really is a bound ==")
inst = make_instance(42, n=20, d_genes=2, p=2, q=2, m_inducing=6)
state = inst["state"]
exact = exact_log_marginal(
    inst["y"], inst["x"], inst["phi"], state.spec, state.mu_f, state.zeta, state.sigma_y2
)
bound = elbo_full(inst["y"], inst["phi"], state).total
print(f"  exact log marginal {exact:.3f} >= bound {bound:.3f} (gap {exact - bound:.3f})")

print()
print("== gradients vs central finite differences ==")
report = finite_difference_check(1)
for key, (rel, abserr) in sorted(report.items()):
    print(f"  {key:12s} worst rel {rel:.2e}  worst near-zero abs {abserr:.2e}")

print()
print("== posterior split ==")
mean_diff, var_diff = decomposition_check(0)
print(f"  full conditional vs linear + nonlinear: mean {mean_diff:.2e}, variance {var_diff:.2e}")
