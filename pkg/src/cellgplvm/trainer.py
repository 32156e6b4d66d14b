"""Stochastic variational training loop.

Each epoch shuffles the rows with a seeded permutation, walks the resulting
batches, and takes one Adam ascent step on the minibatch bound per batch.
Phase 1 keeps the latents (or encoder weights) frozen and trains the sparse-GP
side at `lr_phase1`; phase 2 opens everything at `lr_phase2`.  All reductions
are plain numpy, so runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .elbo import elbo_full, elbo_graph, tensors_from_state
from .encoder import encode, encode_graph
from .exceptions import ConfigError, NonFiniteError
from .kernel import InducingInputs, KernelSpec
from .model import ModelState, save_checkpoint

LATENT_KEYS = ("x",)
HYPER_KEYS = ("log_sf2", "log_ls", "log_nu", "log_sy2", "mu_f", "zeta")


@dataclass
class TrainConfig:
    """Optimization schedule and optimizer constants."""

    lr_phase1: float = 0.01
    lr_phase2: float | None = None  # defaults to lr_phase1
    phase1_epochs: int = 3
    total_epochs: int = 100
    batch_size: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    grad_clip: float | None = None
    checkpoint_every: int = 0
    lr_scale_latent: float = 1.0
    lr_scale_hyper: float = 1.0
    lr_scale_variational: float = 1.0
    eval_full_every: int = 0

    def __post_init__(self):
        if self.lr_phase2 is None:
            self.lr_phase2 = self.lr_phase1
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.phase1_epochs > self.total_epochs:
            raise ConfigError("phase1_epochs cannot exceed total_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass
class TrainTrace:
    """Step-level record of a fit run."""

    header: dict
    steps: list = field(default_factory=list)
    full_elbo: list = field(default_factory=list)
    param_norms: list = field(default_factory=list)
    wall_time: float = 0.0

    def write(self, path):
        """Newline-delimited records; wall-clock timing stays out of the file
        so reruns with the same seed are byte-identical."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def minibatch_sampler(n, batch_size, seed, epoch):
    """Seeded permutation of 0..n-1, chunked; the last chunk may be short."""
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds data size {n}")
    rng = np.random.default_rng([int(seed), int(epoch)])
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _block_of(key):
    if key in LATENT_KEYS or key.startswith("enc."):
        return "latent"
    if key in HYPER_KEYS:
        return "hyper"
    return "variational"


class Adam:
    """Adaptive-moment ascent over a dict of parameter tensors.

    The latent matrix x gets row-sparse updates: moments and values move only
    on the rows present in the current batch, everything else is untouched.
    """

    def __init__(self, tensors, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in tensors.items()}
        self.t = 0

    def step(self, tensors, grads, lr, skip_latent=False, x_rows=None):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        scale = {
            "latent": cfg.lr_scale_latent,
            "hyper": cfg.lr_scale_hyper,
            "variational": cfg.lr_scale_variational,
        }
        if cfg.grad_clip is not None:
            norm = np.sqrt(
                sum(
                    float(np.sum(g**2))
                    for k, g in grads.items()
                    if not (skip_latent and _block_of(k) == "latent")
                )
            )
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        for key, grad in grads.items():
            block = _block_of(key)
            if skip_latent and block == "latent":
                continue
            rate = lr * scale[block]
            if key == "x" and x_rows is not None:
                rows = x_rows
                gm = grad[rows]
                self.m[key][rows] = cfg.beta1 * self.m[key][rows] + (1 - cfg.beta1) * gm
                self.v[key][rows] = cfg.beta2 * self.v[key][rows] + (1 - cfg.beta2) * gm**2
                mhat = self.m[key][rows] / c1
                vhat = self.v[key][rows] / c2
                tensors[key].value[rows] += rate * mhat / (np.sqrt(vhat) + cfg.eps_adam)
            else:
                self.m[key] = cfg.beta1 * self.m[key] + (1 - cfg.beta1) * grad
                self.v[key] = cfg.beta2 * self.v[key] + (1 - cfg.beta2) * grad**2
                mhat = self.m[key] / c1
                vhat = self.v[key] / c2
                tensors[key].value += rate * mhat / (np.sqrt(vhat) + cfg.eps_adam)


def _objective(y, phi, indices, tensors, state, n_total, eps=None):
    """Build the (possibly amortized) minibatch objective graph."""
    indices = np.asarray(indices, dtype=np.intp)
    y_rows = y[indices]
    phi_rows = phi[indices]
    scale = float(n_total) / indices.shape[0]
    kl_x = None
    if state.encoder is not None:
        enc_in = y_rows
        if state.encoder.append_covariates:
            enc_in = np.hstack([y_rows, phi_rows])
        enc_tensors = {
            k[len("enc.") :]: t for k, t in tensors.items() if k.startswith("enc.")
        }
        mean, var = encode_graph(enc_in, enc_tensors, state.encoder)
        if eps is None:
            raise ValueError("encoder mode needs a reparameterization draw")
        x_rows = mean + ad.sqrt(var) * ad.constant(eps)
        kl_x = 0.5 * ad.tsum(
            ad.square(mean) + var - 1.0 - ad.log(var)
        )
    else:
        x_rows = tensors["x"][indices]
    total, parts = elbo_graph(y_rows, phi_rows, tensors, state, x_rows=x_rows, scale=scale)
    if kl_x is not None:
        total = total - scale * kl_x
        parts["kl_x"] = scale * kl_x
    return total, parts


def gradients(y, phi, indices, state: ModelState, n_total=None, eps=None):
    """Exact reverse-mode gradients of the minibatch bound.

    Returns a dict mirroring every free parameter leaf (log-space for the
    positive hyperparameters, row-zero-padded for the latents outside the
    batch).
    """
    y = np.asarray(y, dtype=float)
    phi = _as_design(phi, y.shape[0])
    n_total = int(n_total) if n_total is not None else state.n_cells
    tensors = tensors_from_state(state)
    total, _ = _objective(y, phi, indices, tensors, state, n_total, eps=eps)
    ad.backward(total)
    grads = {}
    for key, tensor in tensors.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        if key == "vc_off":
            grad = np.tril(grad, k=-1)
        grads[key] = grad
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter block '{key}'")
    return grads


def _as_design(phi, n):
    if phi is None:
        return np.zeros((n, 0))
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    return phi


def state_from_tensors(tensors, template: ModelState) -> ModelState:
    """Materialize a ModelState from the current leaf values."""
    spec = template.spec
    ls = np.exp(tensors["log_ls"].value)
    nu = float(np.exp(tensors["log_nu"].value)) if "log_nu" in tensors else spec.linear_scale
    new_spec = KernelSpec(
        signal_variance=float(np.exp(tensors["log_sf2"].value)),
        lengthscales=ls,
        linear_scale=nu,
        q_total=spec.q_total,
        p_linear=spec.p_linear,
    )
    inducing = InducingInputs(
        values=tensors["z"].value.copy(),
        q_total=spec.q_total,
        p_linear=spec.p_linear,
        nonlin_active=template.inducing.nonlin_active,
    )
    var_chol = np.tril(tensors["vc_off"].value, k=-1).copy()
    idx = np.arange(var_chol.shape[-1])
    var_chol[:, idx, idx] = np.exp(tensors["vc_ldiag"].value)
    zeta = tensors["zeta"].value
    if template.zeta_shared:
        zeta = np.repeat(zeta, template.zeta.shape[1], axis=1)
    encoder = None
    if template.encoder is not None:
        encoder = copy.deepcopy(template.encoder)
        for name in encoder.weights:
            encoder.weights[name] = tensors[f"enc.{name}"].value.copy()
    return ModelState(
        x=tensors["x"].value.copy(),
        inducing=inducing,
        var_means=tensors["var_means"].value.T.copy(),
        var_chol=var_chol,
        spec=new_spec,
        mu_f=float(tensors["mu_f"].value),
        zeta=zeta.copy(),
        sigma_y2=float(np.exp(tensors["log_sy2"].value)),
        dim_roles=list(template.dim_roles),
        zeta_shared=template.zeta_shared,
        encoder=encoder,
    )


def fit(y, phi, init: ModelState, cfg: TrainConfig, checkpoint_dir=None):
    """Run the two-phase SVI loop and return (trained state, trace)."""
    y = np.asarray(y, dtype=float)
    phi = _as_design(phi, y.shape[0])
    n = y.shape[0]
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds data size {n}")

    header = {
        "lr_phase1": cfg.lr_phase1,
        "lr_phase2": cfg.lr_phase2,
        "phase1_epochs": cfg.phase1_epochs,
        "total_epochs": cfg.total_epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "n_cells": n,
        "n_genes": y.shape[1],
        "q_total": init.spec.q_total,
        "p_linear": init.spec.p_linear,
        "m_inducing": init.inducing.m_inducing,
        "mode": "encoder" if init.encoder is not None else "point",
    }
    trace = TrainTrace(header=header)
    if cfg.total_epochs == 0:
        return copy.deepcopy(init), trace

    started = time.perf_counter()
    tensors = tensors_from_state(init)
    adam = Adam(tensors, cfg)
    state_meta = init  # static metadata (shapes, mask, mode); values live in tensors
    step = 0
    for epoch in range(cfg.total_epochs):
        phase1 = epoch < cfg.phase1_epochs
        lr = cfg.lr_phase1 if phase1 else cfg.lr_phase2
        for batch in minibatch_sampler(n, cfg.batch_size, cfg.seed, epoch):
            step += 1
            for t in tensors.values():
                t.grad = None
            eps = None
            if init.encoder is not None:
                eps = np.random.default_rng([cfg.seed, 7919, step]).standard_normal(
                    (batch.shape[0], init.spec.q_total)
                )
            total, _ = _objective(y, phi, batch, tensors, state_meta, n, eps=eps)
            ad.backward(total)
            grads = {}
            for key, tensor in tensors.items():
                if tensor.grad is None:
                    continue
                grad = tensor.grad
                if key == "vc_off":
                    grad = np.tril(grad, k=-1)
                if not np.isfinite(grad).all():
                    raise NonFiniteError(
                        f"non-finite gradient in parameter block '{key}' at step {step}"
                    )
                grads[key] = grad
            adam.step(tensors, grads, lr, skip_latent=phase1, x_rows=batch)
            trace.steps.append(
                {"step": step, "epoch": epoch, "minibatch_elbo": total.item(), "lr": lr}
            )
        trace.param_norms.append(
            {key: float(np.linalg.norm(t.value)) for key, t in tensors.items()}
        )
        if cfg.eval_full_every and (epoch + 1) % cfg.eval_full_every == 0 and init.encoder is None:
            snapshot = state_from_tensors(tensors, init)
            trace.full_elbo.append({"epoch": epoch, "elbo": elbo_full(y, phi, snapshot).total})
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            snapshot = state_from_tensors(tensors, init)
            save_checkpoint(snapshot, f"{checkpoint_dir}/checkpoint_epoch{epoch + 1:04d}.gplvm")

    final = state_from_tensors(tensors, init)
    if init.encoder is not None:
        enc_in = y
        if init.encoder.append_covariates:
            enc_in = np.hstack([y, phi])
        mean, _ = encode(enc_in, final.encoder)
        final.x = mean
    trace.wall_time = time.perf_counter() - started
    return final, trace
