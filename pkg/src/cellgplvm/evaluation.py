"""Post-training analysis: neighborhood purity, signature scoring, latent
ranking and the generative severity sweep."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionMismatchError
from .kernel import KernelSpec
from .model import ModelState, predict_expression


def knn_purity(latents, labels, k=100):
    """Per-cell fraction of the k nearest Euclidean neighbors (self excluded)
    sharing the cell's label; ties at the cutoff break by cell index."""
    latents = np.asarray(latents, dtype=float)
    labels = np.asarray(labels)
    n = latents.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of cells ({n})")
    if labels.shape[0] != n:
        raise DimensionMismatchError("one label per cell required")
    sq = np.sum(latents**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * latents @ latents.T
    np.fill_diagonal(d2, np.inf)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return (labels[neighbors] == labels[:, None]).mean(axis=1)


@dataclass
class SignatureScore:
    values: np.ndarray  # one score per cell
    background: list  # gene ids actually sampled


def signature_score(matrix, genes, n_bins=25, n_background=50, seed=0) -> SignatureScore:
    """Mean expression of the gene set minus the mean of an expression-matched
    background: each target gene draws `n_background` genes from its own
    mean-expression bin (seeded)."""
    gene_ids = list(matrix.gene_ids)
    index = {g: j for j, g in enumerate(gene_ids)}
    missing = [g for g in genes if g not in index]
    if missing:
        raise ConfigError(f"signature genes not in matrix: {missing}")
    dense = matrix.dense()
    means = dense.mean(axis=0)
    order = np.argsort(means, kind="stable")
    bin_of = np.empty(len(gene_ids), dtype=int)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        bin_of[chunk] = b
    rng = np.random.default_rng([int(seed), 0xB6])
    background = []
    for g in genes:
        pool = np.flatnonzero(bin_of == bin_of[index[g]])
        take = min(n_background, pool.size)
        background.extend(rng.choice(pool, size=take, replace=False).tolist())
    target_cols = [index[g] for g in genes]
    score = dense[:, target_cols].mean(axis=1) - dense[:, background].mean(axis=1)
    return SignatureScore(values=score, background=[gene_ids[j] for j in background])


def lv_signature_correlation(latents, score, cell_mask=None):
    """Pearson r between each latent dimension and the signature score over
    the masked cells; a zero-variance dimension reports r = 0 with a warning."""
    latents = np.asarray(latents, dtype=float)
    values = score.values if isinstance(score, SignatureScore) else np.asarray(score, dtype=float)
    if cell_mask is None:
        cell_mask = np.ones(latents.shape[0], dtype=bool)
    cell_mask = np.asarray(cell_mask, dtype=bool)
    if cell_mask.sum() < 3:
        raise ConfigError("need at least 3 cells selected for a correlation")
    sub = latents[cell_mask]
    sv = values[cell_mask]
    sv_c = sv - sv.mean()
    sv_norm = np.sqrt(np.sum(sv_c**2))
    out = np.zeros(latents.shape[1])
    if sv_norm == 0:
        warnings.warn("signature score has zero variance; all r set to 0", stacklevel=2)
        return out
    for q in range(latents.shape[1]):
        col = sub[:, q] - sub[:, q].mean()
        denom = np.sqrt(np.sum(col**2)) * sv_norm
        if denom == 0:
            warnings.warn(f"latent dimension {q} has zero variance; r set to 0", stacklevel=2)
            continue
        out[q] = float(col @ sv_c) / denom
    return out


def rank_dimensions(spec: KernelSpec):
    """SE-ARD dimensions ordered by inverse lengthscale (descending); equal
    lengthscales keep index order."""
    inv = 1.0 / spec.lengthscales[1:]
    order = np.argsort(-inv, kind="stable")
    return [int(i) + 1 for i in order]


@dataclass
class SweepResult:
    grid: np.ndarray
    gene_indices: list  # ranked, largest predicted range first
    ranges: np.ndarray  # (D,) max-min of the predicted mean per gene
    curves: np.ndarray  # (len(grid), D) predicted means


def severity_sweep(
    state: ModelState, sweep_dim, grid, baseline_x, baseline_phi, top_k=20
) -> SweepResult:
    """Predict every gene along a grid over one latent dimension, all other
    inputs pinned at the baseline; genes are ranked by the range of the
    predicted mean."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ConfigError("sweep grid is empty")
    if not 0 <= sweep_dim < state.spec.q_total:
        raise ConfigError(f"sweep_dim {sweep_dim} out of range")
    baseline_x = np.asarray(baseline_x, dtype=float).ravel()
    baseline_phi = np.asarray(baseline_phi, dtype=float).ravel()
    x_star = np.tile(baseline_x, (grid.size, 1))
    x_star[:, sweep_dim] = grid
    phi_star = np.tile(baseline_phi, (grid.size, 1))
    d_genes = state.n_genes
    curves = np.empty((grid.size, d_genes))
    for d in range(d_genes):
        curves[:, d] = predict_expression(x_star, phi_star, state, d).mean
    ranges = curves.max(axis=0) - curves.min(axis=0)
    ranked = sorted(range(d_genes), key=lambda j: (-ranges[j], j))
    return SweepResult(
        grid=grid,
        gene_indices=ranked[: min(top_k, d_genes)],
        ranges=ranges,
        curves=curves,
    )
