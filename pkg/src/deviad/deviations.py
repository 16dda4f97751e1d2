"""Residual deviations and local-subspace suppression of normal variation.

Every patch feature is contrasted against its nearest normal reference
(cosine distance), and the component of that residual lying in the locally
estimated normal-variation subspace is scaled away.  All math runs at
64-bit internally; outputs are cast to the pipeline's 32-bit precision.

Nothing here is trainable: these outputs are constants with respect to the
encoder parameters, so no gradients flow through the neighbor search or the
eigendecompositions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

ZERO_NORM_EPS = 1e-12
# Eigenvalues at or below this fraction of the total variance are treated as
# unobserved directions and never used for suppression.
RANK_EPS = 1e-10


class SubspaceError(ValueError):
    """Contract violation in neighbor or subspace construction."""


@dataclass
class LocalSubspace:
    """Mean and orthonormal variation basis around one anchor patch."""

    anchor: int
    mean: np.ndarray         # (C,)
    basis: np.ndarray        # (C, r), column-orthonormal
    eigenvalues: np.ndarray  # (r,), descending, >= 0
    effective_rank: int      # columns actually carrying observed variance

    def effective_basis(self) -> np.ndarray:
        return self.basis[:, : self.effective_rank]


@dataclass
class DeviationField:
    """Per-patch residuals, denoised residuals and their local subspaces."""

    residuals: np.ndarray           # (P, C) float32
    denoised: np.ndarray            # (P, C) float32
    nearest_normal_idx: np.ndarray  # (P,) int64
    nearest_normal_dist: np.ndarray  # (P,) float32, cosine distance
    means: np.ndarray               # (P, C) float64 neighborhood means
    bases: np.ndarray               # (P, C, r) float64
    eigenvalues: np.ndarray         # (P, r) float64
    effective_ranks: np.ndarray     # (P,) int64
    degenerate_count: int           # patches whose neighbors were rank-deficient

    def subspace(self, i: int) -> LocalSubspace:
        return LocalSubspace(
            anchor=i,
            mean=self.means[i],
            basis=self.bases[i],
            eigenvalues=self.eigenvalues[i],
            effective_rank=int(self.effective_ranks[i]),
        )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < ZERO_NORM_EPS, 1.0, norms)
    out = x / safe
    out[norms[:, 0] < ZERO_NORM_EPS] = 0.0
    return out


def cosine_distance_matrix(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Pairwise 1 - cosine at 64-bit; zero vectors count as similarity 0."""
    q = _unit_rows(np.asarray(queries, dtype=np.float64))
    p = _unit_rows(np.asarray(pool, dtype=np.float64))
    return 1.0 - q @ p.T


def nearest_normal(feature: np.ndarray, normals: np.ndarray) -> tuple:
    """Index and cosine distance of the closest normal patch; ties go to the
    lowest index."""
    normals = np.asarray(normals)
    if normals.ndim != 2 or normals.shape[0] == 0:
        raise SubspaceError("normal pool must be a non-empty (P, C) array")
    dist = cosine_distance_matrix(feature[None, :], normals)[0]
    idx = int(np.argmin(dist))
    return idx, float(dist[idx])


def topk_neighbors(feature: np.ndarray, normals: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest normal patches, ascending distance then index."""
    normals = np.asarray(normals)
    if k > normals.shape[0]:
        raise SubspaceError(f"k={k} exceeds pool size {normals.shape[0]}")
    dist = cosine_distance_matrix(feature[None, :], normals)[0]
    return np.argsort(dist, kind="stable")[:k].astype(np.int64)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if basis.size == 0:
        return basis
    lead = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[lead, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs[None, :]


def _complete_orthonormal(basis: np.ndarray, r: int) -> np.ndarray:
    """Pad rank-deficient bases with deterministic orthonormal completions."""
    c, have = basis.shape
    cols = [basis[:, j] for j in range(have)]
    for axis in range(c):
        if len(cols) == r:
            break
        cand = np.zeros(c)
        cand[axis] = 1.0
        for col in cols:
            cand = cand - np.dot(cand, col) * col
        norm = np.linalg.norm(cand)
        if norm > 1e-6:
            cols.append(cand / norm)
    if len(cols) < r:
        raise SubspaceError("could not complete an orthonormal basis")
    return np.stack(cols, axis=1)


def local_pca(neighbors: np.ndarray, r: int, anchor: int = 0) -> LocalSubspace:
    """Top-r variation directions of a k-neighbor cloud.

    The covariance (divisor k-1) is diagonalized through the k x k Gram
    matrix of the centered neighbors, which shares its nonzero spectrum and
    is far smaller than C x C.  Columns are sign-fixed for reproducibility.
    Rank-deficient clouds are padded to r columns with zero-eigenvalue
    completions; the padded columns never take part in suppression.
    """
    x = np.asarray(neighbors, dtype=np.float64)
    k, c = x.shape
    if k < 2:
        raise SubspaceError("need at least two neighbors")
    if not r < min(k - 1, c):
        raise SubspaceError(f"r={r} must satisfy r < min(k-1, C) = {min(k - 1, c)}")
    mean = x.mean(axis=0)
    centered = x - mean
    gram = centered @ centered.T / (k - 1)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals, kind="stable")[::-1][:r]
    evals = np.clip(evals[order], 0.0, None)

    total = float(np.trace(gram))
    keep = evals > RANK_EPS * max(total, ZERO_NORM_EPS)
    effective = int(np.sum(keep))

    basis = np.zeros((c, r))
    for j in range(effective):
        v = centered.T @ evecs[:, order[j]]
        basis[:, j] = v / np.linalg.norm(v)
    basis[:, :effective] = _fix_signs(basis[:, :effective])
    if effective < r:
        basis = _complete_orthonormal(basis[:, :effective], r)
        evals[effective:] = 0.0
    return LocalSubspace(anchor=anchor, mean=mean, basis=basis,
                         eigenvalues=evals, effective_rank=effective)


def residual_deviations(patches: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Each patch minus its nearest normal reference."""
    normals = np.asarray(normals)
    if normals.ndim != 2 or normals.shape[0] == 0:
        raise SubspaceError("normal pool must be a non-empty (P, C) array")
    dist = cosine_distance_matrix(patches, normals)
    idx = np.argmin(dist, axis=1)
    return np.asarray(patches, dtype=np.float64) - np.asarray(normals, dtype=np.float64)[idx]


def denoise(residuals: np.ndarray, subspaces: list, alpha: float) -> np.ndarray:
    """Suppress the alpha-scaled subspace component of each residual."""
    if not 0.0 <= alpha <= 1.0:
        raise SubspaceError(f"alpha={alpha} outside [0, 1]")
    out = np.array(residuals, dtype=np.float64, copy=True)
    for i, sub in enumerate(subspaces):
        u = sub.effective_basis()
        if u.size:
            out[i] -= alpha * (u @ (u.T @ out[i]))
    return out


def extract_deviations(patches: np.ndarray, normals: np.ndarray, k: int, r: int,
                       alpha: float, suppress: bool = True) -> DeviationField:
    """Full deviation pipeline for a stack of patches against a normal pool.

    Per patch: nearest normal residual, top-k neighborhood, local PCA, then
    alpha-scaled suppression.  ``suppress=False`` short-circuits the subspace
    stage and returns raw residuals as the denoised field.
    """
    patches64 = np.asarray(patches, dtype=np.float64)
    normals64 = np.asarray(normals, dtype=np.float64)
    if normals64.ndim != 2 or normals64.shape[0] == 0:
        raise SubspaceError("normal pool must be a non-empty (P, C) array")
    p, c = patches64.shape

    dist = cosine_distance_matrix(patches64, normals64)
    nn_idx = np.argmin(dist, axis=1).astype(np.int64)
    nn_dist = dist[np.arange(p), nn_idx]
    residuals = patches64 - normals64[nn_idx]

    if not suppress:
        return DeviationField(
            residuals=residuals.astype(np.float32),
            denoised=residuals.astype(np.float32),
            nearest_normal_idx=nn_idx,
            nearest_normal_dist=nn_dist.astype(np.float32),
            means=np.zeros((p, c)),
            bases=np.zeros((p, c, 0)),
            eigenvalues=np.zeros((p, 0)),
            effective_ranks=np.zeros(p, dtype=np.int64),
            degenerate_count=0,
        )

    if k > normals64.shape[0]:
        raise SubspaceError(f"k={k} exceeds pool size {normals64.shape[0]}")
    if not r < min(k - 1, c):
        raise SubspaceError(f"r={r} must satisfy r < min(k-1, C) = {min(k - 1, c)}")
    if not 0.0 <= alpha <= 1.0:
        raise SubspaceError(f"alpha={alpha} outside [0, 1]")

    neighbor_idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    neighbors = normals64[neighbor_idx]                  # (P, k, C)
    means = neighbors.mean(axis=1)
    centered = neighbors - means[:, None, :]
    gram = centered @ centered.transpose(0, 2, 1) / (k - 1)
    evals_all, evecs_all = np.linalg.eigh(gram)          # ascending
    evals_all = evals_all[:, ::-1][:, :r]
    evecs_all = evecs_all[:, :, ::-1][:, :, :r]
    evals_all = np.clip(evals_all, 0.0, None)

    totals = np.trace(gram, axis1=1, axis2=2)
    keep = evals_all > RANK_EPS * np.maximum(totals, ZERO_NORM_EPS)[:, None]
    ranks = keep.sum(axis=1).astype(np.int64)

    raw = centered.transpose(0, 2, 1) @ evecs_all        # (P, C, r)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    bases = np.where(keep[:, None, :], raw / np.where(norms < ZERO_NORM_EPS, 1.0, norms), 0.0)

    # Sign fix: leading (largest-|entry|) coordinate of each kept column positive.
    lead = np.argmax(np.abs(bases), axis=1)              # (P, r)
    lead_vals = np.take_along_axis(bases, lead[:, None, :], axis=1)[:, 0, :]
    signs = np.where(lead_vals < 0, -1.0, 1.0)
    bases = bases * signs[:, None, :]

    degenerate = int(np.sum(ranks < r))
    for i in np.flatnonzero(ranks < r):
        bases[i] = _complete_orthonormal(bases[i][:, : ranks[i]], r)
        evals_all[i, ranks[i]:] = 0.0

    effective = np.where(keep[:, None, :], bases, 0.0)
    coeffs = (effective.transpose(0, 2, 1) @ residuals[:, :, None])
    denoised = residuals - alpha * (effective @ coeffs)[:, :, 0]

    return DeviationField(
        residuals=residuals.astype(np.float32),
        denoised=denoised.astype(np.float32),
        nearest_normal_idx=nn_idx,
        nearest_normal_dist=nn_dist.astype(np.float32),
        means=means,
        bases=bases,
        eigenvalues=evals_all,
        effective_ranks=ranks,
        degenerate_count=degenerate,
    )


def denoise_query(query_features: np.ndarray, normals: np.ndarray, k: int, r: int,
                  alpha: float, suppress: bool = True) -> DeviationField:
    """Query-side deviation extraction; identical math to the reference path."""
    return extract_deviations(query_features, normals, k, r, alpha, suppress=suppress)
