"""Projection-based anomaly scoring and score-map assembly.

Patch scores combine how much of a query's denoised deviation survives
projection onto the bank with how far the raw patch sits from its nearest
normal reference.  Scores are clamped to [0, 1]; the image score averages
the top 1% of patch scores; the patch grid is upsampled to pixel resolution
for localization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deviations import DeviationField, extract_deviations, denoise_query
from .encoder import Checkpoint, encode_bank
from .features import Episode, FormatError

UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass
class ScoreMap:
    """Per-patch scores, the upsampled pixel map, and the image score."""

    patch_scores: np.ndarray  # (N,) float32 in [0, 1]
    pixel_map: np.ndarray     # (H, W) float32
    image_score: float

    def validate(self) -> None:
        if np.any(self.patch_scores < 0) or np.any(self.patch_scores > 1):
            raise ValueError("patch scores outside [0, 1]")
        expected = float(np.mean(np.sort(self.patch_scores)[::-1][:top_count(len(self.patch_scores))]))
        if not math.isclose(expected, self.image_score, rel_tol=0, abs_tol=1e-6):
            raise ValueError("image score is not the top-1% patch mean")


def top_count(n_patches: int) -> int:
    """Number of patch scores in the image-level average: ceil(N / 100)."""
    return max(1, math.ceil(0.01 * n_patches))


# --------------------------------------------------------------------------
# Graph pieces (differentiable when fed parameter-backed tensors)


def project_rows(vectors: Tensor, tokens: Tensor) -> Tensor:
    """Sum of rank-1 projections of each row onto every bank row.

    Rows of the bank with squared norm below 1e-12 contribute nothing.
    The result is idempotent only for orthogonal banks.
    """
    dots = ad.matmul(vectors, ad.transpose(tokens))        # (n, M)
    inv_norms = ad.safe_reciprocal(ad.sum_lastdim(ad.mul(tokens, tokens)))
    return ad.matmul(ad.mul_rowvec(dots, inv_norms), tokens)


def patch_score_rows(denoised: Tensor, tokens: Tensor, normal_dist: Tensor) -> Tensor:
    """Clamped per-patch scores from deviation alignment + normal matching."""
    projected = project_rows(denoised, tokens)
    alignment = ad.cosine_rows(denoised, projected)
    raw = ad.affine(ad.add(alignment, normal_dist), 0.5)
    return ad.clamp(raw, 0.0, 1.0)


def image_score_node(patch_scores: Tensor) -> Tensor:
    """Mean of the largest ceil(N/100) patch scores; differentiable through
    the selected entries only."""
    n = patch_scores.shape[0]
    k = top_count(n)
    order = np.argsort(-patch_scores.data, kind="stable")[:k]
    return ad.affine(ad.sum_all(ad.take_rows(patch_scores, order)), 1.0 / k)


# --------------------------------------------------------------------------
# Plain helpers


def project(vector: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Numpy twin of ``project_rows`` for a single vector."""
    with ad.no_grad():
        out = project_rows(ad.constant(np.atleast_2d(vector)), ad.constant(tokens))
    return out.data[0]


def patch_score(denoised: np.ndarray, projected: np.ndarray,
                query: np.ndarray, nearest_normal: np.ndarray) -> float:
    """Single-patch score: 0 is most normal, 1 is most anomalous."""
    raw = 0.5 * (1.0 - ad.cosine_distance(denoised, projected)
                 + ad.cosine_distance(query, nearest_normal))
    return float(np.clip(raw, 0.0, 1.0))


def image_score(patch_scores: np.ndarray) -> float:
    scores = np.asarray(patch_scores, dtype=np.float64)
    k = top_count(scores.size)
    return float(np.mean(np.sort(scores)[::-1][:k]))


def upsample_map(patch_scores: np.ndarray, height: int, width: int,
                 mode: str = "bilinear") -> np.ndarray:
    """Resize a g x g score grid to (height, width).

    Bilinear interpolation uses corner-aligned sampling, so outputs stay
    inside the input range; nearest is available as a flag.
    """
    grid = np.asarray(patch_scores, dtype=np.float64)
    if grid.ndim == 1:
        side = math.isqrt(grid.size)
        if side * side != grid.size:
            raise ValueError("flat score vector is not a square grid")
        grid = grid.reshape(side, side)
    gh, gw = grid.shape
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"mode must be one of {UPSAMPLE_MODES}")

    def src_coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = src_coords(height, gh)
    xs = src_coords(width, gw)
    if mode == "nearest":
        yi = np.clip(np.rint(ys).astype(int), 0, gh - 1)
        xi = np.clip(np.rint(xs).astype(int), 0, gw - 1)
        return grid[np.ix_(yi, xi)].astype(np.float32)

    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    out = (grid[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
           + grid[np.ix_(y0, x1)] * (1 - wy) * wx
           + grid[np.ix_(y1, x0)] * wy * (1 - wx)
           + grid[np.ix_(y1, x1)] * wy * wx)
    return out.astype(np.float32)


# --------------------------------------------------------------------------
# Episode scoring


@dataclass
class PreparedReferences:
    """Reference-side state shared by every query under one manifest."""

    normals: np.ndarray          # (L1 * N, C) float32
    ref_features: np.ndarray     # (L2 * N, C) float32
    ref_field: DeviationField
    ref_mask: np.ndarray         # (L2 * N,)
    tokens: Optional[np.ndarray]  # (M, C) float32, None without an encoder
    knn: int
    rank: int
    alpha: float
    suppress: bool
    grid_side: int


def prepare_references(normal_features: np.ndarray, abnormal_features: np.ndarray,
                       abnormal_mask: np.ndarray, grid_side: int,
                       ckpt: Optional[Checkpoint],
                       knn: Optional[int] = None, rank: Optional[int] = None,
                       alpha: Optional[float] = None,
                       suppress: Optional[bool] = None) -> PreparedReferences:
    """Run the reference-side pipeline once and, when a checkpoint is given,
    encode the deviation bank in eval mode."""
    knn = ckpt.knn if knn is None and ckpt else (12 if knn is None else knn)
    rank = ckpt.rank if rank is None and ckpt else (4 if rank is None else rank)
    alpha = ckpt.alpha if alpha is None and ckpt else (0.8 if alpha is None else alpha)
    if suppress is None:
        suppress = ckpt.suppress if ckpt else True

    field = extract_deviations(abnormal_features, normal_features,
                               k=knn, r=rank, alpha=alpha, suppress=suppress)
    tokens = None
    if ckpt is not None:
        with ad.no_grad():
            out = encode_bank(ckpt.bank, ckpt.params, abnormal_features,
                              field.denoised, abnormal_mask, grid_side,
                              ckpt.config, mode="eval")
        tokens = out.data.copy()
    return PreparedReferences(
        normals=np.asarray(normal_features, dtype=np.float32),
        ref_features=np.asarray(abnormal_features, dtype=np.float32),
        ref_field=field,
        ref_mask=np.asarray(abnormal_mask).reshape(-1),
        tokens=tokens,
        knn=knn, rank=rank, alpha=alpha, suppress=suppress,
        grid_side=grid_side,
    )


def score_query(query_features: np.ndarray, prep: PreparedReferences,
                height: Optional[int] = None, width: Optional[int] = None,
                upsample: str = "bilinear") -> ScoreMap:
    """Deterministic eval-path scoring of one query against fixed references."""
    if prep.tokens is None:
        raise ValueError("score_query needs an encoded bank; use a matching scorer instead")
    field = denoise_query(query_features, prep.normals,
                          k=prep.knn, r=prep.rank, alpha=prep.alpha,
                          suppress=prep.suppress)
    with ad.no_grad():
        scores = patch_score_rows(
            ad.constant(field.denoised),
            ad.constant(prep.tokens),
            ad.constant(field.nearest_normal_dist),
        )
    return finalize_map(scores.data, prep.grid_side, height, width, upsample)


def matching_score_map(query_features: np.ndarray, prep: PreparedReferences,
                       space: str = "feature",
                       height: Optional[int] = None, width: Optional[int] = None,
                       upsample: str = "bilinear") -> ScoreMap:
    """Nearest-neighbor baseline scorers used by the ablation wiring.

    ``space="feature"`` matches raw query patches against the anomalous
    reference patches; ``space="deviation"`` matches denoised query
    deviations against denoised reference deviations.  Both add the
    normal-matching distance term.
    """
    from .deviations import cosine_distance_matrix

    masked = np.flatnonzero(prep.ref_mask)
    if masked.size == 0:
        raise ValueError("matching scorer needs anomalous reference patches")
    if space == "feature":
        query_side = np.asarray(query_features, dtype=np.float32)
        ref_side = prep.ref_features[masked]
        field = denoise_query(query_features, prep.normals, k=prep.knn,
                              r=prep.rank, alpha=prep.alpha, suppress=False)
    elif space == "deviation":
        field = denoise_query(query_features, prep.normals, k=prep.knn,
                              r=prep.rank, alpha=prep.alpha, suppress=prep.suppress)
        query_side = field.denoised
        ref_side = prep.ref_field.denoised[masked]
    else:
        raise ValueError("space must be 'feature' or 'deviation'")

    abn_dist = cosine_distance_matrix(query_side, ref_side).min(axis=1)
    raw = 0.5 * ((1.0 - abn_dist) + field.nearest_normal_dist)
    return finalize_map(np.clip(raw, 0.0, 1.0), prep.grid_side, height, width, upsample)


def finalize_map(patch_scores: np.ndarray, grid_side: int,
                 height: Optional[int], width: Optional[int],
                 upsample: str = "bilinear") -> ScoreMap:
    scores = np.asarray(patch_scores, dtype=np.float32).reshape(-1)
    h = height if height is not None else grid_side
    w = width if width is not None else grid_side
    smap = ScoreMap(
        patch_scores=scores,
        pixel_map=upsample_map(scores.reshape(grid_side, grid_side), h, w, mode=upsample),
        image_score=image_score(scores),
    )
    smap.validate()
    return smap


def score_episode(episode: Episode, ckpt: Checkpoint,
                  height: Optional[int] = None, width: Optional[int] = None,
                  upsample: str = "bilinear") -> ScoreMap:
    """Score one episode end to end with a trained checkpoint (eval mode)."""
    side = math.isqrt(episode.query_features.shape[0])
    prep = prepare_references(episode.normal_features, episode.abnormal_features,
                              episode.abnormal_masks, side, ckpt)
    return score_query(episode.query_features, prep, height, width, upsample)


# --------------------------------------------------------------------------
# Score-map IO

MAP_MAGIC = b"IDSM"


def write_score_map(path, smap: ScoreMap) -> None:
    h, w = smap.pixel_map.shape
    buf = bytearray()
    buf += MAP_MAGIC
    buf += struct.pack("<III", h, w, smap.patch_scores.size)
    buf += smap.pixel_map.astype("<f4").tobytes()
    buf += smap.patch_scores.astype("<f4").tobytes()
    buf += struct.pack("<f", smap.image_score)
    Path(path).write_bytes(bytes(buf))


def read_score_map(path) -> ScoreMap:
    raw = Path(path).read_bytes()
    if raw[:4] != MAP_MAGIC:
        raise FormatError(f"bad score-map magic {raw[:4]!r} at byte 0")
    h, w, n = struct.unpack_from("<III", raw, 4)
    pos = 16
    expected = pos + 4 * (h * w + n) + 4
    if len(raw) != expected:
        raise FormatError(f"score map truncated: {len(raw)} bytes, expected {expected}")
    pixel = np.frombuffer(raw, dtype="<f4", count=h * w, offset=pos).reshape(h, w)
    pos += 4 * h * w
    patch = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
    pos += 4 * n
    (img,) = struct.unpack_from("<f", raw, pos)
    return ScoreMap(patch_scores=patch.copy(), pixel_map=pixel.copy(), image_score=float(img))
