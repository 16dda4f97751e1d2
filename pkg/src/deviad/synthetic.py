"""Synthetic feature worlds with known ground truth.

Normal patches are a fixed per-cell base pattern plus Gaussian variation
confined to a nuisance subspace plus small isotropic noise.  Anomalous
patches are additionally shifted along one of D planted directions that are
mutually orthogonal and orthogonal to the nuisance subspace.  Worlds are
emitted as ordinary feature sets so the whole pipeline runs on them
unchanged, and the planted geometry doubles as an oracle for acceptance
tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureSet


class WorldError(ValueError):
    """Invalid world specification."""


@dataclass
class SynthWorldSpec:
    channels: int = 64
    grid_side: int = 8
    n_normal_images: int = 200
    n_abnormal_images: int = 60
    n_test_normal: int = 100
    n_test_abnormal: int = 60
    nuisance_dim: int = 4
    nuisance_amplitude: float = 1.2
    deviation_dirs: int = 3
    offset_magnitude: float = 2.0
    anomaly_patch_fraction: float = 0.08
    base_scale: float = 4.0
    noise_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.deviation_dirs + self.nuisance_dim >= self.channels:
            raise WorldError("planted directions plus nuisance must fit inside C")
        if self.deviation_dirs < 1 or self.nuisance_dim < 1:
            raise WorldError("need at least one planted direction and nuisance axis")


@dataclass
class SynthWorld:
    spec: SynthWorldSpec
    train_pool: FeatureSet
    test_set: FeatureSet
    directions: np.ndarray      # (C, D) orthonormal planted deviation directions
    nuisance_basis: np.ndarray  # (C, nuisance_dim) orthonormal
    base_patterns: np.ndarray   # (N, C)


def _make_images(spec: SynthWorldSpec, base: np.ndarray, nuisance: np.ndarray,
                 directions: np.ndarray, n_normal: int, n_abnormal: int,
                 rng: np.random.Generator) -> FeatureSet:
    n_patches = spec.grid_side ** 2
    n_images = n_normal + n_abnormal
    feats = np.empty((n_images, n_patches, spec.channels), dtype=np.float32)
    labels = np.zeros(n_images, dtype=np.uint8)
    masks = np.zeros((n_images, n_patches), dtype=np.uint8)
    types = [""] * n_images

    patches_per_anomaly = max(1, round(spec.anomaly_patch_fraction * n_patches))
    for i in range(n_images):
        latent = rng.normal(0.0, spec.nuisance_amplitude,
                            size=(n_patches, spec.nuisance_dim))
        noise = rng.normal(0.0, spec.noise_scale, size=(n_patches, spec.channels))
        img = base + latent @ nuisance.T + noise
        if i >= n_normal:
            d = (i - n_normal) % spec.deviation_dirs
            hit = rng.choice(n_patches, size=patches_per_anomaly, replace=False)
            img[hit] += spec.offset_magnitude * directions[:, d]
            labels[i] = 1
            masks[i, hit] = 1
            types[i] = f"dir{d}"
        feats[i] = img.astype(np.float32)
    return FeatureSet(feats, labels, masks, types)


def generate_world(spec: SynthWorldSpec) -> SynthWorld:
    """Deterministically build the train pool, test set and ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5D]))
    n_patches = spec.grid_side ** 2

    q, _ = np.linalg.qr(rng.normal(size=(spec.channels,
                                         spec.nuisance_dim + spec.deviation_dirs)))
    nuisance = q[:, :spec.nuisance_dim]
    directions = q[:, spec.nuisance_dim:spec.nuisance_dim + spec.deviation_dirs]

    base = rng.normal(size=(n_patches, spec.channels))
    base = spec.base_scale * base / np.linalg.norm(base, axis=1, keepdims=True)

    train_pool = _make_images(spec, base, nuisance, directions,
                              spec.n_normal_images, spec.n_abnormal_images, rng)
    test_set = _make_images(spec, base, nuisance, directions,
                            spec.n_test_normal, spec.n_test_abnormal, rng)
    return SynthWorld(spec=spec, train_pool=train_pool, test_set=test_set,
                      directions=directions, nuisance_basis=nuisance,
                      base_patterns=base)


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angles between two column-orthonormal subspaces, ascending radians."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for name, mat in (("first", a), ("second", b)):
        gram = mat.T @ mat
        if not np.allclose(gram, np.eye(mat.shape[1]), atol=1e-5):
            raise WorldError(f"{name} basis is not column-orthonormal")
    sv = np.linalg.svd(a.T @ b, compute_uv=False)
    return np.arccos(np.clip(np.sort(sv)[::-1], -1.0, 1.0))
