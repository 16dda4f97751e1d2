"""Patch-feature persistence and episode construction.

The on-disk feature format ("IDFS") is little-endian binary: a 4-byte magic,
u32 version, u32 image count, u32 patch count, u32 channel count, then one
image record each of label u8, anomaly-type string (u16 length + UTF-8),
patch mask bits packed LSB-first, and row-major f32 features.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"IDFS"
VERSION = 1


class FormatError(ValueError):
    """Corrupt or mis-typed feature file; message names the byte offset."""


class InvariantError(ValueError):
    """A feature set violates the label/mask/grid contract."""


class CapacityError(ValueError):
    """A pool is too small to honor the requested episode shape."""


@dataclass
class FeatureSet:
    """Dense patch features for a set of images, with labels and patch masks."""

    features: np.ndarray      # (n_images, N, C) float32
    image_labels: np.ndarray  # (n_images,) uint8; 0 normal, 1 abnormal
    patch_masks: np.ndarray   # (n_images, N) uint8 in {0, 1}
    anomaly_types: list       # per-image tag; "" for normal images

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.image_labels = np.ascontiguousarray(self.image_labels, dtype=np.uint8)
        self.patch_masks = np.ascontiguousarray(self.patch_masks, dtype=np.uint8)
        self.validate()

    @property
    def n_images(self) -> int:
        return self.features.shape[0]

    @property
    def n_patches(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    @property
    def grid_side(self) -> int:
        return int(math.isqrt(self.n_patches))

    def validate(self) -> None:
        n, patches, _ = self.features.shape
        if self.image_labels.shape != (n,) or self.patch_masks.shape != (n, patches):
            raise InvariantError("label/mask shapes disagree with features")
        if len(self.anomaly_types) != n:
            raise InvariantError("anomaly_types length disagrees with image count")
        side = math.isqrt(patches)
        if side * side != patches:
            raise InvariantError(f"patch count {patches} is not a perfect square")
        if np.any(self.image_labels > 1):
            raise InvariantError("labels must be 0 or 1")
        if np.any(self.patch_masks > 1):
            raise InvariantError("patch masks must be binary")
        for i in range(n):
            set_bits = int(self.patch_masks[i].sum())
            if self.image_labels[i] == 0 and set_bits:
                raise InvariantError(f"normal image {i} has {set_bits} mask bits set")
            if self.image_labels[i] == 1 and not set_bits:
                raise InvariantError(f"abnormal image {i} has an empty mask")

    def normal_ids(self) -> np.ndarray:
        return np.flatnonzero(self.image_labels == 0)

    def abnormal_ids(self) -> np.ndarray:
        return np.flatnonzero(self.image_labels == 1)

    def ids_of_type(self, anomaly_type: str) -> np.ndarray:
        return np.array(
            [i for i in self.abnormal_ids() if self.anomaly_types[i] == anomaly_type],
            dtype=np.int64,
        )

    def present_types(self) -> list:
        seen = []
        for i in self.abnormal_ids():
            t = self.anomaly_types[int(i)]
            if t not in seen:
                seen.append(t)
        return sorted(seen)


# --------------------------------------------------------------------------
# Binary IO


def write_feature_file(path, fs: FeatureSet) -> None:
    fs.validate()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIII", VERSION, fs.n_images, fs.n_patches, fs.channels)
    for i in range(fs.n_images):
        tag = fs.anomaly_types[i].encode("utf-8")
        buf += struct.pack("<BH", int(fs.image_labels[i]), len(tag))
        buf += tag
        buf += np.packbits(fs.patch_masks[i], bitorder="little").tobytes()
        buf += fs.features[i].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_feature_file(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    pos = 0

    def need(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(raw):
            raise FormatError(f"truncated while reading {what} at byte {pos}")
        chunk = raw[pos:pos + count]
        pos += count
        return chunk

    magic = need(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    version, n_images, n_patches, channels = struct.unpack("<IIII", need(16, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")

    mask_bytes = (n_patches + 7) // 8
    features = np.empty((n_images, n_patches, channels), dtype=np.float32)
    labels = np.empty(n_images, dtype=np.uint8)
    masks = np.empty((n_images, n_patches), dtype=np.uint8)
    types = []
    for i in range(n_images):
        labels[i], tag_len = struct.unpack("<BH", need(3, f"image {i} header"))
        types.append(need(tag_len, f"image {i} tag").decode("utf-8"))
        packed = np.frombuffer(need(mask_bytes, f"image {i} mask"), dtype=np.uint8)
        masks[i] = np.unpackbits(packed, count=n_patches, bitorder="little")
        payload = need(4 * n_patches * channels, f"image {i} features")
        features[i] = np.frombuffer(payload, dtype="<f4").reshape(n_patches, channels)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes at byte {pos}")
    try:
        return FeatureSet(features, labels, masks, types)
    except InvariantError as exc:
        raise FormatError(f"payload violates feature-set invariants: {exc}") from exc


# --------------------------------------------------------------------------
# Mask down-sampling


def downsample_mask(pixel_mask: np.ndarray, grid_side: int) -> np.ndarray:
    """Any-pixel max-pool of an (H, W) binary mask onto a g*g patch grid.

    Non-divisible masks are zero-padded on the bottom/right first, so padding
    can never invent anomaly.
    """
    mask = np.asarray(pixel_mask)
    if mask.ndim != 2:
        raise InvariantError("pixel mask must be 2-D")
    mask = (mask != 0).astype(np.uint8)
    h, w = mask.shape
    ph = (-h) % grid_side
    pw = (-w) % grid_side
    if ph or pw:
        mask = np.pad(mask, ((0, ph), (0, pw)))
    bh = mask.shape[0] // grid_side
    bw = mask.shape[1] // grid_side
    pooled = mask.reshape(grid_side, bh, grid_side, bw).max(axis=(1, 3))
    return pooled.reshape(-1).astype(np.uint8)


# --------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    """One query plus fixed normal/abnormal reference features."""

    query_features: np.ndarray   # (N, C)
    query_mask: np.ndarray       # (N,)
    query_label: int
    normal_features: np.ndarray  # (L1 * N, C)
    abnormal_features: np.ndarray  # (L2 * N, C)
    abnormal_masks: np.ndarray   # (L2 * N,)
    query_id: int
    normal_ids: list
    abnormal_ids: list
    anomaly_type: str

    def __post_init__(self):
        l1 = len(self.normal_ids)
        l2 = len(self.abnormal_ids)
        if l1 < 1 or l2 < 1:
            raise InvariantError("episodes need at least one reference of each kind")
        if self.query_id in self.normal_ids or self.query_id in self.abnormal_ids:
            raise InvariantError("query may not appear among its own references")

    @property
    def shots(self) -> tuple:
        return len(self.normal_ids), len(self.abnormal_ids)


def _check_shots(l1: int, l2: int, allow_equal_shots: bool) -> None:
    if l1 < 1 or l2 < 1:
        raise CapacityError("shot counts must be at least 1")
    if l1 <= l2 and not allow_equal_shots:
        raise CapacityError(
            f"normal shots ({l1}) must exceed abnormal shots ({l2}); "
            "pass allow_equal_shots to override"
        )


def _eligible_types(pool: FeatureSet, l2: int, exclude_id: Optional[int]) -> list:
    counts = {}
    for i in pool.abnormal_ids():
        i = int(i)
        if i == exclude_id:
            continue
        counts[pool.anomaly_types[i]] = counts.get(pool.anomaly_types[i], 0) + 1
    return sorted(t for t, c in counts.items() if c >= l2)


def _gather(pool: FeatureSet, ids) -> np.ndarray:
    return pool.features[np.asarray(ids, dtype=np.int64)].reshape(-1, pool.channels)


def episode_from_ids(pool: FeatureSet, query_id: int, normal_ids, abnormal_ids,
                     anomaly_type: str) -> Episode:
    normal_ids = [int(i) for i in normal_ids]
    abnormal_ids = [int(i) for i in abnormal_ids]
    return Episode(
        query_features=pool.features[query_id].copy(),
        query_mask=pool.patch_masks[query_id].copy(),
        query_label=int(pool.image_labels[query_id]),
        normal_features=_gather(pool, normal_ids),
        abnormal_features=_gather(pool, abnormal_ids),
        abnormal_masks=pool.patch_masks[np.asarray(abnormal_ids, dtype=np.int64)].reshape(-1),
        query_id=int(query_id),
        normal_ids=normal_ids,
        abnormal_ids=abnormal_ids,
        anomaly_type=anomaly_type,
    )


def _feasible_queries(pool: FeatureSet, l1: int, l2: int) -> list:
    """Images that still leave room for L1 normals and L2 same-type abnormals."""
    n_normal = len(pool.normal_ids())
    type_counts = {}
    for i in pool.abnormal_ids():
        t = pool.anomaly_types[int(i)]
        type_counts[t] = type_counts.get(t, 0) + 1
    feasible = []
    for q in range(pool.n_images):
        normals_left = n_normal - (1 if pool.image_labels[q] == 0 else 0)
        if normals_left < l1:
            continue
        q_type = pool.anomaly_types[q] if pool.image_labels[q] == 1 else None
        if any(count - (1 if t == q_type else 0) >= l2
               for t, count in type_counts.items()):
            feasible.append(q)
    return feasible


def build_training_episode(pool: FeatureSet, l1: int, l2: int,
                           rng: np.random.Generator,
                           allow_equal_shots: bool = False) -> Episode:
    """Sample one training episode: uniform query over the images that admit
    references, uniform normal references, abnormal references from one
    uniformly chosen anomaly type, query always excluded from the references.
    Sampling is without replacement."""
    _check_shots(l1, l2, allow_equal_shots)
    candidates = _feasible_queries(pool, l1, l2)
    if not candidates:
        n_norm = len(pool.normal_ids())
        raise CapacityError(
            f"no feasible query: pool has {n_norm} normal images and no "
            f"anomaly type can spare {l2} references alongside {l1} normals"
        )
    query_id = candidates[int(rng.integers(len(candidates)))]

    normal_candidates = [int(i) for i in pool.normal_ids() if int(i) != query_id]
    if len(normal_candidates) < l1:
        raise CapacityError(
            f"need {l1} normal references, only {len(normal_candidates)} available"
        )
    types = _eligible_types(pool, l2, exclude_id=query_id)
    if not types:
        raise CapacityError(f"no anomaly type offers {l2} reference images")

    anomaly_type = types[int(rng.integers(len(types)))]
    type_ids = [int(i) for i in pool.ids_of_type(anomaly_type) if int(i) != query_id]
    normal_ids = sorted(int(i) for i in rng.choice(normal_candidates, size=l1, replace=False))
    abnormal_ids = sorted(int(i) for i in rng.choice(type_ids, size=l2, replace=False))
    return episode_from_ids(pool, query_id, normal_ids, abnormal_ids, anomaly_type)


# --------------------------------------------------------------------------
# Inference manifests

SETTINGS = ("general", "hard")


@dataclass(frozen=True)
class EpisodeManifest:
    """Frozen reference pick reused for every query of one dataset."""

    dataset: str
    seed: int
    l1: int
    l2: int
    setting: str
    normal_ids: tuple
    abnormal_ids: tuple
    anomaly_type: str

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise InvariantError(f"setting must be one of {SETTINGS}")


def build_inference_manifest(dataset: FeatureSet, l1: int, l2: int,
                             rng: np.random.Generator, setting: str,
                             dataset_name: str = "dataset",
                             seed: int = 0,
                             allow_equal_shots: bool = False) -> EpisodeManifest:
    """Fix references for a dataset: L1 normals plus L2 abnormals drawn from
    one uniformly selected anomaly type."""
    _check_shots(l1, l2, allow_equal_shots)
    if setting not in SETTINGS:
        raise InvariantError(f"setting must be one of {SETTINGS}")
    normal_candidates = [int(i) for i in dataset.normal_ids()]
    if len(normal_candidates) < l1:
        raise CapacityError(
            f"need {l1} normal references, only {len(normal_candidates)} available"
        )
    types = _eligible_types(dataset, l2, exclude_id=None)
    if not types:
        raise CapacityError(f"no anomaly type offers {l2} reference images")
    anomaly_type = types[int(rng.integers(len(types)))]
    type_ids = [int(i) for i in dataset.ids_of_type(anomaly_type)]
    normal_ids = tuple(sorted(int(i) for i in rng.choice(normal_candidates, size=l1, replace=False)))
    abnormal_ids = tuple(sorted(int(i) for i in rng.choice(type_ids, size=l2, replace=False)))
    return EpisodeManifest(
        dataset=dataset_name,
        seed=seed,
        l1=l1,
        l2=l2,
        setting=setting,
        normal_ids=normal_ids,
        abnormal_ids=abnormal_ids,
        anomaly_type=anomaly_type,
    )


def write_manifest(path, manifest: EpisodeManifest) -> None:
    doc = {
        "dataset": manifest.dataset,
        "seed": manifest.seed,
        "L1": manifest.l1,
        "L2": manifest.l2,
        "setting": manifest.setting,
        "normal_ids": list(manifest.normal_ids),
        "abnormal_ids": list(manifest.abnormal_ids),
        "anomaly_type": manifest.anomaly_type,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> EpisodeManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    try:
        return EpisodeManifest(
            dataset=str(doc["dataset"]),
            seed=int(doc["seed"]),
            l1=int(doc["L1"]),
            l2=int(doc["L2"]),
            setting=str(doc["setting"]),
            normal_ids=tuple(int(i) for i in doc["normal_ids"]),
            abnormal_ids=tuple(int(i) for i in doc["abnormal_ids"]),
            anomaly_type=str(doc["anomaly_type"]),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing field {exc}") from exc


def hard_filter(dataset: FeatureSet, manifest: EpisodeManifest) -> list:
    """Query ids for the hard setting: drop every image of the reference
    anomaly type, keep all normal images."""
    if manifest.setting != "hard":
        raise InvariantError("hard_filter requires a hard-setting manifest")
    keep = []
    for i in range(dataset.n_images):
        if dataset.image_labels[i] == 1 and dataset.anomaly_types[i] == manifest.anomaly_type:
            continue
        keep.append(i)
    return keep
