"""Folder-to-feature-file export.

Walks an image root organized as <root>/<label-folder>/<image>, resizes
every image to 448x448 (bicubic), runs the frozen encoder, down-samples
pixel masks onto the patch grid with the any-pixel rule, and writes the
engine's binary feature format atomically.  Folders named "good" or
"normal" are normal; any other folder name is an anomaly type and its
images must have masks.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .encoders import GRID_SIDE, IMAGE_SIDE, make_encoder

MAGIC = b"IDFS"
VERSION = 1
NORMAL_FOLDERS = ("good", "normal")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ExportError(RuntimeError):
    """Job cannot proceed; message lists every offending file."""


@dataclass
class ExportJob:
    image_root: str
    output_path: str
    mask_root: Optional[str] = None
    encoder_id: str = "projection:384"
    device: str = "cpu"


def downsample_mask(pixel_mask: np.ndarray, grid_side: int) -> np.ndarray:
    """Any-pixel max-pool onto the patch grid; zero-pads bottom/right.

    Mirrors the engine's rule bit-exactly: a patch bit is set iff any
    covered pixel is set.
    """
    mask = (np.asarray(pixel_mask) != 0).astype(np.uint8)
    h, w = mask.shape
    ph = (-h) % grid_side
    pw = (-w) % grid_side
    if ph or pw:
        mask = np.pad(mask, ((0, ph), (0, pw)))
    bh = mask.shape[0] // grid_side
    bw = mask.shape[1] // grid_side
    pooled = mask.reshape(grid_side, bh, grid_side, bw).max(axis=(1, 3))
    return pooled.reshape(-1).astype(np.uint8)


def _list_images(root: Path):
    records = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        label = 0 if folder.name.lower() in NORMAL_FOLDERS else 1
        tag = "" if label == 0 else folder.name
        for image_path in sorted(folder.iterdir()):
            if image_path.suffix.lower() in IMAGE_SUFFIXES:
                records.append((image_path, label, tag))
    return records


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((IMAGE_SIDE, IMAGE_SIDE), Image.BICUBIC)
    return np.asarray(rgb, dtype=np.float32) / 255.0


def _find_mask(mask_root: Path, image_path: Path, image_root: Path) -> Optional[Path]:
    relative = image_path.relative_to(image_root)
    for candidate in (
        mask_root / relative,
        (mask_root / relative).with_suffix(".png"),
        mask_root / relative.parent / f"{relative.stem}_mask.png",
    ):
        if candidate.exists():
            return candidate
    return None


def _load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        gray = img.convert("L").resize((IMAGE_SIDE, IMAGE_SIDE), Image.NEAREST)
    return (np.asarray(gray) > 0).astype(np.uint8)


def run_export(job: ExportJob) -> dict:
    """Execute the job; returns a small summary dict (also written as a
    metadata sidecar next to the output file)."""
    root = Path(job.image_root)
    if not root.is_dir():
        raise ExportError(f"image root is not a directory: {root}")
    records = _list_images(root)
    if not records:
        raise ExportError(f"no images found under {root}")

    encoder = make_encoder(job.encoder_id)
    mask_root = Path(job.mask_root) if job.mask_root else None

    problems = []
    images, labels, masks, tags = [], [], [], []
    for image_path, label, tag in records:
        try:
            pixels = _load_image(image_path)
        except Exception as exc:
            problems.append(f"{image_path}: unreadable ({exc})")
            continue
        if label == 1:
            mask_path = _find_mask(mask_root, image_path, root) if mask_root else None
            if mask_path is None:
                problems.append(f"{image_path}: missing mask for abnormal image")
                continue
            bits = downsample_mask(_load_mask(mask_path), GRID_SIDE)
            if not bits.any():
                problems.append(f"{image_path}: abnormal image has an empty mask")
                continue
        else:
            bits = np.zeros(GRID_SIDE * GRID_SIDE, dtype=np.uint8)
        images.append(encoder.encode(pixels).astype(np.float32))
        labels.append(label)
        masks.append(bits)
        tags.append(tag)

    if problems:
        raise ExportError("export failed:\n  " + "\n  ".join(problems))

    _write_feature_file(Path(job.output_path), images, labels, masks, tags,
                        encoder.channels)
    summary = {
        "images": len(images),
        "patches_per_image": GRID_SIDE * GRID_SIDE,
        "channels": encoder.channels,
        "encoder_id": job.encoder_id,
        "encoder_layer": encoder.layer,
    }
    Path(str(job.output_path) + ".meta.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def _write_feature_file(path: Path, images, labels, masks, tags, channels) -> None:
    n_patches = GRID_SIDE * GRID_SIDE
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIII", VERSION, len(images), n_patches, channels)
    for feats, label, bits, tag in zip(images, labels, masks, tags):
        encoded = tag.encode("utf-8")
        buf += struct.pack("<BH", label, len(encoded))
        buf += encoded
        buf += np.packbits(bits, bitorder="little").tobytes()
        buf += feats.astype("<f4").tobytes()
    # atomic: write to a temp file in the same directory, then rename
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(bytes(buf))
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
