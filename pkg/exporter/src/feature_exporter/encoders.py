"""Frozen patch encoders for the exporter.

Every encoder maps a 448x448 RGB image to a 32x32 grid of patch embeddings
(1024 patches).  The default deterministic encoder projects raw 14x14
patches through a seeded random matrix and needs no downloads; the ViT
encoder wraps a public pre-trained ViT-S/14 through torch hub when weights
are available.
"""

from __future__ import annotations

import hashlib

import numpy as np

IMAGE_SIDE = 448
PATCH_SIDE = 14
GRID_SIDE = IMAGE_SIDE // PATCH_SIDE  # 32
N_PATCHES = GRID_SIDE * GRID_SIDE     # 1024


class EncoderError(RuntimeError):
    """Unknown encoder id or unavailable backend."""


class ProjectionEncoder:
    """Deterministic seeded projection of raw patch pixels.

    Not a learned representation; exists so the full pipeline (and its
    tests) runs without downloading model weights.  The projection matrix
    is derived from the encoder id, so identical ids give bit-identical
    features forever.
    """

    layer = "raw-projection"

    def __init__(self, encoder_id: str, channels: int = 384):
        self.encoder_id = encoder_id
        self.channels = channels
        seed = int.from_bytes(hashlib.sha256(encoder_id.encode()).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        in_dim = PATCH_SIDE * PATCH_SIDE * 3
        self.matrix = rng.normal(0.0, 1.0 / np.sqrt(in_dim),
                                 size=(in_dim, channels)).astype(np.float32)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(448, 448, 3) float32 in [0, 1] -> (1024, channels) float32."""
        patches = image.reshape(GRID_SIDE, PATCH_SIDE, GRID_SIDE, PATCH_SIDE, 3)
        patches = patches.transpose(0, 2, 1, 3, 4).reshape(N_PATCHES, -1)
        return (patches - patches.mean(axis=1, keepdims=True)) @ self.matrix


class VitEncoder:
    """Public pre-trained ViT-S/14 backbone; final-layer patch tokens."""

    layer = "final"

    def __init__(self, encoder_id: str):
        self.encoder_id = encoder_id
        self.channels = 384
        try:
            import torch
        except ImportError as exc:
            raise EncoderError("torch is required for the ViT encoder") from exc
        try:
            self._torch = torch
            self.model = torch.hub.load("facebookresearch/dinov2", "dinov2_vits14")
        except Exception as exc:
            raise EncoderError(
                f"could not load pre-trained weights for '{encoder_id}': {exc}"
            ) from exc
        self.model.eval()

    def encode(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        std = np.array([0.229, 0.224, 0.225], dtype=np.float32)
        tensor = torch.from_numpy(((image - mean) / std).transpose(2, 0, 1)[None])
        with torch.no_grad():
            tokens = self.model.forward_features(tensor)["x_norm_patchtokens"]
        return tokens[0].numpy().astype(np.float32)


def make_encoder(encoder_id: str):
    if encoder_id.startswith("projection"):
        parts = encoder_id.split(":")
        channels = int(parts[1]) if len(parts) > 1 else 384
        return ProjectionEncoder(encoder_id, channels)
    if encoder_id in ("vit-s14", "dinov2-vits14"):
        return VitEncoder(encoder_id)
    raise EncoderError(f"unknown encoder id '{encoder_id}'")
