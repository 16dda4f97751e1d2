"""Learnable deviation bank encoded by masked cross-attention.

A bank of M learnable vectors attends over abnormal-reference features
(keys, with sinusoidal grid positions) and their denoised deviations
(values).  Normal reference patches are shut out of the attention by a
large negative additive bias.  The refreshed bank rows are the directions
queries are later projected onto.

``dual_loss`` trains the bank: masked denoised deviations are pulled toward
their nearest bank row (cosine distance) while distinct rows are pushed
toward mutual orthogonality.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_BIAS, Tensor

ATTN_SCALES = ("per_head", "embed_dim")
POSENC_MODES = ("keys", "off")


class MaskError(ValueError):
    """Reference mask unusable for attention (no anomalous patches)."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint payload."""


@dataclass
class EncoderConfig:
    """Architecture switches; defaults follow the reference configuration."""

    heads: int = 8
    dropout: float = 0.1
    residuals: bool = True
    posenc: str = "keys"
    attn_scale: str = "per_head"

    def __post_init__(self):
        if self.posenc not in POSENC_MODES:
            raise ValueError(f"posenc must be one of {POSENC_MODES}")
        if self.attn_scale not in ATTN_SCALES:
            raise ValueError(f"attn_scale must be one of {ATTN_SCALES}")


@dataclass
class DeviationBank:
    """M learnable deviation vectors."""

    tokens: Tensor  # (M, C)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


@dataclass
class EncoderParams:
    """Projection and feed-forward weights of the encoder block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> dict:
        return {
            "wq": self.wq, "bq": self.bq,
            "wk": self.wk, "bk": self.bk,
            "wv": self.wv, "bv": self.bv,
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
        }

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named().values())


def expected_parameter_count(channels: int, hidden_multiplier: int = 4) -> int:
    """Closed-form parameter count of the encoder block (excluding the bank)."""
    c = channels
    h = hidden_multiplier * c
    qkv = 3 * (c * c + c)
    ffn = (c * h + h) + (h * c + c)
    return qkv + ffn


def init_bank(m: int, channels: int, rng: np.random.Generator) -> DeviationBank:
    """Seeded zero-mean Gaussian rows with standard embedding scale 0.02."""
    return DeviationBank(tokens=ad.parameter(
        rng.normal(0.0, 0.02, size=(m, channels)), dtype=np.float32))


def init_params(channels: int, rng: np.random.Generator,
                hidden_multiplier: int = 4) -> EncoderParams:
    """Seeded uniform(+-1/sqrt(C)) weights with zero biases."""
    c = channels
    h = hidden_multiplier * c
    bound = 1.0 / np.sqrt(c)

    def lin(rows, cols):
        return ad.parameter(rng.uniform(-bound, bound, size=(rows, cols)),
                            dtype=np.float32)

    def bias(n):
        return ad.parameter(np.zeros(n), dtype=np.float32)

    return EncoderParams(
        wq=lin(c, c), bq=bias(c),
        wk=lin(c, c), bk=bias(c),
        wv=lin(c, c), bv=bias(c),
        w1=lin(c, h), b1=bias(h),
        w2=lin(h, c), b2=bias(c),
    )


def trainable_parameters(bank: DeviationBank, params: EncoderParams) -> dict:
    named = {"tokens": bank.tokens}
    named.update(params.named())
    return named


# --------------------------------------------------------------------------
# Positional encoding


def _sinusoid(positions: np.ndarray, width: int) -> np.ndarray:
    """Interleaved sin/cos encoding of integer positions into ``width`` dims."""
    pe = np.zeros((len(positions), width))
    idx = np.arange(width)
    div = np.power(10000.0, (idx // 2 * 2) / max(width, 1))
    angles = positions[:, None] / div[None, :]
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


def grid_positional_encoding(n_images: int, grid_side: int, channels: int) -> np.ndarray:
    """Row/column sinusoidal encoding over a g x g patch grid, restarting at
    every reference image."""
    rows = np.repeat(np.arange(grid_side), grid_side).astype(np.float64)
    cols = np.tile(np.arange(grid_side), grid_side).astype(np.float64)
    half = channels // 2
    per_image = np.concatenate(
        [_sinusoid(rows, half), _sinusoid(cols, channels - half)], axis=1
    )
    return np.tile(per_image, (n_images, 1)).astype(np.float32)


# --------------------------------------------------------------------------
# Forward pass


def attention_bias(mask: np.ndarray) -> np.ndarray:
    """Additive key bias: 0 on anomalous patches, MASK_BIAS on normal ones."""
    mask = np.asarray(mask)
    return (MASK_BIAS * (1.0 - mask.astype(np.float64))).astype(np.float32)


def encode_bank(bank: DeviationBank, params: EncoderParams,
                ref_features: np.ndarray, ref_denoised: np.ndarray,
                ref_mask: np.ndarray, grid_side: int,
                config: EncoderConfig,
                mode: str = "eval",
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """One masked cross-attention + feed-forward pass over the bank.

    Queries come from the bank, keys from the raw reference features (plus
    grid positions), values from the denoised deviations.  Train mode applies
    seeded dropout to the post-softmax attention weights; eval mode is fully
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    mask = np.asarray(ref_mask).reshape(-1)
    if mask.sum() < 1:
        raise MaskError("reference mask marks no anomalous patches")
    m, c = bank.tokens.shape
    p = ref_features.shape[0]
    if ref_features.shape != (p, c) or ref_denoised.shape != (p, c) or mask.shape[0] != p:
        raise ad.ShapeError("reference feature/deviation/mask shapes disagree")
    heads = config.heads
    if c % heads:
        raise ad.ShapeError(f"channels {c} not divisible by {heads} heads")
    if mode == "train" and config.dropout > 0.0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")

    dtype = bank.tokens.dtype
    key_input = np.asarray(ref_features, dtype=dtype)
    if config.posenc == "keys":
        n_images = p // (grid_side * grid_side)
        if n_images * grid_side * grid_side != p:
            raise ad.ShapeError("reference patch count is not a whole number of grids")
        key_input = key_input + grid_positional_encoding(n_images, grid_side, c).astype(dtype)

    refs = ad.constant(key_input)
    values_in = ad.constant(np.asarray(ref_denoised, dtype=dtype))

    q = ad.add_rowvec(ad.matmul(bank.tokens, params.wq), params.bq)
    k = ad.add_rowvec(ad.matmul(refs, params.wk), params.bk)
    v = ad.add_rowvec(ad.matmul(values_in, params.wv), params.bv)

    head_dim = c // heads
    scale = 1.0 / np.sqrt(head_dim if config.attn_scale == "per_head" else c)
    bias = ad.constant(np.broadcast_to(attention_bias(mask), (m, p)).copy())

    head_outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = ad.affine(ad.matmul(ad.slice_cols(q, lo, hi),
                                     ad.transpose(ad.slice_cols(k, lo, hi))), scale)
        weights = ad.softmax_lastdim(scores, additive_bias=bias)
        if mode == "train" and config.dropout > 0.0:
            weights = ad.dropout(weights, config.dropout, rng)
        head_outputs.append(ad.matmul(weights, ad.slice_cols(v, lo, hi)))
    attended = ad.concat_cols(head_outputs)

    stream = ad.add(bank.tokens, attended) if config.residuals else attended
    hidden = ad.gelu(ad.add_rowvec(ad.matmul(stream, params.w1), params.b1))
    ffn_out = ad.add_rowvec(ad.matmul(hidden, params.w2), params.b2)
    out = ad.add(stream, ffn_out) if config.residuals else ffn_out

    norms = np.linalg.norm(out.data, axis=1)
    if np.any(norms <= 1e-8):
        raise MaskError("encoded bank contains a collapsed (zero-norm) row")
    return out


# --------------------------------------------------------------------------
# Dual training objective


def nearest_token_indices(deviations: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Index of the closest bank row (cosine distance, ties to lowest index)
    for each deviation row.  Selection only; no gradient flows through it."""
    from .deviations import cosine_distance_matrix

    dist = cosine_distance_matrix(deviations, tokens)
    return np.argmin(dist, axis=1).astype(np.int64)


def dual_loss(ref_denoised: np.ndarray, ref_mask: np.ndarray, bank_out: Tensor,
              lambda1: float = 1.0, lambda2: float = 0.8) -> Tensor:
    """Discriminability + orthogonality objective over the encoded bank.

    Masked denoised deviations pull their nearest bank row closer in cosine
    distance (the selection is held constant in backward); all distinct row
    pairs are penalized by squared cosine similarity.  A single-row bank has
    an orthogonality term of exactly 0.
    """
    mask = np.asarray(ref_mask).reshape(-1)
    masked = np.flatnonzero(mask)
    if masked.size == 0:
        raise MaskError("dual loss needs at least one anomalous reference patch")
    m = bank_out.shape[0]

    targets = np.asarray(ref_denoised, dtype=bank_out.dtype)[masked]
    selected = nearest_token_indices(targets, bank_out.data)
    chosen = ad.take_rows(bank_out, selected)
    cos = ad.cosine_rows(ad.constant(targets), chosen)
    disc = ad.affine(ad.sum_all(ad.affine(cos, -1.0, 1.0)), 1.0 / masked.size)

    if m >= 2:
        sq_norms = ad.sum_lastdim(ad.mul(bank_out, bank_out))
        unit = ad.mul_colvec(bank_out, ad.rsqrt_safe(sq_norms))
        gram = ad.matmul(unit, ad.transpose(unit))
        off = ad.mul(gram, ad.constant(1.0 - np.eye(m, dtype=bank_out.dtype)))
        orth = ad.affine(ad.sum_all(ad.mul(off, off)), 1.0 / (m * (m - 1)))
        return ad.add(ad.affine(disc, lambda1), ad.affine(orth, lambda2))
    return ad.affine(disc, lambda1)


# --------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"IDCK"
CKPT_VERSION = 1


def _write_block(buf: bytearray, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf += struct.pack("<H", len(encoded))
    buf += encoded
    buf += struct.pack("<B", arr.ndim)
    for d in arr.shape:
        buf += struct.pack("<I", d)
    buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_block(raw: bytes, pos: int) -> tuple:
    (name_len,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    name = raw[pos:pos + name_len].decode("utf-8")
    pos += name_len
    (ndim,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<I", raw, pos)
        shape.append(d)
        pos += 4
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
    pos += 4 * count
    return name, arr.copy(), pos


@dataclass
class Checkpoint:
    """Bank + encoder weights plus the settings needed to reuse them."""

    bank: DeviationBank
    params: EncoderParams
    config: EncoderConfig
    knn: int = 12
    rank: int = 4
    alpha: float = 0.8
    suppress: bool = True
    optimizer_blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        # settings persist as f32 blocks; quantize now so scoring with an
        # in-memory checkpoint is bit-identical to scoring after a round trip
        self.alpha = float(np.float32(self.alpha))

    @property
    def channels(self) -> int:
        return self.bank.channels


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    bank, params, config = ckpt.bank, ckpt.params, ckpt.config
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<IIII", CKPT_VERSION, bank.size, bank.channels, config.heads)

    blocks = {"tokens": bank.tokens.data}
    blocks.update({n: t.data for n, t in params.named().items()})
    blocks["meta.dropout"] = np.asarray([config.dropout], dtype=np.float32)
    blocks["meta.residuals"] = np.asarray([float(config.residuals)], dtype=np.float32)
    blocks["meta.posenc_keys"] = np.asarray([float(config.posenc == "keys")], dtype=np.float32)
    blocks["meta.scale_per_head"] = np.asarray([float(config.attn_scale == "per_head")], dtype=np.float32)
    blocks["meta.knn"] = np.asarray([ckpt.knn], dtype=np.float32)
    blocks["meta.rank"] = np.asarray([ckpt.rank], dtype=np.float32)
    blocks["meta.alpha"] = np.asarray([ckpt.alpha], dtype=np.float32)
    blocks["meta.suppress"] = np.asarray([float(ckpt.suppress)], dtype=np.float32)

    buf += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        _write_block(buf, name, blocks[name])

    buf += struct.pack("<B", 1 if ckpt.optimizer_blocks else 0)
    if ckpt.optimizer_blocks:
        buf += struct.pack("<I", len(ckpt.optimizer_blocks))
        for name in sorted(ckpt.optimizer_blocks):
            _write_block(buf, name, ckpt.optimizer_blocks[name])
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, m, c, heads = struct.unpack_from("<IIII", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 20
    (n_blocks,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = {}
    for _ in range(n_blocks):
        name, arr, pos = _read_block(raw, pos)
        blocks[name] = arr

    optimizer_blocks = {}
    if pos < len(raw):
        (has_opt,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        if has_opt:
            (n_opt,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            for _ in range(n_opt):
                name, arr, pos = _read_block(raw, pos)
                optimizer_blocks[name] = arr

    def grab(name):
        if name not in blocks:
            raise CheckpointError(f"checkpoint missing block '{name}'")
        return blocks[name]

    bank = DeviationBank(tokens=ad.parameter(grab("tokens")))
    if bank.tokens.shape != (m, c):
        raise CheckpointError("token block shape disagrees with header")
    params = EncoderParams(
        wq=ad.parameter(grab("wq")), bq=ad.parameter(grab("bq")),
        wk=ad.parameter(grab("wk")), bk=ad.parameter(grab("bk")),
        wv=ad.parameter(grab("wv")), bv=ad.parameter(grab("bv")),
        w1=ad.parameter(grab("w1")), b1=ad.parameter(grab("b1")),
        w2=ad.parameter(grab("w2")), b2=ad.parameter(grab("b2")),
    )
    config = EncoderConfig(
        heads=int(heads),
        dropout=float(grab("meta.dropout")[0]),
        residuals=bool(grab("meta.residuals")[0]),
        posenc="keys" if grab("meta.posenc_keys")[0] else "off",
        attn_scale="per_head" if grab("meta.scale_per_head")[0] else "embed_dim",
    )
    return Checkpoint(
        bank=bank,
        params=params,
        config=config,
        knn=int(grab("meta.knn")[0]),
        rank=int(grab("meta.rank")[0]),
        alpha=float(grab("meta.alpha")[0]),
        suppress=bool(grab("meta.suppress")[0]),
        optimizer_blocks=optimizer_blocks,
    )
