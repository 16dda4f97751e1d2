"""Episodic training of the deviation bank and encoder, plus batch inference.

Each step draws a batch of episodes, runs the reference-side deviation
pipeline (constant, no gradients), encodes the bank in train mode, scores
the query, and averages focal + dice + image-level BCE + the dual bank
objective before one AdamW step under the warm-up cosine schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deviations import denoise_query, extract_deviations
from .encoder import (Checkpoint, DeviationBank, EncoderConfig, EncoderParams,
                      dual_loss, encode_bank, init_bank, init_params,
                      trainable_parameters)
from .features import CapacityError, FeatureSet, build_training_episode
from .optim import AdamWState, LrSchedule, adamw_step, lr_at, zero_grads
from .scoring import (PreparedReferences, finalize_map, image_score_node,
                      matching_score_map, patch_score_rows, prepare_references,
                      score_query)


class TrainingError(RuntimeError):
    """Aborted training run; the message names the offending episode."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    l1: int = 2
    l2: int = 1
    queries_per_epoch: int = 500
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1e-5
    bce_eps: float = 1e-6
    knn: int = 12
    rank: int = 4
    alpha: float = 0.8
    bank_size: int = 45
    heads: int = 8
    dropout: float = 0.1
    base_lr: float = 1e-3
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 2
    floor_fraction: float = 0.01
    weight_decay: float = 1e-4
    suppression_enabled: bool = True
    residuals: bool = True
    posenc: str = "keys"
    attn_scale: str = "per_head"
    allow_equal_shots: bool = False
    fixed_query_set: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "l1", "l2", "queries_per_epoch",
                     "bank_size", "heads", "knn", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.dice_eps < 1e-3 and 0 < self.bce_eps < 1e-3):
            raise ValueError("probability-clamping epsilons must sit in (0, 1e-3)")
        if self.l1 <= self.l2 and not self.allow_equal_shots:
            raise ValueError("l1 must exceed l2 unless allow_equal_shots is set")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(heads=self.heads, dropout=self.dropout,
                             residuals=self.residuals, posenc=self.posenc,
                             attn_scale=self.attn_scale)


# --------------------------------------------------------------------------
# Losses


def focal_loss(scores: Tensor, mask: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, eps: float = 1e-6) -> Tensor:
    """Mean focal term over patches; probabilities clamped before the log."""
    m = np.asarray(mask, dtype=scores.dtype).reshape(-1)
    p = ad.clamp(scores, eps, 1.0 - eps)
    m_t = ad.constant(m)
    inv_m = ad.constant(1.0 - m)
    p_t = ad.add(ad.mul(p, m_t), ad.mul(ad.affine(p, -1.0, 1.0), inv_m))
    alpha_t = ad.constant(alpha * m + (1.0 - alpha) * (1.0 - m))
    weight = ad.mul(alpha_t, ad.pow_const(ad.affine(p_t, -1.0, 1.0), gamma))
    per_patch = ad.mul(weight, ad.affine(ad.log(p_t), -1.0))
    return ad.affine(ad.sum_all(per_patch), 1.0 / m.size)


def dice_loss(scores: Tensor, mask: np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - (2 * overlap + eps) / (sum(scores) + sum(mask) + eps)."""
    m = np.asarray(mask, dtype=scores.dtype).reshape(-1)
    inter = ad.sum_all(ad.mul(scores, ad.constant(m)))
    numer = ad.affine(inter, 2.0, eps)
    denom = ad.affine(ad.sum_all(scores), 1.0, float(m.sum()) + eps)
    return ad.affine(ad.mul(numer, ad.safe_reciprocal(denom)), -1.0, 1.0)


def bce_loss(score: Tensor, label: int, eps: float = 1e-6) -> Tensor:
    """Binary cross-entropy on a scalar probability."""
    p = ad.clamp(score, eps, 1.0 - eps)
    if label:
        return ad.affine(ad.log(p), -1.0)
    return ad.affine(ad.log(ad.affine(p, -1.0, 1.0)), -1.0)


# --------------------------------------------------------------------------
# Episode loss graph


@dataclass
class EpisodeLosses:
    focal: float
    dice: float
    bce: float
    dual: float

    @property
    def total(self) -> float:
        return self.focal + self.dice + self.bce + self.dual


def episode_loss(bank: DeviationBank, params: EncoderParams, cfg: TrainConfig,
                 episode, grid_side: int,
                 rng: Optional[np.random.Generator]) -> tuple:
    """Build the full training objective for one episode on the active tape.

    Returns (total loss node, component values).  Feature inputs and the
    deviation fields enter as constants; only the bank and encoder weights
    collect gradients.
    """
    ref_field = extract_deviations(episode.abnormal_features, episode.normal_features,
                                   k=cfg.knn, r=cfg.rank, alpha=cfg.alpha,
                                   suppress=cfg.suppression_enabled)
    bank_out = encode_bank(bank, params, episode.abnormal_features, ref_field.denoised,
                           episode.abnormal_masks, grid_side, cfg.encoder_config(),
                           mode="train", rng=rng)

    query_field = denoise_query(episode.query_features, episode.normal_features,
                                k=cfg.knn, r=cfg.rank, alpha=cfg.alpha,
                                suppress=cfg.suppression_enabled)
    scores = patch_score_rows(
        ad.constant(query_field.denoised),
        bank_out,
        ad.constant(query_field.nearest_normal_dist),
    )

    l_focal = focal_loss(scores, episode.query_mask, cfg.focal_alpha,
                         cfg.focal_gamma, cfg.bce_eps)
    l_dice = dice_loss(scores, episode.query_mask, cfg.dice_eps)
    l_bce = bce_loss(image_score_node(scores), episode.query_label, cfg.bce_eps)
    l_dual = dual_loss(ref_field.denoised, episode.abnormal_masks, bank_out,
                       cfg.lambda1, cfg.lambda2)

    total = ad.add(ad.add(l_focal, l_dice), ad.add(l_bce, l_dual))
    values = EpisodeLosses(focal=l_focal.item(), dice=l_dice.item(),
                           bce=l_bce.item(), dual=l_dual.item())
    return total, values


# --------------------------------------------------------------------------
# Training loop

TRACE_HEADER = "step\tlr\tL_focal\tL_dice\tL_bce\tL_dual\tL_total"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list = field(default_factory=list)

    def trace_lines(self) -> list:
        lines = [TRACE_HEADER]
        for row in self.trace:
            step, lr, lf, ld, lb, lu, lt = row
            lines.append(f"{step}\t{lr:.8g}\t{lf:.8g}\t{ld:.8g}\t{lb:.8g}\t{lu:.8g}\t{lt:.8g}")
        return lines


def train(pool: FeatureSet, cfg: TrainConfig,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run the full episodic optimization and return the trained checkpoint.

    Episodes are resampled every epoch from a seed-derived stream (pass
    ``fixed_query_set`` to reuse the first epoch's stream); identical seeds
    and data give bit-identical checkpoints.
    """
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA]))
    bank = init_bank(cfg.bank_size, pool.channels, init_rng)
    params = init_params(pool.channels, init_rng)
    named = trainable_parameters(bank, params)

    steps_per_epoch = max(1, math.ceil(cfg.queries_per_epoch / cfg.batch_size))
    sched = LrSchedule(steps_per_epoch=steps_per_epoch, base_lr=cfg.base_lr,
                       warmup_start_lr=cfg.warmup_start_lr,
                       warmup_epochs=min(cfg.warmup_epochs, cfg.epochs - 1),
                       total_epochs=cfg.epochs,
                       floor_fraction=cfg.floor_fraction)
    state = AdamWState(weight_decay=cfg.weight_decay)
    grid_side = pool.grid_side

    trace = []
    global_step = 0
    for epoch in range(cfg.epochs):
        epoch_key = 0 if cfg.fixed_query_set else epoch
        episode_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch_key]))
        episodes_left = cfg.queries_per_epoch
        for _ in range(steps_per_epoch):
            batch = min(cfg.batch_size, episodes_left)
            episodes_left -= batch
            tape = ad.Tape()
            totals = []
            comps = np.zeros(4)
            with ad.recording(tape):
                for b in range(batch):
                    episode_index = cfg.queries_per_epoch - episodes_left - batch + b
                    try:
                        episode = build_training_episode(
                            pool, cfg.l1, cfg.l2, episode_rng,
                            allow_equal_shots=cfg.allow_equal_shots)
                    except CapacityError as exc:
                        raise TrainingError(
                            f"episode construction failed at epoch {epoch}, "
                            f"episode {episode_index}: {exc}") from exc
                    drop_rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, 2, epoch_key, episode_index]))
                    total, values = episode_loss(bank, params, cfg, episode,
                                                 grid_side, drop_rng)
                    if not math.isfinite(values.total):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, episode {episode_index} "
                            f"(query {episode.query_id})")
                    totals.append(total)
                    comps += np.array([values.focal, values.dice, values.bce, values.dual])
                batch_loss = totals[0]
                for node in totals[1:]:
                    batch_loss = ad.add(batch_loss, node)
                batch_loss = ad.affine(batch_loss, 1.0 / batch)

            zero_grads(named)
            ad.backward(tape, batch_loss)
            lr = lr_at(global_step, sched)
            adamw_step(named, state, lr)

            comps /= batch
            trace.append((global_step, lr, comps[0], comps[1], comps[2], comps[3],
                          float(comps.sum())))
            global_step += 1
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs} mean loss {trace[-1][-1]:.4f}")

    opt_blocks = {}
    for name in sorted(state.m):
        opt_blocks[f"adamw.m.{name}"] = state.m[name]
        opt_blocks[f"adamw.v.{name}"] = state.v[name]
        opt_blocks[f"adamw.vmax.{name}"] = state.v_max[name]
    opt_blocks["adamw.step"] = np.asarray([state.step_count], dtype=np.float32)

    ckpt = Checkpoint(bank=bank, params=params, config=cfg.encoder_config(),
                      knn=cfg.knn, rank=cfg.rank, alpha=cfg.alpha,
                      suppress=cfg.suppression_enabled, optimizer_blocks=opt_blocks)
    return TrainResult(checkpoint=ckpt, trace=trace)


# --------------------------------------------------------------------------
# Inference


def infer(queries: FeatureSet, manifest, ckpt: Optional[Checkpoint],
          reference_set: Optional[FeatureSet] = None,
          query_ids: Optional[list] = None,
          mode: str = "encoded",
          height: Optional[int] = None, width: Optional[int] = None,
          upsample: str = "bilinear") -> list:
    """Score queries against a manifest's fixed references.

    ``mode`` selects the scorer: "encoded" uses the trained bank,
    "matching" the raw-feature nearest-neighbor baseline and
    "deviation-matching" the denoised-deviation matcher.  Returns
    (query id, ScoreMap) pairs in id order; parameters are never mutated.
    """
    refs = reference_set if reference_set is not None else queries
    normal = refs.features[list(manifest.normal_ids)].reshape(-1, refs.channels)
    abnormal = refs.features[list(manifest.abnormal_ids)].reshape(-1, refs.channels)
    abn_mask = refs.patch_masks[list(manifest.abnormal_ids)].reshape(-1)

    if mode == "encoded":
        if ckpt is None:
            raise ValueError("encoded inference requires a checkpoint")
        prep = prepare_references(normal, abnormal, abn_mask, queries.grid_side, ckpt)
    elif mode == "matching":
        prep = prepare_references(normal, abnormal, abn_mask, queries.grid_side,
                                  None, suppress=False)
    elif mode == "deviation-matching":
        prep = prepare_references(normal, abnormal, abn_mask, queries.grid_side, None)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    if query_ids is None:
        query_ids = list(range(queries.n_images))
        if reference_set is None:
            held_out = set(manifest.normal_ids) | set(manifest.abnormal_ids)
            query_ids = [i for i in query_ids if i not in held_out]

    results = []
    for qid in query_ids:
        feats = queries.features[qid]
        if mode == "encoded":
            smap = score_query(feats, prep, height, width, upsample)
        elif mode == "matching":
            smap = matching_score_map(feats, prep, space="feature",
                                      height=height, width=width, upsample=upsample)
        else:
            smap = matching_score_map(feats, prep, space="deviation",
                                      height=height, width=width, upsample=upsample)
        results.append((qid, smap))
    return results
