"""Training objectives: deeply supervised Dice + cross-entropy segmentation
loss, the encoder target-representation loss, the decoder region-localization
loss, and their weighted combination.

Level-ordered arguments (logit pyramids, feature lists, label pyramids) are
always finest level first.  Label grids are integer numpy arrays and enter
the tape only as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, NumericError, ShapeError


@dataclass
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.1
    supervision_weights: Optional[tuple[float, ...]] = None  # finest first
    bce_eps: float = 1e-12
    dice_smooth: float = 1e-5
    cosine_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights alpha/beta must be non-negative")

    def weights_for(self, levels: int) -> tuple[float, ...]:
        """Per-level weights, finest heaviest, normalized to sum 1."""
        if self.supervision_weights is not None:
            w = self.supervision_weights
            if len(w) != levels:
                raise ValueError(f"need {levels} supervision weights, got {len(w)}")
        else:
            w = tuple(2.0 ** -k for k in range(levels))
        total = sum(w)
        return tuple(v / total for v in w)


@dataclass
class LossBreakdown:
    l_seg: Tensor
    l_tr: Tensor
    l_rl: Tensor
    l_total: Tensor

    def scalars(self) -> dict[str, float]:
        return {"l_seg": self.l_seg.item(), "l_tr": self.l_tr.item(),
                "l_rl": self.l_rl.item(), "l_total": self.l_total.item()}


def binarize(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Foreground indicator: 1 where label > 0."""
    labels = np.asarray(labels)
    if labels.min() < 0:
        raise DataError(f"labels must be non-negative, found {labels.min()}")
    return (labels > 0).astype(dtype)


def gt_mask_image(image: Tensor, labels: np.ndarray) -> Tensor:
    """Zero out everything outside the labelled foreground."""
    mask = binarize(labels, dtype=image.dtype)
    if mask.shape != image.shape:
        raise ShapeError(f"image {image.shape} and labels {mask.shape} are not aligned")
    return ag.multiply(image, ag.tensor(mask, dtype=image.dtype))


def tr_loss(enc_x: Tensor, enc_target: Tensor, eps: float = 1e-8) -> Tensor:
    """Mean over the batch of (1 - cosine similarity) between per-sample
    flattened encoder codes.  The caller wraps the target in stop_gradient."""
    if enc_x.shape != enc_target.shape:
        raise ShapeError(f"encoder codes differ in shape: {enc_x.shape} vs {enc_target.shape}")
    n = enc_x.shape[0]
    one = ag.tensor(np.asarray(1.0), dtype=enc_x.dtype)
    total = None
    for i in range(n):
        c = ag.cosine_similarity(ag.batch_item(enc_x, i), ag.batch_item(enc_target, i), eps)
        term = ag.subtract(one, c)
        total = term if total is None else ag.add(total, term)
    return ag.scalar_multiply(total, 1.0 / n)


def _bce_mean(probs: Tensor, target: np.ndarray, eps: float) -> Tensor:
    t = ag.tensor(target, dtype=probs.dtype)
    one = ag.tensor(np.asarray(1.0), dtype=probs.dtype)
    pos = ag.multiply(t, ag.natural_log(ag.clip_min(probs, eps)))
    neg = ag.multiply(ag.subtract(one, t),
                      ag.natural_log(ag.clip_min(ag.subtract(one, probs), eps)))
    return ag.scalar_multiply(ag.tmean(ag.add(pos, neg)), -1.0)


def rl_loss(decoder_feats: Sequence[Tensor], label_pyramid: Sequence[np.ndarray],
            cfg: LossConfig) -> Tensor:
    """Per-level BCE between sigmoid(channel-mean feature map) and the
    binarized labels; voxel-mean within a level, summed over levels."""
    if len(decoder_feats) != len(label_pyramid):
        raise ShapeError(f"{len(decoder_feats)} feature levels vs "
                         f"{len(label_pyramid)} label levels")
    total = None
    for feat, labels in zip(decoder_feats, label_pyramid):
        target = binarize(labels, dtype=feat.dtype)
        if target.shape != (feat.shape[0],) + feat.shape[2:]:
            raise ShapeError(f"labels {target.shape} do not match feature level "
                             f"{feat.shape}")
        attn = ag.sigmoid(ag.channel_mean(feat))
        level = _bce_mean(attn, target.reshape(attn.shape), cfg.bce_eps)
        total = level if total is None else ag.add(total, level)
    return total


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"label values must lie in [0, {num_classes}), "
                        f"found range [{labels.min()}, {labels.max()}]")
    oh = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(oh, labels[:, None].astype(np.int64), 1.0, axis=1)
    return oh


def dice_ce_deep_supervision(logit_pyramid: Sequence[Tensor],
                             label_pyramid: Sequence[np.ndarray],
                             cfg: LossConfig) -> Tensor:
    """Soft Dice (averaged over foreground classes) plus voxel-mean
    cross-entropy at every level, combined with the supervision weights."""
    if len(logit_pyramid) != len(label_pyramid):
        raise ShapeError(f"{len(logit_pyramid)} logit levels vs "
                         f"{len(label_pyramid)} label levels")
    weights = cfg.weights_for(len(logit_pyramid))
    smooth = cfg.dice_smooth
    total = None
    for logits, labels, w in zip(logit_pyramid, label_pyramid, weights):
        num_classes = logits.shape[1]
        oh = _one_hot(labels, num_classes, logits.dtype)
        if oh.shape != logits.shape:
            raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
        probs = ag.softmax_channels(logits)
        oh_t = ag.tensor(oh, dtype=logits.dtype)
        # cross-entropy, mean over batch and voxels
        voxels = logits.size // num_classes
        ce = ag.scalar_multiply(
            ag.tsum(ag.multiply(oh_t, ag.natural_log(ag.clip_min(probs, cfg.bce_eps)))),
            -1.0 / voxels)
        # soft dice over foreground classes
        smooth_t = ag.tensor(np.asarray(smooth), dtype=logits.dtype)
        one = ag.tensor(np.asarray(1.0), dtype=logits.dtype)
        dice_terms = None
        for c in range(1, num_classes):
            pc = ag.channel_item(probs, c)
            tc = ag.channel_item(oh_t, c)
            inter = ag.tsum(ag.multiply(pc, tc))
            denom = ag.add(ag.tsum(pc), ag.tsum(tc))
            dice = ag.divide(ag.add(ag.scalar_multiply(inter, 2.0), smooth_t),
                             ag.add(denom, smooth_t))
            term = ag.subtract(one, dice)
            dice_terms = term if dice_terms is None else ag.add(dice_terms, term)
        dice_loss = ag.scalar_multiply(dice_terms, 1.0 / (num_classes - 1))
        level = ag.scalar_multiply(ag.add(dice_loss, ce), w)
        total = level if total is None else ag.add(total, level)
    return total


def total_loss(l_seg: Tensor, l_tr: Tensor, l_rl: Tensor, cfg: LossConfig) -> LossBreakdown:
    """Combine the segmentation and decoupling terms: seg + alpha*tr + beta*rl."""
    for name, t in (("l_seg", l_seg), ("l_tr", l_tr), ("l_rl", l_rl)):
        if not np.isfinite(t.data):
            raise NumericError(f"{name} is not finite: {t.item()}")
    combined = ag.add(l_seg, ag.add(ag.scalar_multiply(l_tr, cfg.alpha),
                                    ag.scalar_multiply(l_rl, cfg.beta)))
    return LossBreakdown(l_seg=l_seg, l_tr=l_tr, l_rl=l_rl, l_total=combined)
