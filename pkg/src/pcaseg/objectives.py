"""Segmentation, adversarial and feature-statistics losses, plus discriminator input conditioning."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError
from .networks import DiscOutput, NetworkState
from .numcore import RngStream, ShapeError, Tensor

CONDITIONINGS = ("none", "blend", "concat", "multiply")
FEATURE_LAYERS = ("penultimate", "output")
IPM_REDUCTIONS = ("sum", "mean")
DICE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.1
    lambda_fea: float = 1.0
    lambda_ipm: float = 0.1
    lambda_noise: float = 0.001
    conditioning: str = "blend"
    granularity: str = "patch"
    feature_layer: str = "penultimate"
    ipm_reduction: str = "mean"

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_fea", "lambda_ipm", "lambda_noise"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.conditioning not in CONDITIONINGS:
            raise ConfigurationError(f"unknown conditioning {self.conditioning!r}")
        if self.granularity not in ("image", "patch", "pixel"):
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if self.feature_layer not in FEATURE_LAYERS:
            raise ConfigurationError(f"unknown feature_layer {self.feature_layer!r}")
        if self.ipm_reduction not in IPM_REDUCTIONS:
            raise ConfigurationError(f"unknown ipm_reduction {self.ipm_reduction!r}")

    @property
    def adversarial(self) -> bool:
        """True when any term depends on the discriminator."""
        return self.lambda_adv > 0 or self.lambda_fea > 0 or self.lambda_ipm > 0

    @classmethod
    def supervised(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0, 0.0, "none", "patch")

    def to_dict(self) -> dict:
        return asdict(self)


def disc_in_channels(num_classes: int, conditioning: str) -> int:
    return num_classes + 1 if conditioning == "concat" else num_classes


@dataclass
class BatchPair:
    """A mixed batch; ``masks`` holds one-hot targets for the labeled rows only, in order."""

    images: Tensor
    masks: Optional[Tensor]
    labeled_flags: Tuple[bool, ...]

    def __post_init__(self):
        self.labeled_flags = tuple(bool(f) for f in self.labeled_flags)
        if len(self.labeled_flags) != self.images.shape[0]:
            raise ShapeError("labeled_flags length must equal the batch size")
        n_lab = sum(self.labeled_flags)
        if n_lab == 0:
            if self.masks is not None:
                raise ShapeError("masks given but no sample is labeled")
            return
        if self.masks is None or self.masks.shape[0] != n_lab:
            raise ShapeError(f"expected masks for {n_lab} labeled samples")
        if self.masks.shape[2:] != self.images.shape[2:]:
            raise ShapeError("mask and image spatial sizes differ")
        m = self.masks.data
        if not (np.all((m == 0) | (m == 1)) and np.all(m.sum(axis=1) == 1)):
            raise ShapeError("masks must be one-hot per pixel")

    @property
    def labeled_idx(self):
        return [i for i, f in enumerate(self.labeled_flags) if f]

    @property
    def unlabeled_idx(self):
        return [i for i, f in enumerate(self.labeled_flags) if not f]

    def labeled_images(self) -> Tensor:
        return Tensor._wrap(self.images.data[self.labeled_idx])


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy over every element; logs are clamped at 1e-12."""
    _same_shape(pred, target, "bce_loss")
    pos = target * nc.log(pred)
    neg = (1.0 - target) * nc.log(1.0 - pred)
    return -nc.mean(pos + neg)


def dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Soft Dice loss ``1 - 2*sum(p*t) / (sum(p) + sum(t))``, guarded by epsilon for empty maps.

    ``[B, C, H, W]`` inputs with ``C >= 2`` are scored per foreground channel
    (1..C-1, sums over batch and space) and averaged; any other input is
    treated as a single binary map.
    """
    _same_shape(pred, target, "dice_loss")
    if pred.ndim == 4 and pred.shape[1] >= 2:
        fg = list(range(1, pred.shape[1]))
        p, t = nc.take(pred, fg, axis=1), nc.take(target, fg, axis=1)
        inter = nc.sum(p * t, axis=(0, 2, 3))
        denom = _eps_floor(nc.sum(p, axis=(0, 2, 3)) + nc.sum(t, axis=(0, 2, 3)))
        return 1.0 - nc.mean(nc.div(inter, denom) * 2.0)
    inter = nc.sum(pred * target)
    denom = _eps_floor(nc.sum(pred) + nc.sum(target))
    return 1.0 - nc.div(inter, denom) * 2.0


def _eps_floor(denom: Tensor) -> Tensor:
    # epsilon only where the denominator vanishes, so perfect and disjoint maps score exactly 0 and 1
    return denom + Tensor(np.where(denom.data < DICE_EPS, DICE_EPS, 0.0))


def seg_loss(pred: Tensor, target: Tensor) -> Tensor:
    return 0.5 * bce_loss(pred, target) + 0.5 * dice_loss(pred, target)


def pixel_additive_blend(image: Tensor, prob_map: Tensor, lambda_noise: float, rng: RngStream) -> Tensor:
    """``map + lambda_noise * image * noise`` with fresh standard-normal noise per call."""
    if image.ndim != prob_map.ndim or image.shape[0] != prob_map.shape[0] or image.shape[2:] != prob_map.shape[2:]:
        raise ShapeError(f"image {image.shape} cannot be broadcast over map {prob_map.shape}")
    if image.shape[1] not in (1, prob_map.shape[1]):
        raise ShapeError(f"image channels {image.shape[1]} do not broadcast to {prob_map.shape[1]}")
    noise = rng.normal(prob_map.shape)
    return prob_map + Tensor._wrap(lambda_noise * image.data * noise)


def condition(image: Tensor, prob_map: Tensor, w: LossWeights, rng: Optional[RngStream]) -> Tensor:
    """Build the discriminator input for a (image, segmentation map) pair."""
    if w.conditioning == "none":
        return prob_map
    if w.conditioning == "blend":
        return pixel_additive_blend(image, prob_map, w.lambda_noise, rng)
    if w.conditioning == "concat":
        return nc.concat([prob_map, image], axis=1)
    return prob_map * image


def _features(d: DiscOutput, w: LossWeights) -> Tensor:
    return d.features if w.feature_layer == "penultimate" else d.confidence


def disc_loss(d_real: DiscOutput, d_fake: DiscOutput) -> Tensor:
    """Real cells pushed to 1, fake cells to 0; each side averaged over its own cells."""
    if d_real.confidence.shape[1:] != d_fake.confidence.shape[1:]:
        raise ShapeError(f"confidence maps differ: {d_real.confidence.shape} vs {d_fake.confidence.shape}")
    return -nc.mean(nc.log(d_real.confidence)) - nc.mean(nc.log(1.0 - d_fake.confidence))


def gen_adv_loss(d_fake: DiscOutput) -> Tensor:
    return -nc.mean(nc.log(d_fake.confidence))


def feature_matching_loss(fake_feats: Tensor, real_feats: Tensor) -> Tensor:
    _same_shape(fake_feats, real_feats, "feature_matching_loss")
    return nc.mean(nc.square(fake_feats - real_feats))


def ipm_loss(unlabeled_feats: Tensor, real_feats: Tensor, reduction: str = "sum") -> Tensor:
    """Squared L2 distance between batch-mean feature maps.

    ``reduction="mean"`` divides by the number of feature elements, which keeps
    the term on the scale of the other losses for wide feature maps.
    """
    if reduction not in IPM_REDUCTIONS:
        raise ConfigurationError(f"unknown ipm reduction {reduction!r}")
    if unlabeled_feats.shape[0] == 0 or real_feats.shape[0] == 0:
        raise ShapeError("ipm_loss needs at least one sample on each side")
    if unlabeled_feats.shape[1:] != real_feats.shape[1:]:
        raise ShapeError(f"ipm_loss: feature shapes {unlabeled_feats.shape} vs {real_feats.shape}")
    diff = nc.mean(unlabeled_feats, axis=0) - nc.mean(real_feats, axis=0)
    sq = nc.square(diff)
    return nc.sum(sq) if reduction == "sum" else nc.mean(sq)


TERM_NAMES = ("l_seg", "l_adv", "l_fm", "l_ipm")


def total_seg_loss(batch: BatchPair, S: NetworkState, D: Optional[NetworkState], w: LossWeights,
                   rng: Optional[RngStream] = None, probs: Optional[Tensor] = None
                   ) -> Tuple[Tensor, Dict[str, float]]:
    """Segmenter objective on one batch; returns the loss tensor and per-term values.

    Terms whose weight is zero are skipped and reported as 0. The
    discriminator is evaluated but never differentiated here: callers freeze it.
    ``probs`` reuses a segmenter output already recorded on the active tape.
    """
    if not any(batch.labeled_flags):
        raise ConfigurationError("total_seg_loss needs at least one labeled sample")
    if probs is None:
        probs = S(batch.images)
    lab, unl = batch.labeled_idx, batch.unlabeled_idx
    l_seg = seg_loss(nc.take(probs, lab), batch.masks)
    terms = {name: 0.0 for name in TERM_NAMES}
    terms["l_seg"] = l_seg.item()
    total = l_seg
    if not w.adversarial:
        return total, terms
    if D is None:
        raise ConfigurationError("adversarial weights set but no discriminator given")

    d_fake = D(condition(batch.images, probs, w, rng))
    if w.lambda_adv > 0:
        l_adv = gen_adv_loss(d_fake)
        terms["l_adv"] = l_adv.item()
        total = total + w.lambda_adv * l_adv
    if w.lambda_fea > 0 or (w.lambda_ipm > 0 and unl):
        d_real = D(condition(batch.labeled_images(), batch.masks, w, rng))
        real_feats = _features(d_real, w).detach()
        fake_feats = _features(d_fake, w)
        if w.lambda_fea > 0:
            l_fm = feature_matching_loss(nc.take(fake_feats, lab), real_feats)
            terms["l_fm"] = l_fm.item()
            total = total + w.lambda_fea * l_fm
        if w.lambda_ipm > 0 and unl:
            l_ipm = ipm_loss(nc.take(fake_feats, unl), real_feats, w.ipm_reduction)
            terms["l_ipm"] = l_ipm.item()
            total = total + w.lambda_ipm * l_ipm
    return total, terms
