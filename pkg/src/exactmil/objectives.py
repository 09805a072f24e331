"""Losses and schedules for anatomy-constrained multi-instance pre-training."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensors as T
from .tensors import Tensor


@dataclass(frozen=True)
class TaskSchema:
    """Disease list, prevalences and the disease -> organ-channel assignment.

    ``organ_channel[i]`` indexes the segmentation channels; the last channel
    is the global foreground (union of organs).
    """

    names: tuple = ("organ0_bright", "organ1_bright", "global_dark")
    prevalence: tuple = (0.3, 0.3, 0.3)
    organ_channel: tuple = (0, 1, 2)
    n_organ_channels: int = 3
    k_low: int = 3
    scale_ratio: int = 2
    k_high: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "prevalence", tuple(float(f) for f in self.prevalence))
        object.__setattr__(self, "organ_channel", tuple(int(c) for c in self.organ_channel))
        if self.k_high is None:
            object.__setattr__(self, "k_high", self.k_low * self.scale_ratio ** 3)
        self.validate()

    def validate(self):
        n = len(self.names)
        if n == 0:
            raise ValueError("schema.names: at least one disease required")
        if len(self.prevalence) != n or len(self.organ_channel) != n:
            raise ValueError("schema: names, prevalence and organ_channel lengths differ")
        for f in self.prevalence:
            if not 0.0 < f < 1.0:
                raise ValueError(f"schema.prevalence: {f} not in (0, 1)")
        for c in self.organ_channel:
            if not 0 <= c < self.n_organ_channels:
                raise ValueError(f"schema.organ_channel: {c} outside [0, {self.n_organ_channels})")
        if self.k_low < 1:
            raise ValueError("schema.k_low must be >= 1")
        if self.k_high != self.k_low * self.scale_ratio ** 3:
            raise ValueError(f"schema.k_high: {self.k_high} != k_low * {self.scale_ratio}^3")

    @property
    def n_diseases(self):
        return len(self.names)

    @property
    def ks(self):
        """k per scale, ordered (low, high)."""
        return (self.k_low, self.k_high)

    def organ_for(self, disease):
        if not 0 <= disease < self.n_diseases:
            raise IndexError(f"unknown disease index {disease}")
        return self.organ_channel[disease]

    def with_prevalence_from(self, labels):
        """Replace prevalences with training-set label frequencies."""
        f = np.asarray(labels, dtype=float).mean(axis=0)
        return replace(self, prevalence=tuple(float(v) for v in f))

    def permuted(self, order):
        order = list(order)
        return replace(self, names=tuple(self.names[i] for i in order),
                       prevalence=tuple(self.prevalence[i] for i in order),
                       organ_channel=tuple(self.organ_channel[i] for i in order))


@dataclass(frozen=True)
class LossWeights:
    lambda_init: float = 2.0
    gamma: float = 10.0
    lambda_floor: float = 0.5
    eps: float = 1e-5
    w_neg: float = 1.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0
    w_tversky: float = 1.0
    w_focal: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"weights.{name} must be positive, got {value}")


def _spatial_axes(x):
    return tuple(range(1, x.ndim))


def _const(g, like):
    return Tensor(np.asarray(g.data if isinstance(g, Tensor) else g, dtype=like.dtype))


def _check_same(p, g, what):
    if tuple(p.shape) != tuple(np.shape(g.data if isinstance(g, Tensor) else g)):
        raise ValueError(f"{what}: shape mismatch {p.shape} vs {np.shape(g)}")


def soft_dice_loss(S, G, eps=1e-5):
    """1 - mean over channels of 2*sum(S*G) / (sum S + sum G + eps)."""
    _check_same(S, G, "soft_dice_loss")
    G = _const(G, S)
    axes = _spatial_axes(S)
    inter = T.tsum(T.mul(S, G), axis=axes)
    denom = T.add(T.tsum(S, axis=axes), G.data.sum(axis=axes) + eps)
    dice = T.div(T.mul(inter, 2.0), denom)
    return T.sub(1.0, T.mean(dice))


def binarize(S, threshold=0.5):
    return Tensor((S.data >= threshold).astype(S.dtype))


def constrain_aamap(aamap, organ):
    """Elementwise anatomy constraint of one [D', H', W'] map.

    ``organ`` is an organ probability (or mask) channel at full resolution;
    it is brought to the map's grid by nearest-neighbour sampling.
    """
    organ4 = T.reshape(organ, (1,) + tuple(organ.shape))
    if tuple(organ.shape) != tuple(aamap.shape):
        organ4 = T.resize_nearest(organ4, aamap.shape)
    return T.mul(aamap, T.reshape(organ4, aamap.shape))


def constrain_all(A, S, schema, binarize_organs=False):
    """Constrain every disease channel of A [N, ...] by its organ channel of S."""
    if A.shape[0] != schema.n_diseases:
        raise ValueError(f"AAmap has {A.shape[0]} channels, schema has {schema.n_diseases} diseases")
    if S.shape[0] != schema.n_organ_channels:
        raise ValueError(f"S has {S.shape[0]} channels, schema expects {schema.n_organ_channels}")
    if binarize_organs:
        S = binarize(S)
    organs = T.take(S, [schema.organ_for(i) for i in range(schema.n_diseases)], axis=0)
    if tuple(organs.shape[1:]) != tuple(A.shape[1:]):
        organs = T.resize_nearest(organs, A.shape[1:])
    return T.mul(A, organs)


def pos_weight(f):
    if not 0.0 < f < 1.0:
        raise ValueError(f"prevalence {f} not in (0, 1)")
    return (1.0 - f) / f


def mil_bce_loss(pooled, y, w_pos, w_neg=1.0, eps=1e-5):
    """Weighted BCE of one bag-level score against its image-level label."""
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(np.asarray(pooled, dtype=float))
    if y:
        return T.mul(T.log(pooled, eps=eps), -float(w_pos))
    return T.mul(T.log(T.sub(1.0, pooled), eps=eps), -float(w_neg))


def anomaly_loss(outputs, S, y, schema, weights, binarize_organs=False):
    """Mean weighted BCE over diseases x scales of constrained top-k pooled AAmaps."""
    y = np.asarray(y)
    if y.shape != (schema.n_diseases,):
        raise ValueError(f"label vector shape {y.shape} != ({schema.n_diseases},)")
    maps = outputs.aamaps()
    terms = []
    for A, k in zip(maps, schema.ks):
        n_vox = int(np.prod(A.shape[1:]))
        if k > n_vox:
            raise ValueError(f"k={k} exceeds the {n_vox} voxels available at scale {A.shape[1:]}")
        Y = constrain_all(A, S, schema, binarize_organs)
        for i in range(schema.n_diseases):
            pooled = T.topk_mean(T.take(Y, i, axis=0), k)
            terms.append(mil_bce_loss(pooled, int(y[i]), pos_weight(schema.prevalence[i]),
                                      weights.w_neg, weights.eps))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / len(terms))


def lambda_schedule(t, weights=LossWeights()):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training progress t={t} outside [0, 1]")
    return max(weights.lambda_init * math.exp(-weights.gamma * t), weights.lambda_floor)


def total_loss(seg_loss, abn_loss, t, weights=LossWeights()):
    return T.add(T.mul(seg_loss, lambda_schedule(t, weights)), abn_loss)


def tversky_loss(p, g, alpha=0.3, beta=0.7, eps=1e-5):
    _check_same(p, g, "tversky_loss")
    g = _const(g, p)
    tp = T.tsum(T.mul(p, g))
    fp = T.tsum(T.mul(p, 1.0 - g.data))
    fn = T.tsum(T.mul(T.sub(1.0, p), g))
    denom = T.add(T.add(T.add(tp, T.mul(fp, alpha)), T.mul(fn, beta)), eps)
    return T.sub(1.0, T.div(T.add(tp, eps), denom))


def focal_loss(p, g, alpha=0.75, gamma=2.0, eps=1e-5):
    """Mean over voxels of -alpha * (1 - p_t)^gamma * log(p_t + eps)."""
    _check_same(p, g, "focal_loss")
    gd = _const(g, p).data
    p_t = T.add(T.mul(p, 2.0 * gd - 1.0), 1.0 - gd)  # p where g=1, 1-p where g=0
    mod = T.power(T.sub(1.0, p_t), gamma)
    return T.mul(T.mean(T.mul(mod, T.log(p_t, eps=eps))), -alpha)


def hybrid_seg_loss(p, g, weights=LossWeights()):
    tv = tversky_loss(p, g, weights.tversky_alpha, weights.tversky_beta, weights.eps)
    fo = focal_loss(p, g, weights.focal_alpha, weights.focal_gamma, weights.eps)
    return T.add(T.mul(tv, weights.w_tversky), T.mul(fo, weights.w_focal))


def weighted_bce(probs, y, w_pos, w_neg=1.0, eps=1e-5):
    """Frequency-weighted BCE averaged over the disease vector."""
    y = np.asarray(y, dtype=probs.dtype)
    w_pos = np.asarray(w_pos, dtype=probs.dtype)
    pos = T.mul(T.log(probs, eps=eps), -(w_pos * y))
    neg = T.mul(T.log(T.sub(1.0, probs), eps=eps), -(w_neg * (1.0 - y)))
    return T.mean(T.add(pos, neg))
