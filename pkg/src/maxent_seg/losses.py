"""Segmentation data terms and maximum-entropy regularizers.

Every loss returns its value together with the exact gradient with respect to
the per-voxel foreground probabilities. All logarithms are base 2, so entropy,
KL and cross-entropy share one unit (bits) and ``lam`` has a consistent meaning
across regularizers.

The erroneous-voxel mask used by the MEEP and KL terms is recomputed from the
current prediction on each call but is treated as a constant when
differentiating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from maxent_seg.volume import BinaryMask, ProbMap, Volume, _require_same_dims, threshold

LN2 = math.log(2.0)

SEG_KINDS = ("cross_entropy", "soft_dice")
REG_KINDS = ("none", "meall", "meep", "kl")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossSpec:
    seg_kind: str = "cross_entropy"
    reg_kind: str = "none"
    lam: float = 0.0
    clamp_eps: float = 1e-6
    reduction: str = "mean"
    dice_smooth: float = 1.0

    def __post_init__(self):
        if self.seg_kind not in SEG_KINDS:
            raise ValueError(f"seg_kind must be one of {SEG_KINDS}, got {self.seg_kind!r}")
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"reg_kind must be one of {REG_KINDS}, got {self.reg_kind!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "seg_kind": self.seg_kind,
            "reg_kind": self.reg_kind,
            "lam": self.lam,
            "clamp_eps": self.clamp_eps,
            "reduction": self.reduction,
            "dice_smooth": self.dice_smooth,
        }


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: Volume


def binary_entropy(p):
    """Binary entropy in bits, with ``0 log 0 = 0``.

    Accepts a scalar or an array; raises for values outside [0, 1].
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("binary_entropy is defined on [0, 1]")
    q = 1.0 - arr
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(arr > 0, arr * np.log2(arr), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if h.ndim == 0 else h


def entropy_map(Y: ProbMap) -> Volume:
    return Volume(binary_entropy(Y.data), Y.spacing)


def _clamped(Y: ProbMap, spec: LossSpec) -> np.ndarray:
    return np.clip(Y.data, spec.clamp_eps, 1.0 - spec.clamp_eps)


def _reduce(values: np.ndarray, grad: np.ndarray, spec: LossSpec, like: ProbMap) -> LossEval:
    # fsum is exactly rounded, so the total does not depend on summation order.
    total = math.fsum(values.ravel(order="F"))
    if spec.reduction == "mean":
        n = values.size
        total /= n
        grad = grad / n
    return LossEval(float(total), Volume(grad, like.spacing))


def cross_entropy(Y: ProbMap, gt: BinaryMask, spec: LossSpec) -> LossEval:
    """Binary cross-entropy in bits."""
    _require_same_dims(Y, gt)
    y = _clamped(Y, spec)
    g = gt.data
    values = -np.where(g, np.log2(y), np.log2(1.0 - y))
    grad = np.where(g, -1.0 / y, 1.0 / (1.0 - y)) / LN2
    return _reduce(values, grad, spec, Y)


def soft_dice(Y: ProbMap, gt: BinaryMask, spec: LossSpec) -> LossEval:
    """``1 - (2 sum(y*g) + s) / (sum(y) + sum(g) + s)``.

    Soft Dice is already normalized over the image, so ``spec.reduction`` does
    not rescale it.
    """
    _require_same_dims(Y, gt)
    y = Y.data
    g = gt.data.astype(np.float64)
    s = spec.dice_smooth
    num = 2.0 * math.fsum((y * g).ravel()) + s
    den = math.fsum(y.ravel()) + math.fsum(g.ravel()) + s
    value = 1.0 - num / den
    grad = -(2.0 * g * den - num) / (den * den)
    return LossEval(float(value), Volume(grad, Y.spacing))


def error_mask(Y: ProbMap, gt: BinaryMask, t: float = 0.5) -> BinaryMask:
    """Voxels whose thresholded prediction disagrees with the ground truth."""
    _require_same_dims(Y, gt)
    return BinaryMask(threshold(Y, t).data != gt.data, Y.spacing)


def _neg_entropy(Y: ProbMap, spec: LossSpec, wrong: np.ndarray | None) -> LossEval:
    y = _clamped(Y, spec)
    values = y * np.log2(y) + (1.0 - y) * np.log2(1.0 - y)
    grad = np.log2(y / (1.0 - y))
    if wrong is not None:
        values = np.where(wrong, values, 0.0)
        grad = np.where(wrong, grad, 0.0)
    return _reduce(values, grad, spec, Y)


def reg_meall(Y: ProbMap, spec: LossSpec) -> LossEval:
    """Negative entropy summed over every voxel (overall confidence penalty)."""
    return _neg_entropy(Y, spec, None)


def reg_meep(Y: ProbMap, wrong: BinaryMask, spec: LossSpec) -> LossEval:
    """Negative entropy restricted to the erroneous voxels."""
    _require_same_dims(Y, wrong)
    return _neg_entropy(Y, spec, wrong.data)


def kl_uniform_bits(y):
    """``KL(Bernoulli(0.5) || Bernoulli(y))`` in bits."""
    y = np.asarray(y, dtype=np.float64)
    out = -1.0 - 0.5 * np.log2(y * (1.0 - y))
    return float(out) if out.ndim == 0 else out


def reg_kl(Y: ProbMap, wrong: BinaryMask, spec: LossSpec) -> LossEval:
    """KL divergence from the uniform Bernoulli on the erroneous voxels.

    Enters the loss with a positive sign, so minimizing pulls wrong voxels
    toward 0.5.
    """
    _require_same_dims(Y, wrong)
    y = _clamped(Y, spec)
    values = np.where(wrong.data, kl_uniform_bits(y), 0.0)
    grad = np.where(wrong.data, (2.0 * y - 1.0) / (2.0 * LN2 * y * (1.0 - y)), 0.0)
    return _reduce(values, grad, spec, Y)


def data_term(Y: ProbMap, gt: BinaryMask, spec: LossSpec) -> LossEval:
    if spec.seg_kind == "cross_entropy":
        return cross_entropy(Y, gt, spec)
    return soft_dice(Y, gt, spec)


def regularizer(Y: ProbMap, gt: BinaryMask, spec: LossSpec, wrong: BinaryMask | None = None) -> LossEval:
    """Evaluate ``spec.reg_kind``; ``wrong`` overrides the recomputed error mask."""
    if spec.reg_kind == "meall":
        return reg_meall(Y, spec)
    if wrong is None:
        wrong = error_mask(Y, gt)
    if spec.reg_kind == "meep":
        return reg_meep(Y, wrong, spec)
    if spec.reg_kind == "kl":
        return reg_kl(Y, wrong, spec)
    raise ValueError("regularizer called with reg_kind='none'")


def combined_loss(Y: ProbMap, gt: BinaryMask, spec: LossSpec, wrong: BinaryMask | None = None) -> LossEval:
    """Data term plus ``lam`` times the selected regularizer.

    ``wrong`` freezes the erroneous-voxel mask (used by gradient checks);
    by default it is recomputed from ``Y`` at threshold 0.5.
    """
    seg = data_term(Y, gt, spec)
    if spec.reg_kind == "none" or spec.lam == 0:
        return seg
    reg = regularizer(Y, gt, spec, wrong)
    value = seg.value + spec.lam * reg.value
    grad = seg.grad.data + spec.lam * reg.grad.data
    return LossEval(float(value), Volume(grad, Y.spacing))
