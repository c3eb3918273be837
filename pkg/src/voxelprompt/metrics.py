"""Segmentation losses and evaluation metrics.

The training loss is single-class soft Dice (squared denominators) plus
double-weighted cross-entropy on sigmoid probabilities. Evaluation uses
volumetric overlap (DSC), two-sided boundary agreement within a tolerance
(NSD), and the trapezoid-weighted interaction score over five refinement
clicks whose weights sum to 4.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

PROB_CLAMP = 1e-7

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def dice_ce_loss(logits: Tensor, gt, ce_mode="bce") -> Tensor:
    """Soft Dice plus 2x cross-entropy on sigmoid(logits) against a binary mask.

    ``ce_mode='bce'`` uses both foreground and background terms;
    ``ce_mode='fg_only'`` keeps only -(1/N) sum(g log p), matching the
    foreground-written form of the compound loss.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if logits.data.shape != gt.shape:
        raise ValueError(f"logits shape {logits.data.shape} != mask shape {gt.shape}")
    n = gt.size
    flat = T.reshape(logits, (n,))
    p = T.clip(T.sigmoid(flat), PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = T.tensor(gt.reshape(n))
    inter = T.tsum(p * g)
    denom = T.tsum(p * p) + float(np.sum(gt * gt))
    dice = 1.0 - (2.0 * inter) / denom
    if ce_mode == "bce":
        ce = -(T.tsum(g * T.log(p)) + T.tsum((1.0 - g) * T.log(1.0 - p))) / n
    elif ce_mode == "fg_only":
        ce = -T.tsum(g * T.log(p)) / n
    else:
        raise ValueError(f"unknown ce_mode {ce_mode!r}")
    return dice + 2.0 * ce


def compute_dsc(pred, gt):
    """2|P n G| / (|P| + |G|); two empty masks score 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    psum = int(pred.sum())
    gsum = int(gt.sum())
    if psum + gsum == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (psum + gsum)


def boundary_voxels(mask):
    """Mask voxels with at least one 6-neighbor outside the mask.

    Outside the volume counts as background, so voxels on the array border
    are boundary voxels.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return mask & ~eroded


def compute_nsd(pred, gt, tolerance=1.0):
    """Two-sided fraction of boundary voxels within ``tolerance`` of the other
    boundary (Euclidean, voxel units). Both-empty masks score 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    bp = boundary_voxels(pred)
    bg = boundary_voxels(gt)
    np_b = int(bp.sum())
    ng_b = int(bg.sum())
    if np_b == 0 and ng_b == 0:
        return 1.0
    if np_b == 0 or ng_b == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    close_p = int(np.sum(dist_to_gt[bp] <= tolerance))
    close_g = int(np.sum(dist_to_pred[bg] <= tolerance))
    return (close_p + close_g) / (np_b + ng_b)


AUC_WEIGHTS = (0.5, 1.0, 1.0, 1.0, 0.5)


def auc_score(values):
    """(v1 + 2 v2 + 2 v3 + 2 v4 + v5) / 2 over exactly five per-click scores."""
    values = [float(v) for v in values]
    if len(values) != 5:
        raise ValueError(f"need exactly 5 per-click scores, got {len(values)}")
    return float(sum(w * v for w, v in zip(AUC_WEIGHTS, values)))
