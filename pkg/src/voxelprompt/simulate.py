"""User-interaction simulation: jittered boxes, corrective clicks, transcripts.

A session starts from an optional box derived from the ground-truth bounding
box with random outward offsets, then places each corrective click at the
most interior voxel of the largest error component: foreground when the
component is undersegmented, background when oversegmented.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import PromptSet
from .metrics import auc_score, compute_dsc, compute_nsd, dice_ce_loss

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def sample_bbox(gt, rng, max_offset=5):
    """Tight bounding box of the mask, each face pushed outward by a uniform
    integer offset in [0, max_offset], clamped to the volume."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        raise ValueError("cannot sample a box from an empty mask")
    idx = np.nonzero(gt)
    lo = np.array([a.min() for a in idx], dtype=np.int64)
    hi = np.array([a.max() for a in idx], dtype=np.int64)
    lo = np.maximum(lo - rng.integers(0, max_offset + 1, size=3), 0)
    hi = np.minimum(hi + rng.integers(0, max_offset + 1, size=3), np.array(gt.shape) - 1)
    return lo, hi


@dataclass
class ErrorRegion:
    voxels: np.ndarray          # (n, 3) component voxel coordinates
    kind: str                   # "undersegmentation" | "oversegmentation"
    size: int
    center: tuple               # most interior voxel


def _interior_voxel(comp_mask):
    """Voxel of a component maximizing distance to its outside (volume border
    counts as outside); ties break lexicographically."""
    padded = np.pad(comp_mask, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1, 1:-1]
    best = dist.max()
    cands = np.argwhere(dist >= best - 1e-9)
    order = np.lexsort((cands[:, 2], cands[:, 1], cands[:, 0]))
    return tuple(int(c) for c in cands[order[0]])


def error_regions(pred, gt):
    """6-connected components of the two error kinds, kept separate so each
    region is homogeneous (under- XOR over-segmentation)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    regions = []
    for kind, mask in (
        ("undersegmentation", gt & ~pred),
        ("oversegmentation", pred & ~gt),
    ):
        labeled, ncomp = ndimage.label(mask, structure=_SIX_CONN)
        for c in range(1, ncomp + 1):
            comp = labeled == c
            voxels = np.argwhere(comp)
            regions.append(
                ErrorRegion(
                    voxels=voxels,
                    kind=kind,
                    size=int(voxels.shape[0]),
                    center=_interior_voxel(comp),
                )
            )
    return regions


def _region_seed(region):
    order = np.lexsort((region.voxels[:, 2], region.voxels[:, 1], region.voxels[:, 0]))
    return tuple(int(c) for c in region.voxels[order[0]])


def place_click(pred_mask, gt, rng=None):
    """Click at the middle of the largest error region.

    Returns (voxel, is_foreground) or None when prediction matches the mask
    exactly (the caller stops refining). Largest region wins; equal sizes
    break toward the lexicographically smallest seed voxel.
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred_mask.shape != gt.shape:
        raise ValueError("mask shapes differ")
    regions = error_regions(pred_mask, gt)
    if not regions:
        return None
    best = max(regions, key=lambda r: (r.size, tuple(-c for c in _region_seed(r))))
    return best.center, best.kind == "undersegmentation"


def interior_click(gt):
    """Fallback confirmation click: most interior foreground voxel."""
    gt = np.asarray(gt).astype(bool)
    if not gt.any():
        raise ValueError("empty mask has no interior")
    return _interior_voxel(gt), True


@dataclass
class Transcript:
    """Ordered prompt events with per-step metrics for one simulated session."""

    events: list = field(default_factory=list)       # ("box", lo, hi) | ("click", voxel, is_fg)
    dsc: list = field(default_factory=list)          # one per step, box first if present
    nsd: list = field(default_factory=list)
    with_box: bool = True
    final_logits: np.ndarray | None = None

    @property
    def click_dsc(self):
        return self.dsc[1:] if self.with_box else self.dsc

    @property
    def click_nsd(self):
        return self.nsd[1:] if self.with_box else self.nsd

    def auc_dsc(self):
        return auc_score(self.click_dsc)

    def auc_nsd(self):
        return auc_score(self.click_nsd)

    def n_clicks(self):
        return sum(1 for e in self.events if e[0] == "click")

    def to_jsonl(self):
        lines = []
        for i, event in enumerate(self.events):
            if event[0] == "box":
                desc = {"kind": "box", "lo": list(map(int, event[1])), "hi": list(map(int, event[2]))}
            else:
                desc = {"kind": "click", "voxel": list(map(int, event[1])), "fg": bool(event[2])}
            lines.append(json.dumps({
                "step": i,
                "event": desc,
                "dsc": self.dsc[i],
                "nsd": self.nsd[i],
            }))
        return "\n".join(lines) + "\n"


def simulate_session(model, vol, gt, rng, n_clicks=5, with_box=True,
                     train_mode=False, max_offset=5, ce_mode="bce",
                     compute_surface=True):
    """Run one interactive refinement session against a model.

    Eval mode: if the prediction becomes exact, remaining click slots repeat
    the current metrics without further forwards. Train mode: a session always
    issues exactly ``n_clicks`` clicks (a confirmation click in the interior of
    the mask when no error remains) and returns per-step losses for averaging.

    Returns (transcript, losses) where losses is a list of scalar Tensors in
    train mode and empty otherwise.
    """
    vol = np.asarray(vol, dtype=np.float64)
    gt_b = np.asarray(gt).astype(bool)
    enc = model.encode_image(vol)
    transcript = Transcript(with_box=with_box)
    losses = []
    prompts = PromptSet()
    prev_logits = None

    def run_step():
        nonlocal prev_logits
        logits = model.decode_with_prompts(enc, prompts, prev_logits)
        prev_logits = logits.data
        if train_mode:
            losses.append(dice_ce_loss(logits, gt_b.astype(np.float64), ce_mode=ce_mode))
        pred = logits.data > 0
        transcript.dsc.append(compute_dsc(pred, gt_b))
        transcript.nsd.append(compute_nsd(pred, gt_b) if compute_surface else float("nan"))

    if with_box:
        lo, hi = sample_bbox(gt_b, rng, max_offset=max_offset)
        prompts = PromptSet(box=(lo, hi))
        transcript.events.append(("box", lo, hi))
        run_step()

    for _ in range(n_clicks):
        pred = prev_logits > 0 if prev_logits is not None else np.zeros_like(gt_b)
        placed = place_click(pred, gt_b, rng)
        if placed is None:
            if train_mode:
                placed = interior_click(gt_b)
            else:
                # exact prediction: repeat current metrics for remaining slots
                remaining = n_clicks - sum(1 for e in transcript.events if e[0] == "click")
                for _ in range(remaining):
                    transcript.dsc.append(transcript.dsc[-1])
                    transcript.nsd.append(transcript.nsd[-1])
                break
        voxel, is_fg = placed
        prompts = prompts.with_click(voxel, is_fg)
        transcript.events.append(("click", voxel, is_fg))
        run_step()

    transcript.final_logits = prev_logits
    return transcript, losses
