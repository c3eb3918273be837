"""Normalized attention blocks with residual steps on the unit hypersphere.

Activations live on the unit sphere: every residual update interpolates
between the current row and the block output (both renormalized) with a
learnable positive per-dimension eigen learning rate, then renormalizes.
Weight matrices are row-normalized after every optimizer step instead of
using layer norm or weight decay.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rotations import PositionedVectors, SkewGenerators
from .tensor import Tensor

EIGEN_LR_INIT_VALUE = 0.05


class EigenLR:
    """Positive per-dimension interpolation weight for hypersphere steps.

    The stored raw vector initializes to init_scale; the effective value is
    |raw| * (init_value / init_scale), so training starts at init_value and
    positivity holds by construction.
    """

    def __init__(self, d, name, init_value=EIGEN_LR_INIT_VALUE, init_scale=None):
        self.init_value = init_value
        self.init_scale = init_scale if init_scale is not None else 1.0 / np.sqrt(d)
        self.raw = T.parameter(np.full(d, self.init_scale), name=name)

    def effective(self) -> Tensor:
        return T.absolute(self.raw) * (self.init_value / self.init_scale)


def hyperstep(x: Tensor, block_out: Tensor, lam) -> Tensor:
    """Norm(Norm(x) + lam * (Norm(block_out) - Norm(x))), row-wise.

    ``lam`` may be an EigenLR, a Tensor, or a plain array broadcastable over
    rows. Every output row has unit norm.
    """
    if isinstance(lam, EigenLR):
        lam = lam.effective()
    elif not isinstance(lam, Tensor):
        lam = T.tensor(np.asarray(lam, dtype=np.float64))
    h = T.l2_normalize(x, axis=1)
    b = T.l2_normalize(block_out, axis=1)
    return T.l2_normalize(h + lam * (b - h), axis=1)


def _unit_rows(rng, rows, cols):
    w = rng.normal(size=(rows, cols))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


class NormAttnBlock:
    """Single attention block: row-normalized projections, rotated q/k, softmax.

    Row-normalized W_q, W_k, W_v, W_o; a learnable scalar score scale
    initialized to sqrt(d); optional rotation generators for relative
    position encoding; one eigen learning rate for the residual step the
    caller applies.
    """

    def __init__(self, d, rng, name, heads=1, generators=True, mode="commuting"):
        if heads < 1 or d % heads != 0:
            raise ValueError(f"head count {heads} must divide dimension {d}")
        head_dim = d // heads
        if head_dim % 2 != 0:
            raise ValueError(f"head dimension {head_dim} must be even")
        self.d = d
        self.heads = heads
        self.name = name
        self.w_q = T.parameter(_unit_rows(rng, d, d), name=f"{name}.w_q")
        self.w_k = T.parameter(_unit_rows(rng, d, d), name=f"{name}.w_k")
        self.w_v = T.parameter(_unit_rows(rng, d, d), name=f"{name}.w_v")
        self.w_o = T.parameter(_unit_rows(rng, d, d), name=f"{name}.w_o")
        self.score_scale = T.parameter(np.array(np.sqrt(head_dim)), name=f"{name}.score_scale")
        self.lam = EigenLR(d, name=f"{name}.lam")
        self.generators = (
            SkewGenerators(head_dim, mode=mode, rng=rng, name=f"{name}.gen")
            if generators
            else None
        )

    def params(self):
        out = {
            t.name: t
            for t in (self.w_q, self.w_k, self.w_v, self.w_o, self.score_scale, self.lam.raw)
        }
        if self.generators is not None:
            out.update(self.generators.params())
        return out

    def spherical_weights(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def normalized_attention(queries_src: PositionedVectors,
                         keys_vals_src: PositionedVectors,
                         block: NormAttnBlock,
                         rotate=True) -> Tensor:
    """Project, rotate q/k by position, attend, project back. Returns rows.

    The caller wraps the result in a hyperstep; self-attention is the case
    queries_src is keys_vals_src.
    """
    nq = queries_src.vectors.data.shape[0]
    nk = keys_vals_src.vectors.data.shape[0]
    if nk == 0:
        raise ValueError("attention requires at least one key (no prompts is invalid)")
    if queries_src.dim != block.d or keys_vals_src.dim != block.d:
        raise ValueError(
            f"row dims ({queries_src.dim}, {keys_vals_src.dim}) do not match "
            f"block dim {block.d}"
        )
    q = T.matmul(queries_src.vectors, T.transpose2d(block.w_q))
    k = T.matmul(keys_vals_src.vectors, T.transpose2d(block.w_k))
    v = T.matmul(keys_vals_src.vectors, T.transpose2d(block.w_v))
    hd = block.d // block.heads
    outs = []
    for h in range(block.heads):
        cols = slice(h * hd, (h + 1) * hd)
        qh = _slice_cols(q, cols)
        kh = _slice_cols(k, cols)
        vh = _slice_cols(v, cols)
        if rotate and block.generators is not None:
            qh = block.generators.rotate(PositionedVectors(qh, queries_src.positions)).vectors
            kh = block.generators.rotate(PositionedVectors(kh, keys_vals_src.positions)).vectors
        scores = T.scale_rows(T.matmul(qh, T.transpose2d(kh)), block.score_scale)
        weights = T.softmax_lastdim(scores)
        outs.append(T.matmul(weights, vh))
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return T.matmul(merged, T.transpose2d(block.w_o))


def _slice_cols(x: Tensor, cols: slice) -> Tensor:
    if cols == slice(0, x.data.shape[1]):
        return x
    data = x.data[:, cols]

    def bw(g):
        x._ensure_grad()
        x.grad[:, cols] += g

    return T._node(data, (x,), bw)


class MlpBlock:
    """Two-layer MLP with ReLU and hidden width 2d, no biases."""

    def __init__(self, d, rng, name):
        self.d = d
        self.name = name
        self.w1 = T.parameter(_unit_rows(rng, 2 * d, d), name=f"{name}.w1")
        self.w2 = T.parameter(_unit_rows(rng, d, 2 * d), name=f"{name}.w2")
        self.lam = EigenLR(d, name=f"{name}.lam")

    def params(self):
        return {t.name: t for t in (self.w1, self.w2, self.lam.raw)}

    def spherical_weights(self):
        return [self.w1, self.w2]

    def forward(self, x: Tensor) -> Tensor:
        return mlp_block(x, self.w1, self.w2)


def mlp_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """w2 @ relu(w1 @ x) applied row-wise; caller wraps in hyperstep."""
    hidden = T.relu(T.matmul(x, T.transpose2d(w1)))
    return T.matmul(hidden, T.transpose2d(w2))


class InteractionRound:
    """One four-step prompt/image exchange round, each step with its own weights."""

    def __init__(self, d, rng, name, heads=1, generators=True, mode="commuting"):
        self.prompt_self = NormAttnBlock(d, rng, f"{name}.prompt_self", heads, generators, mode)
        self.prompt_cross = NormAttnBlock(d, rng, f"{name}.prompt_cross", heads, generators, mode)
        self.prompt_mlp = MlpBlock(d, rng, f"{name}.prompt_mlp")
        self.image_cross = NormAttnBlock(d, rng, f"{name}.image_cross", heads, generators, mode)

    def blocks(self):
        return [self.prompt_self, self.prompt_cross, self.prompt_mlp, self.image_cross]

    def params(self):
        out = {}
        for b in self.blocks():
            out.update(b.params())
        return out


class InteractionModule:
    """Prompt/image interaction: rounds of (self-attn, cross, MLP, reverse cross).

    All four steps use hypersphere residual updates; the image update carries
    its own eigen learning rate, symmetric with the prompt updates.
    """

    def __init__(self, d, rng, rounds=2, heads=1, generators=True, mode="commuting",
                 rotate=True):
        self.d = d
        self.rotate = rotate
        self.rounds = [
            InteractionRound(d, rng, f"interact.r{i}", heads, generators, mode)
            for i in range(rounds)
        ]

    def params(self):
        out = {}
        for r in self.rounds:
            out.update(r.params())
        return out

    def spherical_weights(self):
        out = []
        for r in self.rounds:
            for b in r.blocks():
                out.extend(b.spherical_weights())
        return out

    def run(self, prompts: PositionedVectors, image: PositionedVectors):
        """Returns (updated prompts, updated image), all rows unit norm."""
        if prompts.vectors.data.shape[0] == 0:
            raise ValueError("interaction requires at least one prompt token")
        p, img = prompts, image
        for rnd in self.rounds:
            out = normalized_attention(p, p, rnd.prompt_self, rotate=self.rotate)
            p = PositionedVectors(hyperstep(p.vectors, out, rnd.prompt_self.lam), p.positions)

            out = normalized_attention(p, img, rnd.prompt_cross, rotate=self.rotate)
            p = PositionedVectors(hyperstep(p.vectors, out, rnd.prompt_cross.lam), p.positions)

            out = rnd.prompt_mlp.forward(p.vectors)
            p = PositionedVectors(hyperstep(p.vectors, out, rnd.prompt_mlp.lam), p.positions)

            out = normalized_attention(img, p, rnd.image_cross, rotate=self.rotate)
            img = PositionedVectors(
                hyperstep(img.vectors, out, rnd.image_cross.lam), img.positions
            )
        return p, img


def renormalize_weights(matrices, rng=None):
    """Scale every row of every matrix to unit norm, in place.

    A row of exact zeros (degenerate) is replaced by a fresh random unit row.
    Idempotent for nonzero rows. Call after every optimizer step.
    """
    for m in matrices:
        w = m.data
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        zero = norms[:, 0] == 0.0
        if np.any(zero):
            gen = rng if rng is not None else np.random.default_rng(0)
            fresh = gen.normal(size=(int(zero.sum()), w.shape[1]))
            w[zero] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)
            norms = np.linalg.norm(w, axis=1, keepdims=True)
        # rows already on the sphere are left untouched so repeated calls
        # are bitwise idempotent
        stale = np.abs(norms[:, 0] - 1.0) > 1e-12
        if np.any(stale):
            w[stale] /= norms[stale]
