"""Orthogonalizing matrix optimizer plus AdamW for vector-shaped parameters.

Matrix-like parameters (tensor rank >= 2, flattened beyond the first
dimension) take momentum-filtered steps along an approximate polar factor
U V^T of the gradient, computed with Newton-Schulz iterations instead of an
SVD. Rank-1 and scalar parameters use standard bias-corrected AdamW with
zero weight decay (post-step weight renormalization takes decay's place).
"""

from __future__ import annotations

import numpy as np

NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz(g, iters=5, polish=5):
    """Approximate the polar factor U V^T of a matrix.

    Runs ``iters`` quintic iterations X <- aX + b X X^T X + c X (X^T X)^2
    with coefficients tuned for a steep slope at zero, after scaling by the
    Frobenius norm, then ``polish`` convergent cubic iterations
    X <- 1.5 X - 0.5 X X^T X that push the singular values to 1. The
    transpose trick keeps the Gram matrix on the smaller side. A zero matrix
    returns zero.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {g.shape}")
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return np.zeros_like(g)
    transposed = g.shape[0] > g.shape[1]
    x = g.T / norm if transposed else g / norm
    a, b, c = NS_COEFFS
    for _ in range(iters):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
    for _ in range(polish):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if transposed else x


def flatten_matrix(arr):
    """Collapse all dimensions beyond the first: rows stay, the rest folds."""
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise ValueError(f"cannot flatten rank-{arr.ndim} array to a matrix")
    return arr.reshape(arr.shape[0], -1)


def route_params(named_params):
    """name -> 'muon' for rank >= 2 parameters, 'adamw' for the rest."""
    return {
        name: ("muon" if p.data.ndim >= 2 else "adamw")
        for name, p in named_params.items()
    }


class MuonState:
    def __init__(self, shape):
        self.momentum = np.zeros(shape)


class AdamState:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def muon_step(param, grad, state: MuonState, lr, momentum=0.95,
              ns_iters=5, ns_polish=5, rescale=True):
    """In-place momentum + orthogonalized update of a matrix-like parameter."""
    state.momentum = momentum * state.momentum + grad
    lookahead = grad + momentum * state.momentum
    flat = flatten_matrix(lookahead)
    ortho = newton_schulz(flat, iters=ns_iters, polish=ns_polish)
    rows, cols = flat.shape
    scale = np.sqrt(max(1.0, rows / cols)) if rescale else 1.0
    param -= lr * scale * ortho.reshape(param.shape)


def adamw_step(param, grad, state: AdamState, lr,
               betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Standard bias-corrected AdamW, in place."""
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class HybridOptimizer:
    """Deterministic per-parameter routing and step application.

    mode 'muon' routes rank >= 2 parameters to the orthogonalizing update;
    mode 'adamw' sends everything to AdamW (the ablation baseline). Steps
    iterate parameters in sorted-name order so runs are reproducible.
    """

    def __init__(self, named_params, mode="muon", momentum=0.95,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 ns_iters=5, ns_polish=5, rescale=True):
        if mode not in ("muon", "adamw"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.mode = mode
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.ns_iters = ns_iters
        self.ns_polish = ns_polish
        self.rescale = rescale
        auto = route_params(named_params)
        self.route = {
            name: (kind if mode == "muon" else "adamw") for name, kind in auto.items()
        }
        self.state = {}
        for name, p in named_params.items():
            if self.route[name] == "muon":
                self.state[name] = MuonState(flatten_matrix(p.data).shape)
            else:
                self.state[name] = AdamState(p.data.shape)

    def step(self, named_params, lr):
        for name in sorted(named_params):
            p = named_params[name]
            if p.grad is None:
                continue
            if self.route[name] == "muon":
                muon_step(
                    p.data, flatten_matrix(p.grad), self.state[name], lr,
                    momentum=self.momentum, ns_iters=self.ns_iters,
                    ns_polish=self.ns_polish, rescale=self.rescale,
                )
            else:
                adamw_step(
                    p.data, p.grad, self.state[name], lr,
                    betas=self.betas, eps=self.eps, weight_decay=self.weight_decay,
                )

    # -- checkpoint support ----------------------------------------------------

    def state_arrays(self):
        """Flat name -> array mapping of all optimizer state (for checkpoints)."""
        out = {}
        for name, st in self.state.items():
            if isinstance(st, MuonState):
                out[f"{name}!momentum"] = st.momentum
            else:
                out[f"{name}!m"] = st.m
                out[f"{name}!v"] = st.v
                out[f"{name}!t"] = np.array(float(st.t))
        return out

    def load_state_arrays(self, arrays):
        for name, st in self.state.items():
            if isinstance(st, MuonState):
                st.momentum = arrays[f"{name}!momentum"].reshape(st.momentum.shape).copy()
            else:
                st.m = arrays[f"{name}!m"].reshape(st.m.shape).copy()
                st.v = arrays[f"{name}!v"].reshape(st.v.shape).copy()
                st.t = int(arrays[f"{name}!t"])
