"""Position-dependent rotations built from learnable skew-symmetric generators.

Each 3-D coordinate p = (x, y, z) is mapped to the orthogonal matrix
R(p) = exp(A_x x + A_y y + A_z z) with skew-symmetric A's, and attention
scores between rotated keys and queries then depend on relative positions
only (exactly so when the generators commute).

Two parameterizations are supported:

* ``commuting`` (default): block-diagonal 2x2 rotation planes, d/2 angles
  per axis. Guarantees exp(A)exp(B) = exp(A+B), so translation invariance
  of attention scores is exact. Cheap closed form, used for training.
* ``general``: a dense skew matrix per axis with d(d-1)/2 free values
  packed as the strict upper triangle. Rotations go through a truncated
  scaled Taylor matrix exponential; the generators need not commute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, _node

AXES = ("x", "y", "z")


@dataclass
class PositionedVectors:
    """Rows of embedding vectors, one 3-D coordinate per row."""

    vectors: Tensor          # (n, d)
    positions: np.ndarray    # (n, 3) float64, normalized grid units

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.positions.shape[0] != self.vectors.data.shape[0]:
            raise ValueError(
                f"{self.vectors.data.shape[0]} vectors but "
                f"{self.positions.shape[0]} positions"
            )

    @property
    def dim(self):
        return self.vectors.data.shape[1]


def _skew_from_packed(packed: Tensor, d: int) -> Tensor:
    """Materialize a d x d skew-symmetric matrix from its strict upper triangle."""
    iu = np.triu_indices(d, k=1)
    a = np.zeros((d, d))
    a[iu] = packed.data
    a[(iu[1], iu[0])] = -packed.data

    def bw(g):
        packed._ensure_grad()
        packed.grad += g[iu] - g[(iu[1], iu[0])]

    return _node(a, (packed,), bw)


class SkewGenerators:
    """Learnable per-axis skew-symmetric generators for an even dimension d."""

    def __init__(self, d, mode="commuting", rng=None, init_scale=np.pi / 32, name=""):
        if d % 2 != 0:
            raise ValueError(f"generator dimension must be even, got {d}")
        if mode not in ("commuting", "general"):
            raise ValueError(f"unknown generator mode {mode!r}")
        self.d = d
        self.mode = mode
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        n = d // 2 if mode == "commuting" else d * (d - 1) // 2
        self.theta = {
            ax: T.parameter(rng.uniform(-init_scale, init_scale, size=n),
                            name=f"{name}.theta_{ax}" if name else f"theta_{ax}")
            for ax in AXES
        }

    def params(self):
        return {t.name: t for t in self.theta.values()}

    def param_count_per_axis(self):
        return self.theta["x"].data.size

    # -- plain numpy inspection paths (no autograd) ---------------------------

    def materialize(self, axis):
        """Dense skew-symmetric A_axis, built antisymmetric by construction."""
        th = self.theta[axis].data
        a = np.zeros((self.d, self.d))
        if self.mode == "commuting":
            for j, t in enumerate(th):
                a[2 * j, 2 * j + 1] = -t
                a[2 * j + 1, 2 * j] = t
        else:
            iu = np.triu_indices(self.d, k=1)
            a[iu] = th
            a[(iu[1], iu[0])] = -th
        return a

    def rotation_matrix(self, p):
        """R(p) = exp(A_x x + A_y y + A_z z) as a plain d x d array."""
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite coordinates")
        if self.mode == "commuting":
            ang = self._angles_np(p.reshape(1, 3))[0]
            r = np.zeros((self.d, self.d))
            c, s = np.cos(ang), np.sin(ang)
            for j in range(self.d // 2):
                r[2 * j, 2 * j] = c[j]
                r[2 * j, 2 * j + 1] = -s[j]
                r[2 * j + 1, 2 * j] = s[j]
                r[2 * j + 1, 2 * j + 1] = c[j]
            return r
        m = sum(self.materialize(ax) * p[i] for i, ax in enumerate(AXES))
        return T.expm(m)

    def _angles_np(self, positions):
        th = np.stack([self.theta[ax].data for ax in AXES])  # (3, d/2)
        return positions @ th

    # -- autograd paths --------------------------------------------------------

    def rotate(self, pv: PositionedVectors) -> PositionedVectors:
        """Apply R(p_i) to every row, preserving norms (orthogonality)."""
        if pv.dim != self.d:
            raise ValueError(f"vector dim {pv.dim} does not match generator dim {self.d}")
        if not np.all(np.isfinite(pv.positions)):
            raise ValueError("non-finite coordinates")
        if self.mode == "commuting":
            pos = T.tensor(pv.positions)
            theta = T.concat(
                [T.reshape(self.theta[ax], (1, self.d // 2)) for ax in AXES], axis=0
            )
            angles = T.matmul(pos, theta)
            rotated = T.rotate_pairs(pv.vectors, angles)
            return PositionedVectors(rotated, pv.positions)
        rows = []
        for i in range(pv.positions.shape[0]):
            m = None
            for k, ax in enumerate(AXES):
                a = _skew_from_packed(self.theta[ax], self.d)
                term = a * float(pv.positions[i, k])
                m = term if m is None else m + term
            r = T.matrix_exp(m)
            row = T.matmul(T.embed_rows(pv.vectors, [i]), T.transpose2d(r))
            rows.append(row)
        return PositionedVectors(T.concat(rows, axis=0), pv.positions)


def apply_rotations(gen: SkewGenerators, pv: PositionedVectors) -> PositionedVectors:
    return gen.rotate(pv)


def attention_scores(gen: SkewGenerators, queries: PositionedVectors,
                     keys: PositionedVectors) -> Tensor:
    """score[i, j] = (R(p_i) q_i) . (R(p_j) k_j)."""
    if queries.dim != keys.dim:
        raise ValueError(f"query dim {queries.dim} != key dim {keys.dim}")
    qr = gen.rotate(queries)
    kr = gen.rotate(keys)
    return T.matmul(qr.vectors, T.transpose2d(kr.vectors))
