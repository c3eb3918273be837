"""Promptable volumetric segmentation network.

A residual convolutional encoder downsamples a single-channel volume to a
bottleneck grid of unit-norm embedding rows with voxel-center coordinates.
User prompts (box corners, clicks) become unit vectors with coordinates,
previous-step logits re-enter through a small strided-conv tower, the
prompt/image interaction runs on the hypersphere, and a mirrored decoder
with skip concatenation emits logits at input resolution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rotations import PositionedVectors
from .sphere import InteractionModule
from .tensor import Tensor

PROMPT_BOX_MIN = 0
PROMPT_BOX_MAX = 1
PROMPT_CLICK_FG = 2
PROMPT_CLICK_BG = 3


@dataclass
class NetConfig:
    """Architecture knobs; embedding dim d = base_channels * 2**depth."""

    base_channels: int = 4
    depth: int = 3
    resblocks_per_stage: int = 1
    interaction_rounds: int = 2
    heads: int = 1
    pos_mode: str = "rotation"  # rotation | rotation_general | absolute
    max_abs_grid: int = 8
    final_bias: bool = True
    seed: int = 0

    @property
    def d(self):
        return self.base_channels * (2 ** self.depth)

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.d % 2 != 0:
            raise ValueError(f"embedding dim {self.d} must be even")
        if self.pos_mode not in ("rotation", "rotation_general", "absolute"):
            raise ValueError(f"unknown pos_mode {self.pos_mode!r}")
        return self

    def to_dict(self):
        return {
            "base_channels": self.base_channels,
            "depth": self.depth,
            "resblocks_per_stage": self.resblocks_per_stage,
            "interaction_rounds": self.interaction_rounds,
            "heads": self.heads,
            "pos_mode": self.pos_mode,
            "max_abs_grid": self.max_abs_grid,
            "final_bias": self.final_bias,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class LatentGrid:
    """Bottleneck embeddings: unit-norm rows plus their 3-D coordinates."""

    rows: Tensor
    positions: np.ndarray
    grid_shape: tuple

    def as_positioned(self):
        return PositionedVectors(self.rows, self.positions)


@dataclass
class EncodedImage:
    skips: list
    grid: LatentGrid
    volume_shape: tuple


def groups_for(channels):
    """Largest divisor of the channel count that is at most 8."""
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _conv_param(rng, k_out, k_in, ksize, name, scale=None):
    fan_in = k_in * ksize ** 3
    std = np.sqrt(2.0 / fan_in) if scale is None else scale
    w = rng.normal(size=(k_out, k_in, ksize, ksize, ksize)) * std
    return T.parameter(w, name=name)


class ResBlock3D:
    """Pre-activation residual block: two 3^3 convs, each after GN + ReLU.

    Channel width is constant inside the block so the residual addition is
    element-wise; when the input width differs, a 1x1x1 projection aligns it
    first (decoder stages after skip concatenation).
    """

    def __init__(self, in_ch, out_ch, rng, name):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.proj = (
            _conv_param(rng, out_ch, in_ch, 1, f"{name}.proj") if in_ch != out_ch else None
        )
        self.gn1_gamma = T.parameter(np.ones(out_ch), name=f"{name}.gn1.gamma")
        self.gn1_beta = T.parameter(np.zeros(out_ch), name=f"{name}.gn1.beta")
        self.conv1 = _conv_param(rng, out_ch, out_ch, 3, f"{name}.conv1")
        self.gn2_gamma = T.parameter(np.ones(out_ch), name=f"{name}.gn2.gamma")
        self.gn2_beta = T.parameter(np.zeros(out_ch), name=f"{name}.gn2.beta")
        self.conv2 = _conv_param(rng, out_ch, out_ch, 3, f"{name}.conv2")

    def params(self):
        out = {
            t.name: t
            for t in (
                self.gn1_gamma, self.gn1_beta, self.conv1,
                self.gn2_gamma, self.gn2_beta, self.conv2,
            )
        }
        if self.proj is not None:
            out[self.proj.name] = self.proj
        return out

    def forward(self, x):
        if self.proj is not None:
            x = T.conv3d(x, self.proj, stride=1, padding=0)
        g = groups_for(self.out_ch)
        h = T.relu(T.group_norm(x, self.gn1_gamma, self.gn1_beta, g))
        h = T.conv3d(h, self.conv1, stride=1, padding=1)
        h = T.relu(T.group_norm(h, self.gn2_gamma, self.gn2_beta, g))
        h = T.conv3d(h, self.conv2, stride=1, padding=1)
        return x + h


class ImageEncoder:
    """Initial conv to base channels, then stride-2 stages that double them."""

    def __init__(self, cfg: NetConfig, rng):
        b = cfg.base_channels
        self.cfg = cfg
        self.conv_in = _conv_param(rng, b, 1, 3, "enc.conv_in")
        self.stage_blocks = []
        self.down_convs = []
        ch = b
        for s in range(cfg.depth + 1):
            blocks = [
                ResBlock3D(ch, ch, rng, f"enc.s{s}.res{r}")
                for r in range(cfg.resblocks_per_stage)
            ]
            self.stage_blocks.append(blocks)
            if s < cfg.depth:
                self.down_convs.append(
                    _conv_param(rng, 2 * ch, ch, 3, f"enc.s{s}.down")
                )
                ch *= 2

    def params(self):
        out = {self.conv_in.name: self.conv_in}
        for blocks in self.stage_blocks:
            for blk in blocks:
                out.update(blk.params())
        for w in self.down_convs:
            out[w.name] = w
        return out

    def forward(self, x):
        """Returns (per-stage skip activations, bottleneck feature map)."""
        h = T.conv3d(x, self.conv_in, stride=1, padding=1)
        skips = []
        for s in range(self.cfg.depth):
            for blk in self.stage_blocks[s]:
                h = blk.forward(h)
            skips.append(h)
            h = T.conv3d(h, self.down_convs[s], stride=2, padding=1)
        for blk in self.stage_blocks[self.cfg.depth]:
            h = blk.forward(h)
        return skips, h


class LogitTower:
    """Strided convs mapping previous logits down to the bottleneck grid.

    No biases, so zero logits map to exactly zero; the final conv starts at
    zero so the first refinement step leaves image embeddings untouched
    while earlier layers still receive gradient signal.
    """

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        chans = [1] + [cfg.base_channels * (2 ** (s + 1)) for s in range(cfg.depth)]
        self.convs = []
        for i in range(cfg.depth):
            last = i == cfg.depth - 1
            w = _conv_param(rng, chans[i + 1], chans[i], 3, f"tower.conv{i}",
                            scale=0.0 if last else None)
            self.convs.append(w)

    def params(self):
        return {w.name: w for w in self.convs}

    def forward(self, logits):
        h = logits
        for i, w in enumerate(self.convs):
            h = T.conv3d(h, w, stride=2, padding=1)
            if i < len(self.convs) - 1:
                h = T.relu(h)
        return h


class MaskDecoder:
    """Mirror of the encoder: upsample, concatenate skip, residual block.

    Each stage's block takes the 3C concatenation down to the skip width C;
    a final 1x1x1 conv produces single-channel logits at input resolution.
    """

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        b = cfg.base_channels
        self.blocks = []
        for s in reversed(range(cfg.depth)):
            skip_ch = b * (2 ** s)
            self.blocks.append(
                ResBlock3D(3 * skip_ch, skip_ch, rng, f"dec.s{s}.res")
            )
        self.final = _conv_param(rng, 1, b, 1, "dec.final")
        self.final_bias = (
            T.parameter(np.zeros(1), name="dec.final_bias") if cfg.final_bias else None
        )

    def params(self):
        out = {}
        for blk in self.blocks:
            out.update(blk.params())
        out[self.final.name] = self.final
        if self.final_bias is not None:
            out[self.final_bias.name] = self.final_bias
        return out

    def forward(self, bottleneck, skips):
        h = bottleneck
        for blk, skip in zip(self.blocks, reversed(skips)):
            h = T.trilinear_upsample(h)
            if h.data.shape[2:] != skip.data.shape[2:]:
                raise ValueError(
                    f"decoder/skip geometry mismatch: {h.data.shape} vs {skip.data.shape}"
                )
            h = T.concat([h, skip], axis=1)
            h = blk.forward(h)
        out = T.conv3d(h, self.final, stride=1, padding=0)
        if self.final_bias is not None:
            out = out + self.final_bias
        return out


class SegmentationNet:
    """Full promptable model: encoder runs once per volume, decoder per prompt."""

    def __init__(self, cfg: NetConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.encoder = ImageEncoder(cfg, rng)
        self.tower = LogitTower(cfg, rng)
        table = rng.normal(size=(4, cfg.d))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.prompt_table = T.parameter(table, name="prompt.table")
        use_rot = cfg.pos_mode in ("rotation", "rotation_general")
        self.interaction = InteractionModule(
            cfg.d,
            rng,
            rounds=cfg.interaction_rounds,
            heads=cfg.heads,
            generators=use_rot,
            mode="general" if cfg.pos_mode == "rotation_general" else "commuting",
            rotate=use_rot,
        )
        self.abs_table = None
        if cfg.pos_mode == "absolute":
            n_cells = cfg.max_abs_grid ** 3
            self.abs_table = T.parameter(
                rng.normal(size=(n_cells, cfg.d)) * 0.02, name="abspos.table"
            )
        self.decoder = MaskDecoder(cfg, rng)
        self.encoder_runs = 0
        self._cache_key = None
        self._cache_val = None

    # -- parameters ------------------------------------------------------------

    def named_params(self):
        out = {}
        out.update(self.encoder.params())
        out.update(self.tower.params())
        out[self.prompt_table.name] = self.prompt_table
        out.update(self.interaction.params())
        if self.abs_table is not None:
            out[self.abs_table.name] = self.abs_table
        out.update(self.decoder.params())
        return out

    def spherical_weights(self):
        """Matrices kept row-normalized after every optimizer step."""
        return self.interaction.spherical_weights() + [self.prompt_table]

    def param_count(self):
        return sum(p.data.size for p in self.named_params().values())

    def zero_grads(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- encoding ----------------------------------------------------------------

    def _check_extents(self, shape):
        div = 2 ** self.cfg.depth
        for i, ext in enumerate(shape):
            if ext % div != 0:
                raise ValueError(
                    f"volume extent {ext} on axis {i} is not divisible by {div}; "
                    f"zero-pad the volume before encoding"
                )

    def encode_image(self, vol: np.ndarray) -> EncodedImage:
        vol = np.asarray(vol, dtype=np.float64)
        if vol.ndim != 3:
            raise ValueError(f"expected a 3-D volume, got shape {vol.shape}")
        self._check_extents(vol.shape)
        self.encoder_runs += 1
        x = T.tensor(vol.reshape((1, 1) + vol.shape))
        skips, bottom = self.encoder.forward(x)
        grid_shape = bottom.data.shape[2:]
        rows = T.reshape(bottom, (self.cfg.d, int(np.prod(grid_shape))))
        rows = T.l2_normalize(T.transpose2d(rows), axis=1)
        positions = self._grid_positions(grid_shape)
        grid = LatentGrid(rows, positions, grid_shape)
        return EncodedImage(skips, grid, vol.shape)

    @staticmethod
    def _grid_positions(grid_shape):
        m = float(max(grid_shape))
        zz, yy, xx = np.meshgrid(
            np.arange(grid_shape[0]), np.arange(grid_shape[1]), np.arange(grid_shape[2]),
            indexing="ij",
        )
        pos = np.stack([zz, yy, xx], axis=-1).reshape(-1, 3).astype(np.float64)
        return (pos + 0.5) / m

    def _to_grid_units(self, coords, volume_shape, grid_shape):
        div = 2 ** self.cfg.depth
        m = float(max(grid_shape))
        pts = (np.asarray(coords, dtype=np.float64) + 0.5) / div
        return pts / m

    # -- prompts --------------------------------------------------------------------

    def encode_prompts(self, prompts, volume_shape, grid_shape) -> PositionedVectors:
        """Box corners and clicks to unit-vector tokens with grid coordinates."""
        indices = []
        coords = []
        if prompts.box is not None:
            lo, hi = prompts.box
            for v, idx in ((lo, PROMPT_BOX_MIN), (hi, PROMPT_BOX_MAX)):
                self._check_inside(v, volume_shape)
                indices.append(idx)
                coords.append(v)
        for voxel, is_fg in prompts.clicks:
            self._check_inside(voxel, volume_shape)
            indices.append(PROMPT_CLICK_FG if is_fg else PROMPT_CLICK_BG)
            coords.append(voxel)
        if not indices:
            raise ValueError("prompt set is empty: provide a box or at least one click")
        rows = T.embed_rows(self.prompt_table, indices)
        positions = self._to_grid_units(np.array(coords, dtype=np.float64),
                                        volume_shape, grid_shape)
        return PositionedVectors(rows, positions)

    @staticmethod
    def _check_inside(voxel, volume_shape):
        v = np.asarray(voxel)
        if v.shape != (3,):
            raise ValueError(f"voxel coordinate must be a 3-vector, got {v}")
        for i in range(3):
            if not (0 <= v[i] < volume_shape[i]):
                raise ValueError(
                    f"coordinate {tuple(int(c) for c in v)} outside volume "
                    f"bounds {tuple(volume_shape)} on axis {i}"
                )

    def _abs_embed(self, pv: PositionedVectors, grid_shape) -> PositionedVectors:
        """Absolute-position baseline: add a learned per-cell vector, renormalize."""
        m = float(max(grid_shape))
        g = self.cfg.max_abs_grid
        cells = np.clip((pv.positions * m - 0.5).round().astype(int), 0, g - 1)
        flat = (cells[:, 0] * g + cells[:, 1]) * g + cells[:, 2]
        emb = T.embed_rows(self.abs_table, flat)
        return PositionedVectors(T.l2_normalize(pv.vectors + emb, axis=1), pv.positions)

    # -- previous logits ---------------------------------------------------------------

    def embed_prev_logits(self, grid: LatentGrid, prev_logits) -> LatentGrid:
        """Fold the previous prediction into the image rows, renormalized.

        ``prev_logits`` is a plain array (treated as data, not differentiated
        through earlier steps). None means no previous segmentation exists and
        the rows pass through unchanged.
        """
        if prev_logits is None:
            return grid
        prev = np.asarray(prev_logits, dtype=np.float64)
        expected = tuple(s * 2 ** self.cfg.depth for s in grid.grid_shape)
        if prev.shape != expected:
            raise ValueError(
                f"previous logits shape {prev.shape} does not match volume {expected}"
            )
        h = self.tower.forward(T.tensor(prev.reshape((1, 1) + prev.shape)))
        rows = T.reshape(h, (self.cfg.d, int(np.prod(grid.grid_shape))))
        rows = T.transpose2d(rows)
        merged = T.l2_normalize(grid.rows + rows, axis=1)
        return LatentGrid(merged, grid.positions, grid.grid_shape)

    # -- full forward -------------------------------------------------------------------

    def decode_with_prompts(self, enc: EncodedImage, prompts, prev_logits=None) -> Tensor:
        """Prompt encoding + interaction + mask decoding against a cached encoding."""
        grid = self.embed_prev_logits(enc.grid, prev_logits)
        prompt_pv = self.encode_prompts(prompts, enc.volume_shape, grid.grid_shape)
        image_pv = grid.as_positioned()
        if self.abs_table is not None:
            prompt_pv = self._abs_embed(prompt_pv, grid.grid_shape)
            image_pv = self._abs_embed(image_pv, grid.grid_shape)
        prompt_pv, image_pv = self.interaction.run(prompt_pv, image_pv)
        gd, gh, gw = grid.grid_shape
        bottom = T.reshape(T.transpose2d(image_pv.vectors), (1, self.cfg.d, gd, gh, gw))
        logits = self.decoder.forward(bottom, enc.skips)
        return T.reshape(logits, enc.volume_shape)

    def forward(self, vol, prompts, prev_logits=None) -> Tensor:
        """Convenience path with a one-slot encoder cache keyed by volume bytes."""
        vol = np.asarray(vol, dtype=np.float64)
        key = (vol.shape, hashlib.sha256(vol.tobytes()).hexdigest())
        if key != self._cache_key:
            self._cache_val = self.encode_image(vol)
            self._cache_key = key
        return self.decode_with_prompts(self._cache_val, prompts, prev_logits)

    def invalidate_cache(self):
        self._cache_key = None
        self._cache_val = None
