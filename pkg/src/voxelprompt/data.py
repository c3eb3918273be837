"""Volumes, prompts, synthetic data generation, preprocessing, and file I/O.

The on-disk format is a small self-describing binary container (image payload
in little-endian float64, optional uint8 instance-label mask, optional
spacing) plus a plain-text manifest of ``source-id, path, split`` lines.
Synthetic volumes stand in for real scan corpora: bright geometric bodies on
a noisy background, fully determined by (seed, index).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"VPVF"
VERSION = 1
LITTLE_ENDIAN_FLAG = 0x01

CT_WINDOWS = {
    "soft_tissue": (400.0, 40.0),
    "lung": (1500.0, -160.0),
    "brain": (80.0, 40.0),
    "bone": (1800.0, 400.0),
}


@dataclass
class Volume:
    """Dense 3-D scalar grid with optional spacing metadata."""

    data: np.ndarray
    spacing: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class PromptSet:
    """One instance's user input: an optional box plus ordered clicks."""

    box: tuple | None = None          # (lo, hi) inclusive voxel corners
    clicks: list = field(default_factory=list)  # [(voxel, is_foreground)]

    def with_click(self, voxel, is_fg):
        return PromptSet(box=self.box, clicks=self.clicks + [(np.asarray(voxel), bool(is_fg))])

    def count(self):
        return (2 if self.box is not None else 0) + len(self.clicks)


# -- binary volume container ---------------------------------------------------------


def write_volume(path, image, mask=None, spacing=None):
    """Serialize an image (float64) and optional uint8 label mask; byte-exact."""
    image = np.ascontiguousarray(np.asarray(image, dtype="<f8"))
    if image.ndim != 3:
        raise ValueError(f"image must be 3-D, got {image.shape}")
    flags = 0
    if spacing is not None:
        flags |= 1
    if mask is not None:
        mask = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
        if mask.shape != image.shape:
            raise ValueError("mask shape must match image shape")
        flags |= 2
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, LITTLE_ENDIAN_FLAG, flags))
        f.write(struct.pack("<III", *image.shape))
        if spacing is not None:
            f.write(struct.pack("<ddd", *spacing))
        f.write(image.tobytes())
        if mask is not None:
            f.write(mask.tobytes())


def read_volume(path):
    """Read a volume container; returns (image, mask-or-None, spacing-or-None)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, endian, flags = struct.unpack("<HBB", raw[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if endian != LITTLE_ENDIAN_FLAG:
        raise ValueError(f"{path}: foreign byte order flag 0x{endian:02x}")
    extents = struct.unpack("<III", raw[8:20])
    off = 20
    spacing = None
    if flags & 1:
        spacing = struct.unpack("<ddd", raw[off : off + 24])
        off += 24
    n = int(np.prod(extents))
    need = off + 8 * n + (n if flags & 2 else 0)
    if len(raw) != need:
        raise ValueError(f"{path}: payload length {len(raw)} != expected {need}")
    image = np.frombuffer(raw[off : off + 8 * n], dtype="<f8").reshape(extents).copy()
    off += 8 * n
    mask = None
    if flags & 2:
        mask = np.frombuffer(raw[off : off + n], dtype=np.uint8).reshape(extents).copy()
    return image, mask, spacing


# -- manifest --------------------------------------------------------------------------


def write_manifest(path, rows):
    """rows: iterable of (source_id, file_path, split)."""
    with open(path, "w") as f:
        for source, fpath, split in rows:
            f.write(f"{source}, {fpath}, {split}\n")


def read_manifest(path):
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        source, fpath, split = (tok.strip() for tok in line.split(","))
        out.append((source, fpath, split))
    return out


# -- synthetic volumes -------------------------------------------------------------------


FAMILIES = ("sphere", "box", "ellipsoid", "two-blob")


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic corpus; every byte follows from (seed, index)."""

    size: int = 32
    families: tuple = FAMILIES
    noise_sigma: float = 0.1
    contrast_range: tuple = (0.35, 0.85)
    radius_range: tuple = (0.15, 0.3)
    seed: int = 0

    def validate(self):
        if self.size < 8 or self.size % 8 != 0:
            raise ValueError(f"extent {self.size} must be a positive multiple of 8")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValueError(f"unknown shape family {fam!r}")
        return self


def _coords(n):
    ax = np.arange(n, dtype=np.float64) + 0.5
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _support_sphere(n, rng, radius_range):
    zz, yy, xx = _coords(n)
    c = rng.uniform(0.35 * n, 0.65 * n, size=3)
    r = rng.uniform(radius_range[0] * n, radius_range[1] * n)
    d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
    return (d2 <= r * r).astype(np.uint8)


def _support_box(n, rng):
    zz, yy, xx = _coords(n)
    c = rng.uniform(0.35 * n, 0.65 * n, size=3)
    half = rng.uniform(0.12 * n, 0.28 * n, size=3)
    inside = (
        (np.abs(zz - c[0]) <= half[0])
        & (np.abs(yy - c[1]) <= half[1])
        & (np.abs(xx - c[2]) <= half[2])
    )
    return inside.astype(np.uint8)


def _support_ellipsoid(n, rng):
    zz, yy, xx = _coords(n)
    c = rng.uniform(0.35 * n, 0.65 * n, size=3)
    ax = rng.uniform(0.14 * n, 0.3 * n, size=3)
    d = ((zz - c[0]) / ax[0]) ** 2 + ((yy - c[1]) / ax[1]) ** 2 + ((xx - c[2]) / ax[2]) ** 2
    return (d <= 1.0).astype(np.uint8)


def _support_two_blob(n, rng):
    zz, yy, xx = _coords(n)
    labels = np.zeros((n, n, n), dtype=np.uint8)
    for attempt in range(64):
        c1 = rng.uniform(0.3 * n, 0.7 * n, size=3)
        c2 = rng.uniform(0.3 * n, 0.7 * n, size=3)
        r1 = rng.uniform(0.13 * n, 0.2 * n)
        r2 = rng.uniform(0.13 * n, 0.2 * n)
        if np.linalg.norm(c1 - c2) >= 0.75 * (r1 + r2):
            break
    m1 = (zz - c1[0]) ** 2 + (yy - c1[1]) ** 2 + (xx - c1[2]) ** 2 <= r1 * r1
    m2 = (zz - c2[0]) ** 2 + (yy - c2[1]) ** 2 + (xx - c2[2]) ** 2 <= r2 * r2
    labels[m1] = 1
    labels[m2 & ~m1] = 2
    return labels


def gen_synthetic(spec: SyntheticSpec, index: int):
    """One (image, instance labels) pair. Images lie in [0, 1]; labels are uint8."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    n = spec.size
    fam = spec.families[int(rng.integers(len(spec.families)))]
    if fam == "sphere":
        labels = _support_sphere(n, rng, spec.radius_range)
    elif fam == "box":
        labels = _support_box(n, rng)
    elif fam == "ellipsoid":
        labels = _support_ellipsoid(n, rng)
    else:
        labels = _support_two_blob(n, rng)
    if not labels.any():
        # degenerate draw (fully clipped shape): fall back to a centered sphere
        zz, yy, xx = _coords(n)
        d2 = (zz - n / 2) ** 2 + (yy - n / 2) ** 2 + (xx - n / 2) ** 2
        labels = (d2 <= (0.2 * n) ** 2).astype(np.uint8)
    contrast = rng.uniform(*spec.contrast_range)
    image = contrast * (labels > 0).astype(np.float64)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, labels, fam


def make_dataset(spec: SyntheticSpec, out_dir, n_train, n_eval):
    """Write VolumeFiles plus a manifest; shape family doubles as source id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_train + n_eval):
        split = "train" if i < n_train else "eval"
        image, labels, fam = gen_synthetic(spec, i)
        fname = f"case_{i:05d}.vol"
        write_volume(out / fname, image, mask=labels)
        rows.append((fam, fname, split))
    write_manifest(out / "manifest.txt", rows)
    return out / "manifest.txt"


# -- intensity preprocessing ------------------------------------------------------------


def ct_window_normalize(raw, window):
    """Clip Hounsfield units to a named window and rescale to [0, 1]."""
    if window not in CT_WINDOWS:
        raise ValueError(f"unknown CT window {window!r}; options: {sorted(CT_WINDOWS)}")
    width, level = CT_WINDOWS[window]
    lo = level - width / 2.0
    hi = level + width / 2.0
    return (np.clip(np.asarray(raw, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def _nearest_rank(sorted_vals, q):
    n = len(sorted_vals)
    rank = int(np.ceil(q / 100.0 * n))
    return sorted_vals[max(rank - 1, 0)]


def percentile_clip_normalize(raw):
    """Clip to the nearest-rank 0.5th/99.5th percentiles, rescale to [0, 1].

    A constant volume maps to an all-0.5 volume (degenerate policy).
    """
    raw = np.asarray(raw, dtype=np.float64)
    vals = np.sort(raw.reshape(-1))
    lo = _nearest_rank(vals, 0.5)
    hi = _nearest_rank(vals, 99.5)
    if hi <= lo:
        return np.full(raw.shape, 0.5)
    return (np.clip(raw, lo, hi) - lo) / (hi - lo)


# -- spatial policies ---------------------------------------------------------------------


def _maxpool2(image):
    d, h, w = image.shape
    pd, ph, pw = d % 2, h % 2, w % 2
    if pd or ph or pw:
        image = np.pad(image, ((0, pd), (0, ph), (0, pw)), constant_values=-np.inf)
    v = image.reshape(image.shape[0] // 2, 2, image.shape[1] // 2, 2, image.shape[2] // 2, 2)
    return v.max(axis=(1, 3, 5))


def _orpool2(labels):
    d, h, w = labels.shape
    pd, ph, pw = d % 2, h % 2, w % 2
    if pd or ph or pw:
        labels = np.pad(labels, ((0, pd), (0, ph), (0, pw)))
    v = labels.reshape(labels.shape[0] // 2, 2, labels.shape[1] // 2, 2, labels.shape[2] // 2, 2)
    return v.max(axis=(1, 3, 5))


def crop_pad(image, labels, rng, margin_range=(1, 64), max_volume=None, divisor=8):
    """Crop around the labelled region, bound the voxel budget, pad to a multiple.

    The crop is the label bounding box grown per face by a uniform integer
    margin, clamped to the volume. If the result exceeds ``max_volume``
    voxels, image and labels are stride-2 max-pooled (labels via logical OR
    so they stay crisp) until within budget. Finally each extent is zero-padded
    up to the next multiple of ``divisor``.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.uint8)
    fg = labels > 0
    if not fg.any():
        raise ValueError("crop_pad requires a non-empty label mask")
    lo_m, hi_m = margin_range
    idx = np.nonzero(fg)
    lo = np.array([a.min() for a in idx])
    hi = np.array([a.max() for a in idx])
    lo = np.maximum(lo - rng.integers(lo_m, hi_m + 1, size=3), 0)
    hi = np.minimum(hi + rng.integers(lo_m, hi_m + 1, size=3), np.array(image.shape) - 1)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    image = image[sl]
    labels = labels[sl]
    if max_volume is not None:
        while image.size > max_volume:
            image = _maxpool2(image)
            labels = _orpool2(labels)
    pads = tuple((0, (-s) % divisor) for s in image.shape)
    image = np.pad(image, pads)
    labels = np.pad(labels, pads)
    return image, labels


def intensity_augment(image, rng, p=0.5, bias_coeff=0.3, blur_sigma=(0.5, 1.5),
                      gamma_range=(0.7, 1.4)):
    """With probability p apply one of: polynomial bias field, blur, gamma shift.

    Outputs stay inside [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if rng.uniform() >= p:
        return image
    choice = int(rng.integers(3))
    if choice == 0:
        n0, n1, n2 = image.shape
        u = [np.linspace(-1.0, 1.0, s) for s in (n0, n1, n2)]
        zz, yy, xx = np.meshgrid(*u, indexing="ij")
        monomials = (zz, yy, xx, zz * zz, yy * yy, xx * xx, zz * yy, zz * xx, yy * xx)
        field = np.ones_like(image)
        for m in monomials:
            field = field + rng.uniform(-bias_coeff, bias_coeff) * m
        field = np.maximum(field, 0.05)
        image = image * field
        lo, hi = image.min(), image.max()
        if hi > lo:
            image = (image - lo) / (hi - lo)
        else:
            image = np.full(image.shape, 0.5)
    elif choice == 1:
        sigma = rng.uniform(*blur_sigma)
        image = ndimage.gaussian_filter(image, sigma=sigma, mode="nearest")
        image = np.clip(image, 0.0, 1.0)
    else:
        gamma = rng.uniform(*gamma_range)
        image = np.clip(image, 0.0, 1.0) ** gamma
    return image


# -- budgeted source sampling -----------------------------------------------------------


def coreset_uniform_select(sources, budget):
    """Waterfill an item budget approximately evenly across sources.

    ``sources``: list of (source_id, case_count). Sources smaller than the
    fair share contribute everything; the remainder re-divides among the
    larger ones, with leftover items assigned to the later sources in input
    order. Total never exceeds the budget.
    """
    sources = [(sid, int(c)) for sid, c in sources]
    if not sources:
        raise ValueError("no sources given")
    active = [(sid, c) for sid, c in sources if c > 0]
    if budget < len(active):
        raise ValueError(f"budget {budget} below source count {len(active)}")
    quotas = {sid: 0 for sid, _ in sources}
    remaining = budget
    while active:
        fair = remaining // len(active)
        small = [(sid, c) for sid, c in active if c <= fair]
        if not small:
            base = remaining // len(active)
            extra = remaining % len(active)
            for i, (sid, c) in enumerate(active):
                quotas[sid] = base + (1 if i >= len(active) - extra else 0)
            remaining = 0
            break
        for sid, c in small:
            quotas[sid] = c
            remaining -= c
        active = [(sid, c) for sid, c in active if c > fair]
    return quotas
