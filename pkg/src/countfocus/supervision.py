"""Ground-truth synthesis: density maps, segmentation maps, global-density labels.

Density maps place one discretized Gaussian per point, truncated at 3 sigma and
renormalized to unit discrete mass so the map total equals the point count
exactly, even when kernels are clipped by image borders.  Segmentation maps
mark every pixel within Euclidean distance sigma_P of some point.  Global
density quantizes per-patch counts into M+1 levels using a dataset-wide step
size.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import EmptyCanvas, NoData, ShapeMismatch
from .geometry import PointSet, SigmaAssignment

FFDM_MAGIC = b"FFDM"


@dataclass(frozen=True)
class DensityMap:
    """H x W non-negative field whose sum is the object count."""

    values: np.ndarray  # (H, W) float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch(f"density map must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class SegmentationMap:
    """H x W binary foreground mask."""

    values: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeMismatch(f"segmentation map must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("segmentation values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GlobalDensitySpec:
    """Quantization of patch counts: step size L and number of levels M."""

    step_size: int
    num_levels: int

    def __post_init__(self):
        if self.step_size < 1:
            raise ValueError("step size must be >= 1")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")


@dataclass(frozen=True)
class GlobalDensityLabel:
    """Quantized density class index in [0, M]."""

    level: int


def rasterize_density(ps: PointSet, sigmas: SigmaAssignment) -> DensityMap:
    """Sum of per-point unit-mass Gaussians sampled at pixel centers."""
    if ps.image_width < 1 or ps.image_height < 1:
        raise EmptyCanvas("cannot rasterize onto a zero-size image")
    if len(sigmas) != len(ps):
        raise ShapeMismatch(f"{len(sigmas)} sigmas for {len(ps)} points")
    h, w = ps.image_height, ps.image_width
    out = np.zeros((h, w), dtype=np.float64)
    for (px, py), sigma in zip(ps.points, sigmas.sigmas):
        r = 3.0 * sigma
        x0 = max(int(np.floor(px - r)), 0)
        x1 = min(int(np.ceil(px + r)) + 1, w)
        y0 = max(int(np.floor(py - r)), 0)
        y1 = min(int(np.ceil(py + r)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            # kernel window entirely off-canvas cannot happen for in-bounds
            # points, but guard anyway
            continue
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        d2 = (ys[:, None] - py) ** 2 + (xs[None, :] - px) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > r * r] = 0.0
        mass = kernel.sum()
        if mass <= 0:
            # degenerate tiny sigma: all mass on the nearest pixel
            out[min(max(int(round(py)), 0), h - 1), min(max(int(round(px)), 0), w - 1)] += 1.0
            continue
        out[y0:y1, x0:x1] += kernel / mass
    return DensityMap(values=out)


def rasterize_segmentation(ps: PointSet, sigmas: SigmaAssignment) -> SegmentationMap:
    """Binary map: pixel p is 1 iff some point P has ||p - P|| <= sigma_P."""
    if ps.image_width < 1 or ps.image_height < 1:
        raise EmptyCanvas("cannot rasterize onto a zero-size image")
    if len(sigmas) != len(ps):
        raise ShapeMismatch(f"{len(sigmas)} sigmas for {len(ps)} points")
    h, w = ps.image_height, ps.image_width
    out = np.zeros((h, w), dtype=np.uint8)
    for (px, py), sigma in zip(ps.points, sigmas.sigmas):
        x0 = max(int(np.floor(px - sigma)), 0)
        x1 = min(int(np.ceil(px + sigma)) + 1, w)
        y0 = max(int(np.floor(py - sigma)), 0)
        y1 = min(int(np.ceil(py + sigma)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        d2 = (ys[:, None] - py) ** 2 + (xs[None, :] - px) ** 2
        out[y0:y1, x0:x1] |= (d2 <= sigma * sigma).astype(np.uint8)
    return SegmentationMap(values=out)


def compute_step_size(training_patches, M: int) -> GlobalDensitySpec:
    """Dataset-wide step size from the maximum patch density.

    Each entry of ``training_patches`` is (PointSet, patch_pixel_count): the
    full-image annotations plus the pixel count of the training patch carved
    from that image.  The step size is
    floor(max_i(count_i / image_pixels_i * patch_pixels_i) / M) + 1.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    patches = list(training_patches)
    if not patches:
        raise NoData("compute_step_size needs at least one patch")
    terms = []
    for ps, patch_pixels in patches:
        z_i = ps.image_width * ps.image_height
        terms.append(len(ps) / z_i * patch_pixels)
    L = int(np.floor(max(terms) / M)) + 1
    return GlobalDensitySpec(step_size=L, num_levels=M)


def density_label(patch: PointSet, spec: GlobalDensitySpec) -> GlobalDensityLabel:
    """Quantized class index: min(floor(count / L), M)."""
    level = min(len(patch) // spec.step_size, spec.num_levels)
    return GlobalDensityLabel(level=level)


def density_label_from_count(count: int, spec: GlobalDensitySpec) -> GlobalDensityLabel:
    return GlobalDensityLabel(level=min(int(count) // spec.step_size, spec.num_levels))


# --- serialization ----------------------------------------------------------


def write_density(path, dm: DensityMap) -> None:
    """Binary density format: "FFDM", u32 width, u32 height, f32 row-major."""
    data = dm.values.astype("<f4")
    with open(path, "wb") as f:
        f.write(FFDM_MAGIC)
        f.write(struct.pack("<II", dm.width, dm.height))
        f.write(data.tobytes())


def read_density(path) -> DensityMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FFDM_MAGIC:
            raise ValueError(f"not a density file (magic {magic!r})")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    return DensityMap(values=data.astype(np.float64))


def density_to_png(path, dm: DensityMap) -> None:
    """Lossy 8-bit grayscale visualization, map max scaled to 255."""
    v = dm.values
    peak = v.max()
    img = np.zeros_like(v) if peak <= 0 else v / peak * 255.0
    Image.fromarray(img.astype(np.uint8), mode="L").save(path)


def segmentation_to_png(path, sm: SegmentationMap) -> None:
    Image.fromarray(sm.values * 255, mode="L").save(path)


def segmentation_from_png(path) -> SegmentationMap:
    v = np.asarray(Image.open(path).convert("L"))
    return SegmentationMap(values=(v > 127).astype(np.uint8))
