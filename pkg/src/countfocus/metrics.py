"""Evaluation metrics: MAE, RMSE, NMAE, GAME(L), PSNR, SSIM, and the
scale/crowding stratification of a test set by its box annotations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .errors import MissingBoxes, NoData, ShapeMismatch, UndefinedPeak
from .geometry import PointSet
from .supervision import DensityMap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def count_errors(truth, pred) -> tuple[float, float, float]:
    """(MAE, RMSE, NMAE) over parallel count lists.

    NMAE normalizes each absolute error by the true count and skips images
    with a true count of zero.
    """
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeMismatch(f"count lists differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise NoData("count_errors needs at least one image")
    err = np.abs(p - t)
    mae = float(err.mean())
    rmse = float(np.sqrt((err**2).mean()))
    positive = t > 0
    nmae = float((err[positive] / t[positive]).mean()) if positive.any() else 0.0
    return mae, rmse, nmae


def _grid_edges(size: int, cells: int):
    """Cell boundaries; the last cell absorbs remainder pixels."""
    base = size // cells
    starts = [i * base for i in range(cells)]
    ends = starts[1:] + [size]
    return list(zip(starts, ends))


def game(truth_map: DensityMap, pred_map: DensityMap, L: int) -> float:
    """Per-image GAME contribution: sum of |cell count difference| over a
    2^L x 2^L non-overlapping grid."""
    if truth_map.values.shape != pred_map.values.shape:
        raise ShapeMismatch(
            f"map shapes differ: {truth_map.values.shape} vs {pred_map.values.shape}"
        )
    if not 0 <= L <= 4:
        raise ValueError("GAME level must be in [0, 4]")
    cells = 2**L
    total = 0.0
    for y0, y1 in _grid_edges(truth_map.height, cells):
        for x0, x1 in _grid_edges(truth_map.width, cells):
            t = truth_map.values[y0:y1, x0:x1].sum()
            p = pred_map.values[y0:y1, x0:x1].sum()
            total += abs(t - p)
    return float(total)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def psnr_ssim(truth_map: DensityMap, pred_map: DensityMap) -> tuple[float, float]:
    """PSNR (dB) and SSIM after scaling both maps by 1 / max(truth).

    Identical maps yield PSNR +inf.  SSIM uses the standard 11x11 Gaussian
    window with sigma 1.5 and stabilizers C1 = 0.01^2, C2 = 0.03^2.
    """
    if truth_map.values.shape != pred_map.values.shape:
        raise ShapeMismatch(
            f"map shapes differ: {truth_map.values.shape} vs {pred_map.values.shape}"
        )
    peak = truth_map.values.max()
    if peak <= 0:
        raise UndefinedPeak("all-zero ground-truth map has no peak to normalize by")
    t = truth_map.values / peak
    p = pred_map.values / peak

    mse = float(((t - p) ** 2).mean())
    psnr = float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)

    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_t = correlate(t, window, mode="reflect")
    mu_p = correlate(p, window, mode="reflect")
    var_t = correlate(t * t, window, mode="reflect") - mu_t**2
    var_p = correlate(p * p, window, mode="reflect") - mu_p**2
    cov = correlate(t * p, window, mode="reflect") - mu_t * mu_p
    ssim_map = ((2 * mu_t * mu_p + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_t**2 + mu_p**2 + SSIM_C1) * (var_t + var_p + SSIM_C2)
    )
    return psnr, float(ssim_map.mean())


@dataclass(frozen=True)
class StratumIndex:
    image_id: str
    index: float
    stratum: str


def stratify(annotations, mode: str) -> list[StratumIndex]:
    """Split images into three equal-size (+-1) strata by a sorted index.

    ``annotations`` is a list of (image_id, PointSet with boxes).  For
    ``scale`` the index is mean box area / point count; for ``crowding`` it is
    (mean box area / image pixels) * (point count / image pixels).  Ties break
    deterministically on image id.
    """
    if mode not in ("scale", "crowding"):
        raise ValueError(f"unknown stratification mode {mode!r}")
    if not annotations:
        raise NoData("stratify needs at least one image")
    entries = []
    for image_id, ps in annotations:
        if ps.boxes is None:
            raise MissingBoxes(f"image {image_id!r} has no boxes")
        n = max(len(ps), 1)
        mean_area = float(np.mean([w * h for _, _, w, h in ps.boxes])) if ps.boxes else 0.0
        pixels = ps.image_width * ps.image_height
        if mode == "scale":
            index = mean_area / n
        else:
            index = (mean_area / pixels) * (n / pixels)
        entries.append((index, str(image_id)))
    order = sorted(range(len(entries)), key=lambda i: entries[i])
    names = {"scale": ("small", "medium", "large"), "crowding": ("sparse", "medium", "dense")}[mode]
    groups = np.array_split(np.asarray(order), 3)
    result = [None] * len(entries)
    for gi, group in enumerate(groups):
        for i in group:
            index, image_id = entries[i]
            result[i] = StratumIndex(image_id=image_id, index=index, stratum=names[gi])
    return result


@dataclass
class MetricReport:
    """Per-image rows plus dataset aggregates."""

    per_image: list = field(default_factory=list)  # dicts: image, truth, pred, abs_err, game{L}
    aggregate: dict = field(default_factory=dict)


def evaluate_maps(pairs, game_max: int = 4) -> MetricReport:
    """Full metric sweep over (image_id, truth DensityMap, pred DensityMap)."""
    pairs = list(pairs)
    if not pairs:
        raise NoData("evaluate_maps needs at least one image pair")
    rows = []
    psnrs, ssims = [], []
    for image_id, truth, pred in pairs:
        row = {
            "image": image_id,
            "truth": truth.count(),
            "pred": pred.count(),
        }
        row["abs_err"] = abs(row["pred"] - row["truth"])
        for L in range(game_max + 1):
            row[f"game{L}"] = game(truth, pred, L)
        if truth.values.max() > 0:
            psnr, ssim = psnr_ssim(truth, pred)
            psnrs.append(psnr)
            ssims.append(ssim)
        rows.append(row)
    mae, rmse, nmae = count_errors([r["truth"] for r in rows], [r["pred"] for r in rows])
    aggregate = {"MAE": mae, "RMSE": rmse, "NMAE": nmae}
    for L in range(game_max + 1):
        aggregate[f"GAME{L}"] = float(np.mean([r[f"game{L}"] for r in rows]))
    if psnrs:
        aggregate["PSNR"] = float(np.mean(psnrs))
        aggregate["SSIM"] = float(np.mean(ssims))
    return MetricReport(per_image=rows, aggregate=aggregate)
