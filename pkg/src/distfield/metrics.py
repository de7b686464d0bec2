"""Evaluation: root regression error, distortion binning, wrong vectors, proxy matching."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadEdges, DimensionMismatch, EmptyMask
from .field import BLOCK_SIZE, DistortionField, grid_mask

DEFAULT_EDGES = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, math.inf)
ANGLE_LIMIT_DEG = 45.0
RATIO_LIMIT = 1.2
MIN_NORM = 0.5
MIN_OVERLAP = 100


def _cells(est: DistortionField, gt: DistortionField, mask) -> np.ndarray:
    if est.vectors.shape != gt.vectors.shape:
        raise DimensionMismatch("estimate and ground truth grids differ")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (gt.grid_h, gt.grid_w):
        m = grid_mask(m, gt.block_size)
        if m.shape != (gt.grid_h, gt.grid_w):
            raise DimensionMismatch("mask does not match the field grid")
    if not m.any():
        raise EmptyMask("no in-mask cells")
    return m


def reg_error_root(est: DistortionField, gt: DistortionField, mask) -> float:
    """Mean Euclidean error (px) over in-mask cells."""
    m = _cells(est, gt, mask)
    diff = est.vectors[m] - gt.vectors[m]
    return float(np.hypot(diff[:, 0], diff[:, 1]).mean())


@dataclass
class BinnedErrorReport:
    edges: tuple[float, ...]
    mean_error: list[float | None]
    cell_count: list[int]
    overall: float
    error_sum: list[float] = field(default_factory=list)


def bin_by_distortion(est: DistortionField, gt: DistortionField, mask, edges=DEFAULT_EDGES) -> BinnedErrorReport:
    """Per-bin mean error, cells binned by the magnitude of the ground-truth vector."""
    edges = tuple(float(e) for e in edges)
    if len(edges) != 8 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise BadEdges("expected 8 strictly increasing edges")
    m = _cells(est, gt, mask)
    mag = gt.magnitude()[m]
    diff = est.vectors[m] - gt.vectors[m]
    err = np.hypot(diff[:, 0], diff[:, 1])
    idx = np.clip(np.searchsorted(edges, mag, side="right") - 1, 0, 6)
    counts = np.bincount(idx, minlength=7)
    sums = np.bincount(idx, weights=err, minlength=7)
    means = [float(s / c) if c else None for s, c in zip(sums, counts)]
    return BinnedErrorReport(edges, means, [int(c) for c in counts], float(err.mean()), [float(s) for s in sums])


def wrong_vector_mask(
    est: DistortionField,
    gt: DistortionField,
    mask,
    angle_limit: float = ANGLE_LIMIT_DEG,
    ratio_limit: float = RATIO_LIMIT,
    min_norm: float = MIN_NORM,
) -> tuple[np.ndarray, float]:
    """Flag wrong estimates: angle error above 45 degrees or error/min-norm ratio above 1.2.

    When the shorter vector is below ``min_norm`` the angle test is skipped and
    the ratio uses ``min_norm`` as denominator. Returns the per-cell flags and
    the wrong fraction over in-mask cells.
    """
    m = _cells(est, gt, mask)
    e, g = est.vectors, gt.vectors
    ne = np.hypot(e[..., 0], e[..., 1])
    ng = np.hypot(g[..., 0], g[..., 1])
    ang = np.degrees(np.abs(np.arctan2(e[..., 1], e[..., 0]) - np.arctan2(g[..., 1], g[..., 0])))
    ang = np.where(ang > 180.0, 360.0 - ang, ang)
    small = np.minimum(ne, ng)
    tiny = small < min_norm
    ratio = np.hypot(e[..., 0] - g[..., 0], e[..., 1] - g[..., 1]) / np.maximum(small, min_norm)
    wrong = (ratio > ratio_limit) | (~tiny & (ang > angle_limit))
    return wrong, float(wrong[m].mean())


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return np.asarray(mask, dtype=bool)
    inside = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    return inside > radius


def proxy_match_score(
    a: np.ndarray,
    b: np.ndarray,
    mask_a: np.ndarray,
    mask_b: np.ndarray,
    erode_blocks: int = 3,
    block_size: int = BLOCK_SIZE,
) -> tuple[float, bool]:
    """Normalized cross-correlation over the eroded intersection of both masks.

    Returns ``(score, empty_overlap)``; the score is 0 when fewer than 100
    pixels survive the erosion.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or np.shape(mask_a) != a.shape or np.shape(mask_b) != a.shape:
        raise DimensionMismatch("images and masks must share dimensions")
    region = erode_mask(np.asarray(mask_a, bool) & np.asarray(mask_b, bool), erode_blocks * block_size)
    if region.sum() < MIN_OVERLAP:
        return 0.0, True
    x = a[region] - a[region].mean()
    y = b[region] - b[region].mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return 0.0, False
    return float(np.clip((x * y).sum() / denom, -1.0, 1.0)), False


# --- report emission -------------------------------------------------------


@dataclass
class SampleReport:
    seed: int
    reg_error_root: float
    bins: BinnedErrorReport
    wrong_fraction: float
    ncc_before: float
    ncc_after: float
    empty_overlap: bool = False


SUMMARY_HEADER = (
    ["seed", "reg_error_root"]
    + [f"bin{i}_mean" for i in range(1, 8)]
    + ["wrong_fraction", "ncc_before", "ncc_after", "empty_overlap"]
)
BINS_HEADER = ["method", "bin", "lower", "upper", "cell_count", "mean_error"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def aggregate_bins(bins: list[BinnedErrorReport]) -> tuple[list[int], list[float | None]]:
    counts = [sum(b.cell_count[i] for b in bins) for i in range(7)]
    sums = [sum(b.error_sum[i] for b in bins) for i in range(7)]
    return counts, [s / c if c else None for s, c in zip(sums, counts)]


def emit_report(reports: list[SampleReport], out_dir, extra_bins: dict[str, list[BinnedErrorReport]] | None = None) -> None:
    """Write ``summary.csv`` (one row per sample) and ``bins.csv`` (pooled per method)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in reports:
            w.writerow(
                [_fmt(v) for v in [r.seed, r.reg_error_root, *r.bins.mean_error, r.wrong_fraction, r.ncc_before, r.ncc_after, r.empty_overlap]]
            )
    methods = {"dense": [r.bins for r in reports]}
    methods.update(extra_bins or {})
    edges = reports[0].bins.edges if reports else DEFAULT_EDGES
    with open(out / "bins.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BINS_HEADER)
        if not reports:
            return
        for name, bins in methods.items():
            counts, means = aggregate_bins(bins)
            for i in range(7):
                w.writerow([name, i + 1, _fmt(edges[i]), _fmt(edges[i + 1]), counts[i], _fmt(means[i])])


def read_summary(path) -> list[dict]:
    """Parse ``summary.csv`` back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in ("seed",):
                    row[k] = int(v)
                elif k == "empty_overlap":
                    row[k] = bool(int(v))
                else:
                    row[k] = float(v) if v != "" else None
            rows.append(row)
    return rows
