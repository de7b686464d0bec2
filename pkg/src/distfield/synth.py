"""Synthetic fingerprints, parametric distortions and training pairs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from . import io
from .errors import NonSquareInput
from .field import (
    BLOCK_SIZE,
    DistortionField,
    MinutiaSet,
    block_centers,
    grid_shape,
    largest_component,
    remove_dc,
    sparse_field,
    tps_eval_dense,
    tps_eval_pixels,
    tps_fit,
    warp_image,
)

PUSH_DIRECTIONS = {
    "push-up": (0.0, -1.0),
    "push-down": (0.0, 1.0),
    "push-left": (-1.0, 0.0),
    "push-right": (1.0, 0.0),
    "push-up-left": (-np.sqrt(0.5), -np.sqrt(0.5)),
    "push-up-right": (np.sqrt(0.5), -np.sqrt(0.5)),
    "push-down-left": (-np.sqrt(0.5), np.sqrt(0.5)),
    "push-down-right": (np.sqrt(0.5), np.sqrt(0.5)),
}
KINDS = tuple(PUSH_DIRECTIONS) + ("torque-cw", "torque-ccw")

MAGNITUDE_RANGE = (5.0, 30.0)
FALLOFF_RANGE = (0.18, 0.35)
MAX_STRAIN = 0.5


@dataclass(frozen=True)
class DistortionPrototype:
    """One parametric distortion; the displacement direction is named by ``kind``.

    Torque kinds rotate about ``center`` (clockwise as displayed, y pointing
    down, for ``torque-cw``).
    """

    kind: str
    magnitude: float
    center: tuple[float, float]
    falloff: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if self.falloff <= 0:
            raise ValueError("falloff must be > 0")

    def displacement(self, points: np.ndarray) -> np.ndarray:
        """Closed-form displacement at ``points`` (n, 2), before DC removal."""
        r = np.asarray(points, dtype=np.float64).reshape(-1, 2) - np.asarray(self.center)
        weight = self.magnitude * np.exp(-np.einsum("ij,ij->i", r, r) / self.falloff**2)
        if self.kind in PUSH_DIRECTIONS:
            return weight[:, None] * np.asarray(PUSH_DIRECTIONS[self.kind])
        # tangential component scaled by falloff so the field stays smooth at the center
        sign = 1.0 if self.kind == "torque-cw" else -1.0
        tangent = sign * np.stack([-r[:, 1], r[:, 0]], axis=1) / self.falloff
        return weight[:, None] * tangent


@dataclass(frozen=True)
class TrainingSample:
    distorted: np.ndarray
    mask: np.ndarray
    gt: DistortionField
    normal: np.ndarray
    normal_mask: np.ndarray
    minutiae_normal: MinutiaSet
    minutiae_distorted: MinutiaSet
    seed: int = -1
    prototype: DistortionPrototype | None = None


# --- fingerprint rendering -------------------------------------------------


def _gabor_kernel(theta: float, freq: float, sigma: float) -> np.ndarray:
    half = int(np.ceil(3 * sigma))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    # ridges run along theta; the carrier varies along the ridge normal
    normal = -x * np.sin(theta) + y * np.cos(theta)
    k = np.exp(-(x**2 + y**2) / (2 * sigma**2)) * np.cos(2 * np.pi * freq * normal)
    return k - k.mean()


def _orientation_field(rng: np.random.Generator, width: int, height: int, mask_center) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xx - mask_center[0]) / width
    v = (yy - mask_center[1]) / height
    c = rng.normal(0.0, 1.0, size=6) * np.array([np.pi, 1.0, 1.0, 0.8, 0.8, 0.8])
    theta = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v
    n_singular = int(rng.integers(0, 3))
    for k in range(n_singular):
        sx = mask_center[0] + rng.uniform(-0.2, 0.2) * width
        sy = mask_center[1] + rng.uniform(-0.25, 0.25) * height
        sign = 1.0 if k == 0 else -1.0  # core, then delta
        theta = theta + sign * 0.5 * np.arctan2(yy - sy, xx - sx)
    return np.mod(theta, np.pi)


def _render_ridges(rng, theta: np.ndarray, freq: float, n_orient: int = 16, iterations: int = 6) -> np.ndarray:
    sigma = 0.45 / freq
    angles = np.arange(n_orient) * np.pi / n_orient
    kernels = [_gabor_kernel(a, freq, sigma) for a in angles]
    pos = theta / (np.pi / n_orient)
    lo = np.floor(pos).astype(np.int64) % n_orient
    hi = (lo + 1) % n_orient
    frac = pos - np.floor(pos)
    img = rng.standard_normal(theta.shape)
    for _ in range(iterations):
        responses = np.stack([signal.fftconvolve(img, k, mode="same") for k in kernels])
        rows, cols = np.indices(theta.shape)
        resp = (1 - frac) * responses[lo, rows, cols] + frac * responses[hi, rows, cols]
        img = np.sign(resp)
    return ndimage.gaussian_filter(img, 1.0)


def _elliptic_mask(rng, width: int, height: int) -> np.ndarray:
    cx = width * (0.5 + rng.uniform(-0.04, 0.04))
    cy = height * (0.5 + rng.uniform(-0.04, 0.04))
    a = width * rng.uniform(0.34, 0.44)
    b = height * rng.uniform(0.40, 0.48)
    phi = rng.uniform(-0.3, 0.3)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(phi) + dy * np.sin(phi)) / a
    v = (-dx * np.sin(phi) + dy * np.cos(phi)) / b
    ang = np.arctan2(v, u)
    wobble = 1.0 + sum(rng.uniform(-0.03, 0.03) * np.cos(k * ang + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4))
    return largest_component(np.hypot(u, v) <= wobble)


def _sample_minutiae(rng, mask: np.ndarray, count: int, margin: float, min_sep: float) -> MinutiaSet:
    inner = ndimage.distance_transform_edt(mask) > margin
    ys, xs = np.nonzero(inner)
    points: list[tuple[float, float]] = []
    for _ in range(50 * count):
        if len(points) == count:
            break
        i = rng.integers(len(xs))
        p = (xs[i] + rng.uniform(-0.5, 0.5), ys[i] + rng.uniform(-0.5, 0.5))
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_sep**2 for q in points):
            points.append(p)
    return MinutiaSet(np.array(points).reshape(-1, 2))


def synth_fingerprint(seed: int, width: int, height: int, block_size: int = BLOCK_SIZE):
    """Render a deterministic synthetic fingerprint.

    Returns ``(image, mask, minutiae)`` with the image in [0, 1] (ridges dark,
    background white), an ellipse-like single-component mask, and 20-60
    landmark points inside the mask eroded by one block.
    """
    if width < 64 or height < 64:
        raise ValueError("fingerprint must be at least 64x64")
    rng = np.random.default_rng(seed)
    mask = _elliptic_mask(rng, width, height)
    ys, xs = np.nonzero(mask)
    theta = _orientation_field(rng, width, height, (xs.mean(), ys.mean()))
    freq = rng.uniform(1 / 11.5, 1 / 8.5)
    ridges = _render_ridges(rng, theta, freq)
    ridges = ridges / max(np.abs(ridges[mask]).max(), 1e-12)
    image = np.where(mask, 0.5 + 0.5 * ridges, 1.0)
    count = int(rng.integers(20, 61))
    minutiae = _sample_minutiae(rng, mask, count, margin=block_size, min_sep=6.0)
    return np.clip(image, 0.0, 1.0), mask, minutiae


# --- distortions -----------------------------------------------------------


def synth_distortion(
    proto: DistortionPrototype,
    grid_w: int,
    grid_h: int,
    block_size: int = BLOCK_SIZE,
    mask: np.ndarray | None = None,
) -> DistortionField:
    """Evaluate a prototype at the block centers and remove its DC component."""
    centers = block_centers(grid_w, grid_h, block_size).reshape(-1, 2)
    raw = DistortionField(proto.displacement(centers).reshape(grid_h, grid_w, 2), block_size)
    if mask is None:
        mask = np.ones((grid_h, grid_w), dtype=bool)
    return remove_dc(raw, mask)


def random_prototype(
    rng: np.random.Generator,
    mask: np.ndarray,
    magnitude_range=MAGNITUDE_RANGE,
    falloff_range=FALLOFF_RANGE,
    max_strain: float = MAX_STRAIN,
) -> DistortionPrototype:
    """Draw a prototype near the mask centroid.

    ``falloff_range`` is relative to the image side; the magnitude is capped so
    the peak displacement gradient stays below ``max_strain`` (no fold-over).
    """
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    size = 0.5 * (w + h)
    center = (float(xs.mean() + rng.uniform(-0.2, 0.2) * w), float(ys.mean() + rng.uniform(-0.2, 0.2) * h))
    kind = KINDS[int(rng.integers(len(KINDS)))]
    falloff = float(rng.uniform(*falloff_range) * size)
    magnitude = float(rng.uniform(*magnitude_range))
    # peak gradient: sqrt(2/e) m / falloff for pushes, m / falloff for torques
    peak = np.sqrt(2 / np.e) if kind in PUSH_DIRECTIONS else 1.0
    magnitude = min(magnitude, max_strain * falloff / peak)
    return DistortionPrototype(kind=kind, magnitude=magnitude, center=center, falloff=falloff)


def dense_field(field: DistortionField, width: int, height: int) -> np.ndarray:
    """Per-pixel thin-plate interpolation of a grid field."""
    if not np.any(field.vectors):
        return np.zeros((height, width, 2))
    coeffs = tps_fit(field.centers().reshape(-1, 2), field.vectors.reshape(-1, 2))
    return tps_eval_pixels(coeffs, width, height)


def ground_truth_field(
    normal: MinutiaSet,
    distorted: MinutiaSet,
    mask: np.ndarray,
    block_size: int = BLOCK_SIZE,
) -> DistortionField:
    """Rigid-aligned minutia displacements, densified by TPS, with DC removed."""
    h, w = mask.shape
    gw, gh = grid_shape(w, h, block_size)
    anchors, disp = sparse_field(normal, distorted, mask)
    dense = tps_eval_dense(tps_fit(anchors, disp), gw, gh, block_size)
    return remove_dc(dense, mask)


def _pull_points(points: np.ndarray, coeffs, iterations: int = 50) -> np.ndarray:
    """Solve p + g(p) = target for each target point by fixed-point iteration."""
    p = points.copy()
    for _ in range(iterations):
        nxt = points - coeffs.evaluate(p)
        if np.max(np.abs(nxt - p)) < 1e-10:
            return nxt
        p = nxt
    return p


def make_pair(
    normal: np.ndarray,
    mask: np.ndarray,
    minutiae: MinutiaSet,
    field: DistortionField,
    seed: int = -1,
    prototype: DistortionPrototype | None = None,
) -> TrainingSample:
    """Distort a normal fingerprint by ``field`` and rebuild its ground truth from minutiae."""
    h, w = normal.shape
    if mask.shape != normal.shape:
        raise ValueError("image and mask differ in size")
    if np.any(field.vectors):
        coeffs = tps_fit(field.centers().reshape(-1, 2), field.vectors.reshape(-1, 2))
        dense = tps_eval_pixels(coeffs, w, h)
        distorted_pts = _pull_points(minutiae.points, coeffs)
    else:
        dense = np.zeros((h, w, 2))
        distorted_pts = minutiae.points.copy()
    distorted, mask_d = warp_image(normal, mask, dense)
    distorted = np.where(mask_d, distorted, 1.0)
    min_d = MinutiaSet(distorted_pts, minutiae.ids)
    gt = ground_truth_field(minutiae, min_d, mask_d, field.block_size)
    return TrainingSample(distorted, mask_d, gt, normal, np.asarray(mask, dtype=bool), minutiae, min_d, seed, prototype)


def generate_sample(
    seed: int,
    size: int,
    block_size: int = BLOCK_SIZE,
    magnitude_range=MAGNITUDE_RANGE,
    kinds: tuple[str, ...] | None = None,
) -> TrainingSample:
    """Fingerprint plus a random prototype distortion, fully determined by ``seed``."""
    image, mask, minutiae = synth_fingerprint(seed, size, size, block_size)
    rng = np.random.default_rng([seed, 7919])
    proto = random_prototype(rng, mask, magnitude_range)
    if kinds is not None:
        proto = replace(proto, kind=kinds[seed % len(kinds)])
    gw, gh = grid_shape(size, size, block_size)
    field = synth_distortion(proto, gw, gh, block_size, mask=mask)
    return make_pair(image, mask, minutiae, field, seed, proto)


# --- augmentation ----------------------------------------------------------

GROUP = tuple((flip, k) for flip in (False, True) for k in range(4))


def transform_raster(a: np.ndarray, flip: bool, k: int) -> np.ndarray:
    if flip:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, k, axes=(0, 1)))


def inverse_transform_raster(a: np.ndarray, flip: bool, k: int) -> np.ndarray:
    a = np.rot90(a, -k, axes=(0, 1))
    if flip:
        a = a[:, ::-1]
    return np.ascontiguousarray(a)


def _rot_vectors(v: np.ndarray, k: int) -> np.ndarray:
    # np.rot90 maps pixel (x, y) to (y, W - 1 - x), so vectors go (vx, vy) -> (vy, -vx)
    for _ in range(k % 4):
        v = np.stack([v[..., 1], -v[..., 0]], axis=-1)
    return v


def _flip_vectors(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 0], v[..., 1]], axis=-1)


def transform_field(field: DistortionField, flip: bool, k: int) -> DistortionField:
    v = transform_raster(field.vectors, flip, k)
    if flip:
        v = _flip_vectors(v)
    return DistortionField(_rot_vectors(v, k), field.block_size)


def inverse_transform_field(field: DistortionField, flip: bool, k: int) -> DistortionField:
    v = _rot_vectors(field.vectors, -k % 4)
    if flip:
        v = _flip_vectors(v)
    return DistortionField(inverse_transform_raster(v, flip, k), field.block_size)


def transform_points(points: np.ndarray, size: int, flip: bool, k: int) -> np.ndarray:
    p = np.array(points, dtype=np.float64).reshape(-1, 2)
    if flip:
        p[:, 0] = size - 1 - p[:, 0]
    for _ in range(k % 4):
        p = np.column_stack([p[:, 1], size - 1 - p[:, 0]])
    return p


def transform_sample(sample: TrainingSample, flip: bool, k: int) -> TrainingSample:
    h, w = sample.distorted.shape
    if h != w:
        raise NonSquareInput(f"augmentation needs square rasters, got {w}x{h}")
    return TrainingSample(
        distorted=transform_raster(sample.distorted, flip, k),
        mask=transform_raster(sample.mask, flip, k),
        gt=transform_field(sample.gt, flip, k),
        normal=transform_raster(sample.normal, flip, k),
        normal_mask=transform_raster(sample.normal_mask, flip, k),
        minutiae_normal=MinutiaSet(transform_points(sample.minutiae_normal.points, w, flip, k), sample.minutiae_normal.ids),
        minutiae_distorted=MinutiaSet(transform_points(sample.minutiae_distorted.points, w, flip, k), sample.minutiae_distorted.ids),
        seed=sample.seed,
        prototype=sample.prototype,
    )


def augment(sample: TrainingSample) -> list[TrainingSample]:
    """The eight flip/rotation variants; the first is the input itself."""
    return [transform_sample(sample, flip, k) for flip, k in GROUP]


# --- dataset archive -------------------------------------------------------

MANIFEST_HEADER = ["seed", "kind", "magnitude", "falloff", "center_x", "center_y"]


def sample_dir(root, seed: int) -> Path:
    return Path(root) / f"sample_{seed:05}"


def write_sample(root, sample: TrainingSample) -> Path:
    d = sample_dir(root, sample.seed)
    d.mkdir(parents=True, exist_ok=True)
    io.write_image(d / "normal.png", sample.normal)
    io.write_image(d / "distorted.png", sample.distorted)
    io.write_mask(d / "mask.png", sample.mask)
    io.write_mask(d / "normal_mask.png", sample.normal_mask)
    io.write_dfld(d / "gt.dfld", sample.gt)
    io.write_minutiae(d / "minutiae_normal.csv", sample.minutiae_normal)
    io.write_minutiae(d / "minutiae_distorted.csv", sample.minutiae_distorted)
    return d


def write_dataset(out, seeds, size: int, block_size: int = BLOCK_SIZE, magnitude_range=MAGNITUDE_RANGE) -> list[TrainingSample]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for seed in seeds:
            s = generate_sample(seed, size, block_size, magnitude_range)
            write_sample(out, s)
            p = s.prototype
            writer.writerow([seed, p.kind, *(repr(float(v)) for v in (p.magnitude, p.falloff, *p.center))])
            samples.append(s)
    return samples


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def load_sample(root, seed: int) -> TrainingSample:
    d = sample_dir(root, seed)
    normal_mask_path = d / "normal_mask.png"
    mask = io.read_mask(d / "mask.png")
    return TrainingSample(
        distorted=io.read_image(d / "distorted.png"),
        mask=mask,
        gt=io.read_dfld(d / "gt.dfld"),
        normal=io.read_image(d / "normal.png"),
        normal_mask=io.read_mask(normal_mask_path) if normal_mask_path.exists() else mask,
        minutiae_normal=io.read_minutiae(d / "minutiae_normal.csv"),
        minutiae_distorted=io.read_minutiae(d / "minutiae_distorted.csv"),
        seed=seed,
    )


def load_dataset(root) -> list[TrainingSample]:
    rows = read_manifest(root)
    samples = []
    for row in rows:
        s = load_sample(root, int(row["seed"]))
        proto = DistortionPrototype(
            row["kind"], float(row["magnitude"]), (float(row["center_x"]), float(row["center_y"])), float(row["falloff"])
        )
        samples.append(replace(s, prototype=proto))
    return samples
