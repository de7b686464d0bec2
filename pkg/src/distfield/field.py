"""Geometric core: rigid alignment, thin-plate splines, DC removal and warping.

Coordinates are (x, y) in pixel-index units, x along columns and y along rows.
A distortion field lives on a coarse grid with one vector per ``block_size``
square block; the vector of block (i, j) sits at ((i + 0.5) * block_size,
(j + 0.5) * block_size) and points FROM the distorted image TOWARD the
rectification target.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    EmptyMask,
    SingularSystem,
)

BLOCK_SIZE = 16

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DistortionField:
    """Displacement vectors on a block grid, shape ``(grid_h, grid_w, 2)``."""

    vectors: np.ndarray
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise DimensionMismatch(f"field must be (h, w, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("distortion field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def grid_w(self) -> int:
        return self.vectors.shape[1]

    @property
    def grid_h(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def zeros(cls, grid_w: int, grid_h: int, block_size: int = BLOCK_SIZE) -> "DistortionField":
        return cls(np.zeros((grid_h, grid_w, 2)), block_size)

    def centers(self) -> np.ndarray:
        return block_centers(self.grid_w, self.grid_h, self.block_size)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])


@dataclass(frozen=True)
class MinutiaSet:
    points: np.ndarray
    ids: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        ids = np.arange(len(pts)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (len(pts),):
            raise DimensionMismatch("ids and points differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("minutia ids must be unique")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.points)

    def matched(self, other: "MinutiaSet") -> tuple[np.ndarray, np.ndarray]:
        """Return point arrays of both sets restricted to shared ids, in id order."""
        common, ia, ib = np.intersect1d(self.ids, other.ids, return_indices=True)
        return self.points[ia], other.points[ib]


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_angle(cls, angle: float, translation=(0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=np.float64))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def block_centers(grid_w: int, grid_h: int, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Block-center coordinates, shape ``(grid_h, grid_w, 2)``."""
    xs = (np.arange(grid_w) + 0.5) * block_size
    ys = (np.arange(grid_h) + 0.5) * block_size
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def grid_shape(width: int, height: int, block_size: int = BLOCK_SIZE) -> tuple[int, int]:
    return -(-width // block_size), -(-height // block_size)


def normalize_image(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance view of ``image`` using statistics over ``mask``."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("cannot normalize over an empty mask")
    vals = image[mask]
    std = vals.std()
    out = image - vals.mean()
    if std > 0:
        out = out / std
    return out


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected component of a boolean raster."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT_CONNECTED)
    if n <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == np.argmax(sizes)


def grid_mask(mask: np.ndarray, block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Downsample a pixel mask: a block is inside when at least half its pixels are."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    gw, gh = grid_shape(w, h, block_size)
    padded = np.zeros((gh * block_size, gw * block_size), dtype=np.float64)
    padded[:h, :w] = mask
    frac = padded.reshape(gh, block_size, gw, block_size).mean(axis=(1, 3))
    return frac >= 0.5


def _as_grid_mask(mask: np.ndarray, field: DistortionField) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (field.grid_h, field.grid_w):
        return mask
    gm = grid_mask(mask, field.block_size)
    if gm.shape != (field.grid_h, field.grid_w):
        raise DimensionMismatch(f"mask grid {gm.shape} does not match field grid {field.vectors.shape[:2]}")
    return gm


# --- rigid alignment -------------------------------------------------------


def fit_rigid(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """Weighted least-squares rigid transform minimising sum w_i |R src_i + t - dst_i|^2."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise DimensionMismatch(f"point sets differ: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(src),):
        raise DimensionMismatch("one weight per point pair is required")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateConfiguration("all weights are zero")

    cs = w @ src / total
    cd = w @ dst / total
    a = src - cs
    b = dst - cd
    spread_src = w @ np.einsum("ij,ij->i", a, a)
    spread_dst = w @ np.einsum("ij,ij->i", b, b)
    if spread_src <= 1e-18 or spread_dst <= 1e-18:
        raise DegenerateConfiguration("weighted points coincide; rotation is undefined")

    dot = w @ (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    cross = w @ (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    rot = RigidTransform.from_angle(np.arctan2(cross, dot))
    return RigidTransform(rot.rotation, cd - rot.rotation @ cs)


def rigid_residual(transform: RigidTransform, src, dst, weights=None) -> float:
    """Weighted sum of squared alignment residuals."""
    diff = transform.apply(src) - np.asarray(dst, dtype=np.float64)
    w = np.ones(len(diff)) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(w @ np.einsum("ij,ij->i", diff, diff))


def mask_weights(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Indicator of the mask evaluated at the nearest pixel of each point (0 when outside)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ij = np.rint(np.asarray(points, dtype=np.float64)).astype(np.int64)
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
    out = np.zeros(len(ij))
    out[inside] = mask[ij[inside, 1], ij[inside, 0]]
    return out


def sparse_field(normal: MinutiaSet, distorted: MinutiaSet, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-DC displacements of paired minutiae, anchored on the distorted image.

    The normal points are rigidly aligned onto the distorted ones using only the
    pairs whose distorted position lies inside ``mask``; the returned
    displacement of pair i is ``(R p_normal_i + t) - p_distorted_i``.
    """
    pn, pd = normal.matched(distorted)
    rigid = fit_rigid(pn, pd, mask_weights(pd, mask))
    return pd, rigid.apply(pn) - pd


# --- thin-plate splines ----------------------------------------------------


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r = 0.5 r^2 log r^2, with U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


@dataclass(frozen=True)
class TpsCoefficients:
    """Two-channel thin-plate spline in coordinates normalised by ``center``/``scale``."""

    anchors: np.ndarray  # normalised anchor coordinates (n, 2)
    weights: np.ndarray  # kernel weights (n, 2)
    affine: np.ndarray  # rows: constant, x, y; columns: channels
    center: np.ndarray
    scale: float

    def evaluate(self, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
        pts = (np.asarray(points, dtype=np.float64).reshape(-1, 2) - self.center) / self.scale
        out = np.empty((len(pts), 2))
        for start in range(0, len(pts), chunk):
            p = pts[start:start + chunk]
            d = p[:, None, :] - self.anchors[None, :, :]
            k = _tps_kernel(np.einsum("ijk,ijk->ij", d, d))
            out[start:start + chunk] = k @ self.weights + self.affine[0] + p @ self.affine[1:]
        return out


def tps_fit(anchors: np.ndarray, values: np.ndarray, regularization: float = 0.0) -> TpsCoefficients:
    """Fit one thin-plate spline per displacement channel.

    With ``regularization == 0`` the spline interpolates ``values`` exactly.
    Collinear or duplicated anchors raise :class:`SingularSystem`.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1, 2)
    if len(anchors) != len(values):
        raise DimensionMismatch("anchors and values differ in length")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    n = len(anchors)
    if n < 3:
        raise SingularSystem("thin-plate spline needs at least 3 anchors")

    center = anchors.mean(axis=0)
    scale = float(np.abs(anchors - center).max()) or 1.0
    a = (anchors - center) / scale

    d = a[:, None, :] - a[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    if np.any(r2[np.triu_indices(n, 1)] < 1e-20):
        raise SingularSystem("duplicated anchors")
    p = np.hstack([np.ones((n, 1)), a])
    if np.linalg.matrix_rank(p, tol=1e-10) < 3:
        raise SingularSystem("collinear anchors")

    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _tps_kernel(r2) + regularization * np.eye(n)
    system[:n, n:] = p
    system[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = values
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("thin-plate system produced non-finite coefficients")
    return TpsCoefficients(a, sol[:n], sol[n:], center, scale)


def tps_eval_dense(coeffs: TpsCoefficients, grid_w: int, grid_h: int, block_size: int = BLOCK_SIZE) -> DistortionField:
    """Evaluate the spline at every block center."""
    centers = block_centers(grid_w, grid_h, block_size).reshape(-1, 2)
    return DistortionField(coeffs.evaluate(centers).reshape(grid_h, grid_w, 2), block_size)


def tps_eval_pixels(coeffs: TpsCoefficients, width: int, height: int) -> np.ndarray:
    """Evaluate the spline at every pixel, shape ``(height, width, 2)``."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return coeffs.evaluate(pts).reshape(height, width, 2)


# --- DC removal ------------------------------------------------------------


def dc_components(field: DistortionField, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Mask-weighted centroid, mean translation and small-angle rotation of ``field``."""
    gm = _as_grid_mask(mask, field)
    if not gm.any():
        raise EmptyMask("field mask is empty")
    pos = field.centers()[gm]
    vec = field.vectors[gm]
    centroid = pos.mean(axis=0)
    translation = vec.mean(axis=0)
    r = pos - centroid
    denom = np.einsum("ij,ij->", r, r)
    omega = 0.0
    if denom > 0:
        omega = float(np.sum(r[:, 0] * vec[:, 1] - r[:, 1] * vec[:, 0]) / denom)
    return centroid, translation, omega


def remove_dc(field: DistortionField, mask: np.ndarray) -> DistortionField:
    """Subtract the best-fit translation and rotation (about the masked centroid).

    ``mask`` may be a pixel mask (downsampled with the half-block rule) or a
    boolean grid matching the field.  The result has zero mask-weighted mean
    displacement and zero mask-weighted moment; the operation is a linear
    projection and therefore idempotent.
    """
    centroid, translation, omega = dc_components(field, mask)
    r = field.centers() - centroid
    rigid = translation + omega * np.stack([-r[..., 1], r[..., 0]], axis=-1)
    return DistortionField(field.vectors - rigid, field.block_size)


# --- dense resampling and warping ------------------------------------------


def _lerp_grid(values: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Bilinear lookup in a (h, w, ...) array at fractional indices, clamped to the border."""
    h, w = values.shape[:2]
    gx = np.clip(gx, 0, w - 1)
    gy = np.clip(gy, 0, h - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    if values.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = values[y0, x0] * (1 - fx) + values[y0, x1] * fx
    bottom = values[y1, x0] * (1 - fx) + values[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def upsample_field(field: DistortionField, out_w: int, out_h: int) -> np.ndarray:
    """Bilinearly interpolate the grid field to a per-pixel ``(out_h, out_w, 2)`` raster.

    Pixels beyond the outermost block centers take the nearest border value.
    """
    bs = field.block_size
    gw, gh = grid_shape(out_w, out_h, bs)
    if abs(gw - field.grid_w) > 1 or abs(gh - field.grid_h) > 1:
        raise DimensionMismatch(f"{out_w}x{out_h} raster is inconsistent with a {field.grid_w}x{field.grid_h} grid")
    xs = (np.arange(out_w) - 0.5 * bs) / bs
    ys = (np.arange(out_h) - 0.5 * bs) / bs
    gx, gy = np.meshgrid(xs, ys)
    return _lerp_grid(field.vectors, gx, gy)


def subsample_dense(dense: np.ndarray, block_size: int = BLOCK_SIZE) -> DistortionField:
    """Read a per-pixel displacement raster back at the block centers."""
    h, w = dense.shape[:2]
    gw, gh = grid_shape(w, h, block_size)
    c = block_centers(gw, gh, block_size).astype(np.int64)
    cx = np.minimum(c[..., 0], w - 1)
    cy = np.minimum(c[..., 1], h - 1)
    return DistortionField(dense[cy, cx], block_size)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``image`` at fractional (x, y); positions outside the raster give ``fill``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    out = _lerp_grid(image, x, y)
    out[~inside] = fill
    return out


def invert_displacement(dense: np.ndarray, iterations: int = 2) -> np.ndarray:
    """Approximate backward displacement u* with u*(q) = u(q - u*(q)) by fixed-point iteration."""
    h, w = dense.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    inv = dense.copy()
    for _ in range(iterations):
        inv = _lerp_grid(dense, xs - inv[..., 0], ys - inv[..., 1])
    return inv


def _pull(image: np.ndarray, mask: np.ndarray, offset: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """out(q) = in(q + offset(q)) for both image and mask."""
    h, w = image.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = xs + offset[..., 0]
    sy = ys + offset[..., 1]
    out = bilinear_sample(image, sx, sy, fill=0.0)
    out_mask = bilinear_sample(np.asarray(mask, dtype=np.float64), sx, sy, fill=0.0) >= 0.5
    if out_mask.any():
        out_mask = largest_component(out_mask)
    return out, out_mask


def warp_image(image: np.ndarray, mask: np.ndarray, dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Create a distorted image from a normal one.

    ``dense`` is a per-pixel field on the distorted image pointing to the normal
    image, so each distorted pixel p reads the normal image at p + dense(p).
    """
    image = np.asarray(image, dtype=np.float64)
    if dense.shape != image.shape + (2,) or np.shape(mask) != image.shape:
        raise DimensionMismatch("image, mask and displacement raster must share dimensions")
    return _pull(image, mask, dense)


def rectify_dense(image: np.ndarray, mask: np.ndarray, dense: np.ndarray, iterations: int = 2) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image, dtype=np.float64)
    if dense.shape != image.shape + (2,) or np.shape(mask) != image.shape:
        raise DimensionMismatch("image, mask and displacement raster must share dimensions")
    if not np.any(dense):
        return image.copy(), np.asarray(mask, dtype=bool).copy()
    return _pull(image, mask, -invert_displacement(dense, iterations))


def rectify(image: np.ndarray, mask: np.ndarray, field: DistortionField, iterations: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Rectify a distorted image by backward warping with its distortion field."""
    image = np.asarray(image, dtype=np.float64)
    if np.shape(mask) != image.shape:
        raise DimensionMismatch("image and mask differ in size")
    h, w = image.shape
    if grid_shape(w, h, field.block_size) != (field.grid_w, field.grid_h):
        raise DimensionMismatch(f"field grid {field.grid_w}x{field.grid_h} does not cover a {w}x{h} image")
    return rectify_dense(image, mask, upsample_field(field, w, h), iterations)
