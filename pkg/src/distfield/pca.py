"""Principal-component model of distortion fields (the low-dimensional baseline)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, GridMismatch, InsufficientSamples, TooManyCoefficients
from .field import DistortionField

DPCA_MAGIC = b"DPCA"
DPCA_VERSION = 1
DEFAULT_K = 8


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows
    variances: np.ndarray  # (k,), non-increasing
    grid_w: int
    grid_h: int
    block_size: int

    @property
    def k(self) -> int:
        return len(self.components)

    def mean_field(self) -> DistortionField:
        return DistortionField(self.mean.reshape(self.grid_h, self.grid_w, 2), self.block_size)


def _canonical_sign(components: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = components.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > tol)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    return out


def _check_grid(model: PcaModel, field: DistortionField) -> None:
    if (field.grid_w, field.grid_h) != (model.grid_w, model.grid_h):
        raise GridMismatch(f"field grid {field.grid_w}x{field.grid_h} vs model {model.grid_w}x{model.grid_h}")


def pca_fit(fields: list[DistortionField], k: int = DEFAULT_K) -> PcaModel:
    """Fit the top-``k`` principal components via the n x n Gram matrix.

    Components with numerically zero variance are dropped, so the model may
    hold fewer than ``k`` rows (never more than ``n - 1``).
    """
    if len(fields) < 2:
        raise InsufficientSamples("PCA needs at least two fields")
    if k < 1:
        raise ValueError("k must be >= 1")
    first = fields[0]
    for f in fields:
        if f.vectors.shape != first.vectors.shape or f.block_size != first.block_size:
            raise GridMismatch("all fields must share one grid")
    x = np.stack([f.vectors.ravel() for f in fields])
    n = len(x)
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(evals[0], 0.0)
    keep = [i for i in range(min(k, n - 1)) if evals[i] > 1e-12 * max(scale, 1e-300) and evals[i] > 0]
    comps = np.array([xc.T @ evecs[:, i] for i in keep]).reshape(len(keep), x.shape[1])
    if len(keep):
        comps /= np.linalg.norm(comps, axis=1, keepdims=True)
        # one Gram-Schmidt sweep cleans up round-off between nearly tied eigenvalues
        q, _ = np.linalg.qr(comps.T)
        signs = np.sign(np.einsum("ij,ji->i", comps, q))
        comps = (q * signs).T
    variances = evals[keep] / (n - 1)
    return PcaModel(mean, _canonical_sign(comps), variances, first.grid_w, first.grid_h, first.block_size)


def pca_project(model: PcaModel, field: DistortionField) -> np.ndarray:
    _check_grid(model, field)
    return model.components @ (field.vectors.ravel() - model.mean)


def pca_reconstruct(model: PcaModel, coeffs) -> DistortionField:
    coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
    if len(coeffs) > model.k:
        raise TooManyCoefficients(f"{len(coeffs)} coefficients for a {model.k}-component model")
    vec = model.mean + coeffs @ model.components[: len(coeffs)]
    return DistortionField(vec.reshape(model.grid_h, model.grid_w, 2), model.block_size)


def truncate(model: PcaModel, k: int) -> PcaModel:
    return PcaModel(model.mean, model.components[:k], model.variances[:k], model.grid_w, model.grid_h, model.block_size)


def pca_oracle_rectify(model: PcaModel, gt: DistortionField) -> DistortionField:
    """Best k-component approximation of ``gt``: reconstruct(project(gt))."""
    return pca_reconstruct(model, pca_project(model, gt))


def explained_variance_ratio(model: PcaModel, fields: list[DistortionField]) -> np.ndarray:
    x = np.stack([f.vectors.ravel() for f in fields])
    total = ((x - x.mean(axis=0)) ** 2).sum() / (len(x) - 1)
    return model.variances / total


def pca_bytes(model: PcaModel) -> bytes:
    head = DPCA_MAGIC + struct.pack("<IIIII", DPCA_VERSION, model.grid_w, model.grid_h, model.block_size, model.k)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (model.mean, model.components, model.variances)
    )
    return head + body


def save_pca(path, model: PcaModel) -> None:
    Path(path).write_bytes(pca_bytes(model))


def load_pca(path) -> PcaModel:
    raw = Path(path).read_bytes()
    if raw[:4] != DPCA_MAGIC:
        raise FormatError(f"{path}: not a DPCA file")
    version, gw, gh, bs, k = struct.unpack_from("<IIIII", raw, 4)
    if version != DPCA_VERSION:
        raise FormatError(f"{path}: unsupported DPCA version {version}")
    d = 2 * gw * gh
    expected = 24 + 4 * (d + k * d + k)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=24).astype(np.float64)
    return PcaModel(data[:d], data[d:d + k * d].reshape(k, d), data[d + k * d:], gw, gh, bs)
