"""End-to-end helpers shared by the CLI: masking, estimation and batch evaluation."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, ModelConfigMismatch
from .field import BLOCK_SIZE, DistortionField, grid_mask, largest_component, rectify
from .metrics import DEFAULT_EDGES, MIN_NORM, SampleReport, bin_by_distortion, proxy_match_score, reg_error_root, wrong_vector_mask
from .network import DistortionNet, forward
from .pca import PcaModel, pca_oracle_rectify, truncate
from .synth import TrainingSample

SOBEL_THRESHOLD = 0.08
CLOSE_RADIUS = 2


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def auto_mask(image: np.ndarray, threshold: float = SOBEL_THRESHOLD, close_radius: int = CLOSE_RADIUS) -> np.ndarray:
    """Segment the finger: Sobel magnitude above ``threshold``, largest component, closing."""
    image = np.asarray(image, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(image, axis=1, mode="nearest"), ndimage.sobel(image, axis=0, mode="nearest"))
    fg = mag > threshold
    if not fg.any():
        raise EmptyMask("no pixel exceeds the gradient threshold")
    fg = largest_component(fg)
    fg = ndimage.binary_closing(np.pad(fg, close_radius), structure=_disk(close_radius))[
        close_radius:-close_radius, close_radius:-close_radius
    ]
    return largest_component(ndimage.binary_fill_holes(fg))


def estimate_field(net: DistortionNet, image: np.ndarray, mask: np.ndarray) -> DistortionField:
    """Run the network, reflect-padding the image up to a multiple of 16 when needed."""
    h, w = image.shape
    ph, pw = -h % BLOCK_SIZE, -w % BLOCK_SIZE
    side = net.config.input_size
    if (h + ph, w + pw) != (side, side):
        raise ModelConfigMismatch(f"model expects {side}x{side} images, got {w}x{h}")
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="reflect")
        mask = np.pad(mask, ((0, ph), (0, pw)), mode="constant")
    if not np.any(mask):
        raise EmptyMask("empty fingerprint mask")
    return forward(net, image, mask)


def evaluate_samples(
    net: DistortionNet,
    samples: list[TrainingSample],
    pca_model: PcaModel | None = None,
    k: int = 8,
    edges=DEFAULT_EDGES,
    erode_blocks: int = 3,
    min_norm: float = MIN_NORM,
):
    """Score the network (and optionally the PCA projection oracle) on each sample.

    Returns ``(reports, extra_bins, problems)``; ``problems`` lists seeds whose
    mask or overlap was empty.
    """
    reports, problems = [], []
    extra = {"zero": []}
    if pca_model is not None:
        extra[f"pca_k{k}"] = []
        pca_k = truncate(pca_model, k)
    for s in samples:
        gm = grid_mask(s.mask, s.gt.block_size)
        if not gm.any():
            problems.append(s.seed)
            continue
        est = estimate_field(net, s.distorted, s.mask)
        rectified, rect_mask = rectify(s.distorted, s.mask, est)
        before, empty_b = proxy_match_score(s.distorted, s.normal, s.mask, s.normal_mask, erode_blocks)
        after, empty_a = proxy_match_score(rectified, s.normal, rect_mask, s.normal_mask, erode_blocks)
        if empty_a or empty_b:
            problems.append(s.seed)
        reports.append(
            SampleReport(
                seed=s.seed,
                reg_error_root=reg_error_root(est, s.gt, gm),
                bins=bin_by_distortion(est, s.gt, gm, edges),
                wrong_fraction=wrong_vector_mask(est, s.gt, gm, min_norm=min_norm)[1],
                ncc_before=before,
                ncc_after=after,
                empty_overlap=empty_a or empty_b,
            )
        )
        extra["zero"].append(bin_by_distortion(DistortionField.zeros(s.gt.grid_w, s.gt.grid_h), s.gt, gm, edges))
        if pca_model is not None:
            extra[f"pca_k{k}"].append(bin_by_distortion(pca_oracle_rectify(pca_k, s.gt), s.gt, gm, edges))
    return reports, extra, problems
