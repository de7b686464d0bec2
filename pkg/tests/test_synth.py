import filecmp

import numpy as np
import pytest

from distfield.errors import NonSquareInput
from distfield.field import (
    DistortionField,
    MinutiaSet,
    RigidTransform,
    block_centers,
    grid_mask,
    remove_dc,
)
from distfield.metrics import erode_mask
from distfield.network import field_losses
from distfield.synth import (
    GROUP,
    KINDS,
    DistortionPrototype,
    augment,
    generate_sample,
    ground_truth_field,
    inverse_transform_field,
    inverse_transform_raster,
    make_pair,
    synth_distortion,
    synth_fingerprint,
    transform_field,
    transform_raster,
    write_dataset,
)


@pytest.fixture(scope="module")
def print128():
    return synth_fingerprint(0, 128, 128)


def test_fingerprint_is_deterministic():
    a = synth_fingerprint(7, 96, 96)
    b = synth_fingerprint(7, 96, 96)
    assert a[0].tobytes() == b[0].tobytes()
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2].points, b[2].points)


def test_fingerprint_basic_contract(print128):
    img, mask, minutiae = print128
    assert img.shape == mask.shape == (128, 128)
    assert 0.0 <= img.min() and img.max() <= 1.0
    assert 20 <= len(minutiae) <= 60
    inner = erode_mask(mask, 16)
    idx = np.rint(minutiae.points).astype(int)
    assert inner[idx[:, 1], idx[:, 0]].all()


def test_fingerprint_too_small():
    with pytest.raises(ValueError):
        synth_fingerprint(0, 32, 128)


@pytest.fixture(scope="module")
def print512():
    return synth_fingerprint(1, 512, 512)


def test_mask_area_regression_value(print512):
    _, mask, _ = print512
    # measured once from the generator and frozen
    assert int(mask.sum()) == 138667
    assert 0.25 <= mask.mean() <= 0.75


def test_ridge_period_by_fft_peak(print512):
    img, mask, _ = print512
    power = np.abs(np.fft.fftshift(np.fft.fft2((img - img[mask].mean()) * mask)))
    y, x = np.mgrid[-256:256, -256:256]
    r = np.hypot(x, y)
    power[r < 20] = 0
    peak = np.unravel_index(np.argmax(power), power.shape)
    assert 8.0 <= 512 / r[peak] <= 12.0


# --- prototypes ------------------------------------------------------------


def test_zero_magnitude_prototype_gives_zero_field():
    p = DistortionPrototype("push-left", 0.0, (64.0, 64.0), 40.0)
    assert np.abs(synth_distortion(p, 8, 8).vectors).max() == 0.0


def test_push_centered_on_mask_has_zero_mean_after_dc(print128):
    _, mask, _ = print128
    ys, xs = np.nonzero(mask)
    p = DistortionPrototype("push-right", 12.0, (xs.mean(), ys.mean()), 40.0)
    f = synth_distortion(p, 8, 8, mask=mask)
    gm = grid_mask(mask)
    assert np.linalg.norm(f.vectors[gm].mean(axis=0)) <= 1e-9


def test_torque_peak_regression_value():
    p = DistortionPrototype("torque-cw", 20.0, (256.0, 256.0), 100.0)
    f = synth_distortion(p, 32, 32)
    # independent closed form: m exp(-r^2/s^2) rot90(r)/s, then remove_dc over all cells
    c = block_centers(32, 32)
    r = c - [256.0, 256.0]
    g = np.exp(-(r**2).sum(-1) / 100.0**2)[..., None]
    closed = 20.0 * g * np.stack([-r[..., 1], r[..., 0]], -1) / 100.0
    expected = remove_dc(DistortionField(closed), np.ones((32, 32), bool))
    np.testing.assert_allclose(f.vectors, expected.vectors, atol=1e-12)
    peak = np.hypot(f.vectors[..., 0], f.vectors[..., 1]).max()
    # before DC removal the peak is m e^{-1/2} / sqrt(2) at r = s / sqrt(2)
    assert peak < 20.0 * np.exp(-0.5) / np.sqrt(2.0)
    assert peak == pytest.approx(8.195277332827285, abs=1e-9)


@pytest.mark.parametrize("kind", KINDS)
def test_prototype_gradient_bounded(kind):
    p = DistortionPrototype(kind, 15.0, (60.0, 70.0), 35.0)
    y, x = np.mgrid[0:128, 0:128].astype(float)
    u = p.displacement(np.column_stack([x.ravel(), y.ravel()])).reshape(128, 128, 2)
    gx = np.diff(u, axis=1)
    gy = np.diff(u, axis=0)
    assert np.abs(gx).max() <= 15.0 / 35.0 + 1e-9
    assert np.abs(gy).max() <= 15.0 / 35.0 + 1e-9


def test_torque_directions_are_opposite():
    pts = np.array([[80.0, 64.0]])
    cw = DistortionPrototype("torque-cw", 5.0, (64.0, 64.0), 30.0).displacement(pts)
    ccw = DistortionPrototype("torque-ccw", 5.0, (64.0, 64.0), 30.0).displacement(pts)
    np.testing.assert_allclose(cw, -ccw)
    # right of the center, clockwise on screen (y down) moves downward
    assert cw[0, 1] > 0


def test_prototype_validation():
    with pytest.raises(ValueError):
        DistortionPrototype("spin", 1.0, (0.0, 0.0), 1.0)
    with pytest.raises(ValueError):
        DistortionPrototype("push-up", -1.0, (0.0, 0.0), 1.0)
    with pytest.raises(ValueError):
        DistortionPrototype("push-up", 1.0, (0.0, 0.0), 0.0)


# --- pairs -----------------------------------------------------------------


def test_make_pair_zero_field(print128):
    img, mask, minutiae = print128
    s = make_pair(img, mask, minutiae, DistortionField.zeros(8, 8))
    np.testing.assert_array_equal(s.distorted, img)
    np.testing.assert_array_equal(s.mask, mask)
    assert np.abs(s.gt.vectors).max() <= 0.5


def test_rigid_minutiae_motion_gives_zero_ground_truth(print128):
    _, mask, minutiae = print128
    g = RigidTransform.from_angle(np.radians(7.0), (4.0, -2.0))
    moved = MinutiaSet(g.apply(minutiae.points), minutiae.ids)
    gt = ground_truth_field(minutiae, moved, np.ones_like(mask))
    assert np.abs(gt.vectors).max() <= 1e-6


def test_ground_truth_tracks_generating_field():
    img, mask, minutiae = synth_fingerprint(2, 256, 256)
    assert len(minutiae) >= 30
    ys, xs = np.nonzero(mask)
    p = DistortionPrototype("push-up-right", 15.0, (xs.mean() + 10, ys.mean() - 5), 80.0)
    field = synth_distortion(p, 16, 16, mask=mask)
    s = make_pair(img, mask, minutiae, field)
    inner = grid_mask(erode_mask(s.mask, 16))
    reference = remove_dc(field, s.mask)
    err = np.hypot(*(s.gt.vectors[inner] - reference.vectors[inner]).T)
    assert err.mean() <= 2.0


def test_generated_sample_ground_truth_has_no_dc():
    s = generate_sample(4, 128)
    gm = grid_mask(s.mask)
    v = s.gt.vectors[gm]
    pos = s.gt.centers()[gm]
    r = pos - pos.mean(axis=0)
    assert np.linalg.norm(v.mean(axis=0)) <= 1e-6
    assert abs(np.mean(r[:, 0] * v[:, 1] - r[:, 1] * v[:, 0])) <= 1e-6
    assert s.mask.any() and s.distorted.shape == s.mask.shape == s.normal.shape


# --- augmentation ----------------------------------------------------------


@pytest.fixture(scope="module")
def sample():
    return generate_sample(3, 128)


def test_augment_identity_first(sample):
    out = augment(sample)
    assert len(out) == 8
    assert out[0].distorted.tobytes() == sample.distorted.tobytes()
    assert out[0].gt.vectors.tobytes() == sample.gt.vectors.tobytes()


def test_rotation_180_is_an_involution(sample):
    once = transform_field(sample.gt, False, 2)
    twice = transform_field(once, False, 2)
    assert twice.vectors.tobytes() == sample.gt.vectors.tobytes()


@pytest.mark.parametrize("flip,k", GROUP)
def test_group_elements_invert(sample, flip, k):
    img = transform_raster(sample.distorted, flip, k)
    assert inverse_transform_raster(img, flip, k).tobytes() == sample.distorted.tobytes()
    back = inverse_transform_field(transform_field(sample.gt, flip, k), flip, k)
    np.testing.assert_allclose(back.vectors, sample.gt.vectors, atol=1e-9, rtol=0)


def test_rotation_moves_vectors_with_the_image():
    # a field that points away from the image center rotates into the same pattern
    c = block_centers(8, 8) - 64.0
    f = DistortionField(c / 10.0)
    for flip, k in GROUP:
        np.testing.assert_allclose(transform_field(f, flip, k).vectors, f.vectors, atol=1e-9)


def test_augmented_loss_invariance():
    rng = np.random.default_rng(17)
    for _ in range(20):
        est = DistortionField(rng.normal(0, 3, (8, 8, 2)))
        gt = DistortionField(rng.normal(0, 3, (8, 8, 2)))
        mask = rng.random((8, 8)) < 0.5
        mask[0, 0] = True
        base = field_losses(est, gt, mask)
        for flip, k in GROUP:
            aug = field_losses(transform_field(est, flip, k), transform_field(gt, flip, k), transform_raster(mask, flip, k))
            assert abs(aug.reg - base.reg) <= 1e-9
            assert abs(aug.total - base.total) <= 1e-9


def test_augment_rejects_non_square(sample):
    from dataclasses import replace

    bad = replace(sample, distorted=sample.distorted[:, :100])
    with pytest.raises(NonSquareInput):
        augment(bad)


# --- archive ---------------------------------------------------------------


def test_dataset_regeneration_is_byte_identical(tmp_path):
    write_dataset(tmp_path / "a", [0, 1], 96)
    write_dataset(tmp_path / "b", [0, 1], 96)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    names = ["manifest.csv"] + [f"sample_{s:05}/{f}" for s in (0, 1) for f in
                                ("normal.png", "distorted.png", "mask.png", "gt.dfld", "minutiae_normal.csv", "minutiae_distorted.csv")]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    assert not cmp.left_only and not cmp.right_only
