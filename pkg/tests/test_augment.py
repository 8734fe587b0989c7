import numpy as np
import pytest

from autoview import tensor as T
from autoview.augment import (GEOMETRIC_KINDS, KINDS, MAGNITUDE_FREE, SMOOTH_KINDS, AugmentError, AugOp,
                              apply_kernel, build_operation_set, dump_operation_set, equalize_array)
from support import gradcheck


def img(seed=0, shape=(3, 8, 8), lo=0.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def run(op, x):
    with T.precision(np.float64):
        return apply_kernel(op, T.Tensor(x)).data


def test_default_set_counts():
    assert len(build_operation_set(levels=3)) == 28
    ops1 = build_operation_set(levels=1)
    assert len(ops1) == 12
    assert [op.kind for op in ops1] == list(KINDS)


def test_default_set_is_deterministic_and_photometric_only():
    a, b = build_operation_set(), build_operation_set()
    assert a == b
    assert dump_operation_set(a) == dump_operation_set(b)
    assert not {op.kind for op in a} & set(GEOMETRIC_KINDS)
    assert {op.kind for op in build_operation_set(include_geometric=True)} >= set(GEOMETRIC_KINDS)


def test_magnitude_table_values():
    by = {}
    for op in build_operation_set():
        by.setdefault(op.kind, []).append(op.magnitude)
    assert by["Solarize"] == [0.85, 0.6, 0.35]
    assert by["Posterize"] == [7, 6, 5]
    assert by["Brightness"] == [0.7, 0.5, 0.3]
    assert by["Hue"] == [0.05, 0.1, 0.2]
    assert by["GaussianBlur"] == [0.3, 0.6, 1.0]
    for kind in MAGNITUDE_FREE:
        assert by[kind] == [None]


def test_descriptor_validation():
    with pytest.raises(AugmentError):
        AugOp("Mixup")
    with pytest.raises(AugmentError):
        AugOp("Invert", magnitude=0.5)
    with pytest.raises(AugmentError):
        AugOp("Brightness")
    with pytest.raises(AugmentError):
        AugOp("Posterize", 0, 2.5)
    with pytest.raises(AugmentError):
        AugOp("GaussianBlur", 0, 0.0)
    with pytest.raises(AugmentError):
        build_operation_set(kinds=["Rotate"])
    with pytest.raises(AugmentError):
        build_operation_set(explicit=[])
    with pytest.raises(AugmentError):
        build_operation_set(explicit=[{"kind": "Invert"}, {"kind": "Invert"}])


def test_involution_and_identity_magnitudes():
    x = img()
    inv = AugOp("Invert")
    np.testing.assert_allclose(run(inv, run(inv, x)), x, atol=1e-6)
    np.testing.assert_allclose(run(AugOp("Solarize", 0, 1.0), x), x, atol=1e-6)
    np.testing.assert_allclose(run(AugOp("Posterize", 0, 8), x), x, atol=1 / 255)
    for kind in ("Brightness", "Contrast", "Color", "Sharpness"):
        np.testing.assert_allclose(run(AugOp(kind, 0, 1.0), x), x, atol=1e-6, err_msg=kind)
    np.testing.assert_allclose(run(AugOp("Hue", 0, 0.0), x), x, atol=1e-6)


def test_grayscale_of_red():
    red = np.zeros((3, 4, 4))
    red[0] = 1.0
    np.testing.assert_allclose(run(AugOp("Grayscale"), red), 0.299, atol=1e-12)


def test_equalize_constant_and_reference():
    c = np.full((3, 5, 5), 0.37)
    out = run(AugOp("Equalize"), c)
    assert np.ptp(out) == 0.0
    # an 8-bit ramp with every value present once per channel maps onto itself
    d = np.arange(256, dtype=np.uint8).reshape(16, 16)
    np.testing.assert_array_equal(equalize_array(d), d)


def test_solarize_and_posterize_values():
    x = np.array([0.1, 0.5, 0.9]).reshape(3, 1, 1) * np.ones((3, 2, 2))
    out = run(AugOp("Solarize", 0, 0.6), x)
    np.testing.assert_allclose(out[:, 0, 0], [0.1, 0.5, 0.1], atol=1e-9)
    post = run(AugOp("Posterize", 0, 1), x)
    np.testing.assert_allclose(post[:, 0, 0], [0.0, 128 / 255, 128 / 255], atol=1e-9)


@pytest.mark.parametrize("op", build_operation_set(include_geometric=True), ids=lambda o: o.name)
def test_range_preservation(op):
    x = img(seed=3, shape=(2, 3, 8, 8))
    out = run(op, x)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("op", [op for op in build_operation_set() if op.kind in SMOOTH_KINDS],
                         ids=lambda o: o.name)
def test_smooth_kernels_input_gradient(op):
    # interior pixel values keep clamps and hue sectors away from their kinks
    x = img(seed=5, shape=(1, 3, 6, 6), lo=0.2, hi=0.8)
    w = np.random.default_rng(1).normal(size=x.shape)
    if op.kind == "Hue":
        x = _away_from_hue_boundaries(x)
    gradcheck(lambda a: (apply_kernel(op, a) * T.Tensor(w)).sum(), [x], rtol=1e-4, atol=1e-7, h=1e-5)


def _away_from_hue_boundaries(x):
    # one well-separated hue per pixel: r > g > b with clear gaps
    x = x.copy()
    x[:, 0] = 0.75
    x[:, 1] = 0.42 + 0.13 * x[:, 1]  # hue stays inside one sector after the shift
    x[:, 2] = 0.25
    return x


def test_straight_through_kernels_pass_pixel_gradient():
    x = img(seed=2, shape=(1, 3, 4, 4))
    for op in (AugOp("Solarize", 0, 0.5), AugOp("Posterize", 0, 5), AugOp("AutoContrast"), AugOp("Equalize")):
        with T.precision(np.float64):
            t = T.Tensor(x, requires_grad=True)
            g = T.grad(apply_kernel(op, t).sum(), [t])[0]
        np.testing.assert_allclose(g, 1.0, err_msg=op.name)


def test_batched_matches_single():
    x = img(seed=4, shape=(2, 3, 8, 8))
    for op in build_operation_set():
        batch = run(op, x)
        for i in range(2):
            np.testing.assert_allclose(batch[i], run(op, x[i]), atol=1e-12, err_msg=op.name)


def test_bad_image_shape():
    with pytest.raises(T.ShapeError):
        apply_kernel(AugOp("Invert"), np.zeros((4, 8, 8)))
