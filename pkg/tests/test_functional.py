import numpy as np
import pytest

from vdet import functional as F
from vdet.errors import ParameterError, ShapeError
from vdet.gradcheck import grad_check
from vdet.tensor import Tape, Tensor


def conv_loops(x, w, b, stride, pad, groups):
    """Direct nested-loop cross-correlation oracle."""
    bsz, c, h, wd = x.shape
    n, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, n, ho, wo))
    ng = n // groups
    for bi in range(bsz):
        for o in range(n):
            g = o // ng
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def bilinear_loops(img, px, py):
    """Zero-padded bilinear read of img [H,W] at (px, py)."""
    h, w = img.shape
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    total = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                total += img[yy, xx] * max(0.0, 1 - abs(px - xx)) * max(0.0, 1 - abs(py - yy))
    return total


def test_im2col_matches_explicit_windows(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    cols = F._im2col(x, 3, 2, 3, 2)
    for i in range(3):
        for j in range(2):
            np.testing.assert_array_equal(cols[:, :, i, j], x[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3])


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 3, 2)])
def test_col2im_is_adjoint_of_im2col(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 8, 7))
    ho, wo = F.out_size(8, k, stride, pad), F.out_size(7, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = F._im2col(xp, k, stride, ho, wo)  # [B,C,Ho,Wo,k,k]
    y = rng.standard_normal((2, 3, k, k, ho, wo))
    lhs = (cols.transpose(0, 1, 4, 5, 2, 3) * y).sum()
    rhs = (x * F._col2im(y, x.shape, k, stride, pad)).sum()
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_conv2d_matches_loop_oracle_on_random_shapes():
    r = np.random.default_rng(99)
    for _ in range(50):
        groups = int(r.choice([1, 2]))
        c = groups * int(r.integers(1, 4))
        n = groups * int(r.integers(1, 4))
        k = int(r.choice([1, 2, 3, 5]))
        stride, pad = int(r.integers(1, 4)), int(r.integers(0, 3))
        h, w = int(r.integers(k, 9)), int(r.integers(k, 9))
        x = r.standard_normal((int(r.integers(1, 3)), c, h, w))
        wt = r.standard_normal((n, c // groups, k, k))
        b = r.standard_normal(n) if r.random() < 0.5 else None
        got = F.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b), stride, pad, groups).data
        np.testing.assert_allclose(got, conv_loops(x, wt, b, stride, pad, groups), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 2), (3, 2, 1), (1, 1, 4)])
def test_conv2d_gradients(rng, stride, pad, groups):
    x = Tensor(rng.standard_normal((2, 4, 6, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4 // groups, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    assert grad_check(lambda x, w, b: F.conv2d(x, w, b, stride, pad, groups), [x, w, b], probes=20) < 1e-5


def test_conv2d_errors(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(rng.standard_normal((2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(rng.standard_normal((2, 3, 5, 5))))
    with pytest.raises(ParameterError):
        F.conv2d(x, Tensor(rng.standard_normal((2, 3, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(rng.standard_normal((2, 3, 3, 3))), Tensor(np.zeros(3)))


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1)])
def test_pool_matches_loops(rng, kind, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    got = F.pool2d(Tensor(x), kind, k, stride, pad).data
    ho, wo = F.out_size(7, k, stride, pad), F.out_size(6, k, stride, pad)
    ref = np.zeros((2, 3, ho, wo))
    for i in range(ho):
        for j in range(wo):
            r0, c0 = i * stride - pad, j * stride - pad
            win = x[:, :, max(r0, 0):r0 + k, max(c0, 0):c0 + k]  # padding excluded
            ref[:, :, i, j] = win.max(axis=(2, 3)) if kind == "max" else win.mean(axis=(2, 3))
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    xt = Tensor(x, requires_grad=True)
    assert grad_check(lambda a: F.pool2d(a, kind, k, stride, pad), [xt], probes=30) < 1e-6


def test_pool_kernel_larger_than_input():
    with pytest.raises(ParameterError):
        F.pool2d(Tensor(np.zeros((1, 1, 3, 3))), "max", 5, 1, 0)


def test_global_pools(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(F.global_pool(Tensor(x), "avg").data[..., 0, 0], x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(F.global_pool(Tensor(x), "max").data[..., 0, 0], x.max(axis=(2, 3)))
    for kind in ("avg", "max"):
        assert grad_check(lambda a: F.global_pool(a, kind), [Tensor(x, requires_grad=True)], probes=None) < 1e-6


def test_batch_norm_training_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = F.batch_norm(Tensor(x), g, b, rm, rv, True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5),
                               rtol=1e-10)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)  # biased variance


def test_batch_norm_inference_uses_running_stats(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    y = F.batch_norm(Tensor(x), Tensor(g), Tensor(b), rm, rv, False).data
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) * g[None, :, None, None] \
        + b[None, :, None, None]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_batch_norm_needs_two_values():
    with pytest.raises(ParameterError):
        F.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     np.zeros(2), np.ones(2), True)


def test_batch_norm_gradients(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    rm, rv = np.zeros(2), np.ones(2)
    assert grad_check(lambda x, g, b: F.batch_norm(x, g, b, rm, rv, True), [x, g, b], probes=20) < 1e-6


def test_upsample_nearest(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    np.testing.assert_array_equal(F.upsample_nearest(Tensor(x)).data, x.repeat(2, 2).repeat(2, 3))
    assert grad_check(F.upsample_nearest, [Tensor(x, requires_grad=True)], probes=None) < 1e-7


def test_bce_with_logits():
    z = np.array([-50.0, -2.0, 0.0, 3.0, 50.0])
    t = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    got = F.bce_with_logits(Tensor(z), t).data
    p = 1 / (1 + np.exp(-z[1:4]))
    np.testing.assert_allclose(got[1:4], -(t[1:4] * np.log(p) + (1 - t[1:4]) * np.log(1 - p)), rtol=1e-12)
    assert got[0] < 1e-20 and got[4] < 1e-20
    assert F.bce_with_logits(Tensor(np.zeros(1)), np.zeros(1)).data[0] == pytest.approx(np.log(2), abs=1e-15)


def test_bilinear_sample_matches_loop_oracle(rng):
    feat = rng.standard_normal((2, 5, 6))
    for px, py in [(0.0, 0.0), (2.0, 3.0), (1.25, 2.5), (-0.5, 1.5), (5.5, 4.25), (-1.5, 2.0), (3.3, -0.9)]:
        got = F.bilinear_sample(Tensor(feat), px, py).data
        for ch in range(2):
            assert got[ch] == pytest.approx(bilinear_loops(feat[ch], px, py), abs=1e-14)


def test_bilinear_integer_coordinates_read_exact_values(rng):
    feat = rng.standard_normal((3, 4, 4))
    np.testing.assert_array_equal(F.bilinear_sample(Tensor(feat), 2.0, 1.0).data, feat[:, 1, 2])
    np.testing.assert_array_equal(F.bilinear_sample(Tensor(feat), 9.0, 9.0).data, np.zeros(3))


def test_bilinear_gradients(rng):
    feat = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    px = Tensor(np.array(1.37), requires_grad=True)
    py = Tensor(np.array(2.81), requires_grad=True)
    assert grad_check(F.bilinear_sample, [feat, px, py], probes=20) < 1e-6


def deform_loops(x, offset, mask, w, stride, pad):
    """Per-output, per-tap bilinear oracle."""
    b, c, h, wd = x.shape
    n, _, k, _ = w.shape
    ho, wo = offset.shape[2:]
    out = np.zeros((b, n, ho, wo))
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                acc = np.zeros(n)
                for t in range(k * k):
                    ky, kx = divmod(t, k)
                    px = j * stride - pad + kx + offset[bi, 2 * t, i, j]
                    py = i * stride - pad + ky + offset[bi, 2 * t + 1, i, j]
                    vals = np.array([bilinear_loops(x[bi, ch], px, py) for ch in range(c)])
                    acc += w[:, :, ky, kx] @ vals * mask[bi, t, i, j]
                out[bi, :, i, j] = acc
    return out


@pytest.mark.parametrize("k,stride", [(1, 1), (1, 2), (3, 1), (3, 2)])
def test_deform_zero_offset_unit_mask_is_conv(rng, k, stride):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    pad = k // 2
    ho, wo = F.out_size(7, k, stride, pad), F.out_size(6, k, stride, pad)
    off = np.zeros((2, 2 * k * k, ho, wo))
    mask = np.ones((2, k * k, ho, wo))
    got = F.deform_conv2d(Tensor(x), Tensor(off), Tensor(mask), Tensor(w), None, stride, pad).data
    ref = F.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    assert np.abs(got - ref).max() < 1e-12


def test_deform_integer_offsets_shift_input(rng):
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    dx, dy = 2, -1
    off = np.zeros((1, 18, 6, 7))
    off[:, 0::2], off[:, 1::2] = dx, dy
    got = F.deform_conv2d(Tensor(x), Tensor(off), Tensor(np.ones((1, 9, 6, 7))), Tensor(w), None, 1, 1).data
    # tap (ky, kx) at output (i, j) reads x[i - 1 + ky + dy, j - 1 + kx + dx]: a valid conv over a
    # zero-padded copy of x whose window origin is moved by (dy, dx)
    xp = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    window = xp[:, :, 3 + dy:3 + dy + 8, 3 + dx:3 + dx + 9]
    ref = F.conv2d(Tensor(window), Tensor(w), None, 1, 0).data
    assert np.abs(got - ref).max() < 1e-12


def test_deform_fractional_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    off = rng.uniform(-1.5, 1.5, (2, 18, 3, 3))
    mask = rng.uniform(0, 1, (2, 9, 3, 3))
    got = F.deform_conv2d(Tensor(x), Tensor(off), Tensor(mask), Tensor(w), None, 2, 1).data
    np.testing.assert_allclose(got, deform_loops(x, off, mask, w, 2, 1), rtol=1e-10, atol=1e-12)


def test_deform_gradients(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    off = Tensor(rng.uniform(-1.4, 1.4, (2, 18, 5, 5)), requires_grad=True)
    mask = Tensor(rng.uniform(0.1, 0.9, (2, 9, 5, 5)), requires_grad=True)
    assert grad_check(lambda x, o, m, w, b: F.deform_conv2d(x, o, m, w, b, 1, 1), [x, off, mask, w, b],
                      probes=20) < 1e-6


def test_deform_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    with pytest.raises(ShapeError):
        F.deform_conv2d(x, Tensor(np.zeros((1, 9, 4, 4))), Tensor(np.ones((1, 9, 4, 4))), w, None, 1, 1)
    with pytest.raises(ShapeError):
        F.deform_conv2d(x, Tensor(np.zeros((1, 18, 4, 4))), Tensor(np.ones((1, 3, 4, 4))), w, None, 1, 1)


def test_grad_check_detects_a_wrong_rule(rng):
    from vdet.tensor import make

    def bad_square(a):
        return make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad")  # missing factor 2

    assert grad_check(bad_square, [Tensor(rng.standard_normal(5), requires_grad=True)]) > 0.4
