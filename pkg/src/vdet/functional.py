"""Differentiable NCHW kernels: convolution, pooling, normalisation, sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError
from .tensor import Tensor, _sigmoid, as_tensor, make


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ParameterError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ParameterError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ParameterError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}")


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_stride(stride):
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded [B,C,Hp,Wp] -> view [B,C,Ho,Wo,k,k]."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(dcols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: dcols [B,C,k,k,Ho,Wo] -> [B,C,H,W]."""
    b, c, h, w = shape
    ho, wo = dcols.shape[-2:]
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation, grouped, via im2col + batched matmul."""
    _check_stride(stride)
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    n, cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if c % groups or n % groups:
        raise ShapeError(f"channels {c}->{n} not divisible by groups={groups}")
    if cg * groups != c:
        raise ShapeError(f"weight expects {cg * groups} input channels (groups={groups}), input has {c}")
    if bias is not None and bias.shape != (n,):
        raise ShapeError(f"bias shape {bias.shape} does not match {n} output channels")
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    g, ng = groups, n // groups
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _im2col(xp, k, stride, ho, wo)  # [B,C,Ho,Wo,k,k]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(g, cg * k * k, b * ho * wo)
    wmat = wd.reshape(g, ng, cg * k * k)
    out = np.matmul(wmat, cols)  # [g, ng, B*Ho*Wo]
    out = out.reshape(n, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, n, 1, 1)
    out = np.ascontiguousarray(out)

    def vjp(gout):
        gm = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g, ng, b * ho * wo)
        dx = dw = db = None
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(wd.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm)  # [g, cg*k*k, B*Ho*Wo]
            dcols = dcols.reshape(c, k, k, b, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            dx = _col2im(dcols, xd.shape, k, stride, padding)
        if bias is not None and bias.requires_grad:
            db = gout.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, vjp, "conv2d")


def pool2d(x: Tensor, kind: str, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Windowed max/avg pooling. Padding never wins a max and is excluded from avg counts."""
    stride = k if stride is None else stride
    if k < 1:
        raise ParameterError(f"pool kernel must be >= 1, got {k}")
    _check_stride(stride)
    if kind not in ("max", "avg"):
        raise ParameterError(f"unknown pool kind {kind!r}")
    b, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ParameterError(f"pool kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    xd = x.data
    padw = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if kind == "max":
        xp = np.pad(xd, padw, constant_values=-np.inf) if pad else xd
        win = _im2col(xp, k, stride, ho, wo).reshape(b, c, ho, wo, k * k)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], -1)[..., 0]

        def vjp(g):
            dcols = np.zeros((b, c, k, k, ho, wo), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dcols[:, :, i, j] = g * (arg == i * k + j)
            return (_col2im(dcols, xd.shape, k, stride, pad),)

        return make(np.ascontiguousarray(out), (x,), vjp, "maxpool")

    xp = np.pad(xd, padw) if pad else xd
    ones = np.pad(np.ones((1, 1, h, w), dtype=xd.dtype), padw) if pad else np.ones((1, 1, h, w), xd.dtype)
    counts = _im2col(ones, k, stride, ho, wo).sum(axis=(-1, -2))  # [1,1,Ho,Wo]
    out = _im2col(xp, k, stride, ho, wo).sum(axis=(-1, -2)) / counts

    def vjp(g):
        gc = g / counts
        dcols = np.broadcast_to(gc[:, :, None, None], (b, c, k, k, ho, wo))
        return (_col2im(np.ascontiguousarray(dcols), xd.shape, k, stride, pad),)

    return make(out, (x,), vjp, "avgpool")


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Per-channel spatial reduction to [B,C,1,1]."""
    b, c, h, w = x.shape
    if kind == "avg":
        return make(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                    lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gavgpool")
    if kind == "max":
        flat = x.data.reshape(b, c, h * w)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], -1).reshape(b, c, 1, 1)

        def vjp(g):
            d = np.zeros_like(flat)
            np.put_along_axis(d, arg[..., None], g.reshape(b, c, 1), -1)
            return (d.reshape(x.shape),)

        return make(out, (x,), vjp, "gmaxpool")
    raise ParameterError(f"unknown pool kind {kind!r}")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over (B,H,W).

    In training mode the running buffers are updated in place with the biased
    batch variance, so train and infer outputs coincide once stats converge.
    """
    b, c, h, w = x.shape
    xd = x.data
    g = gamma.data.reshape(1, c, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (xd - running_mean.reshape(1, c, 1, 1)) * inv
        out = (xhat * g + beta.data.reshape(1, c, 1, 1)).astype(xd.dtype, copy=False)

        def vjp_eval(gout):
            return (gout * g * inv,
                    (gout * xhat).sum(axis=(0, 2, 3)),
                    gout.sum(axis=(0, 2, 3)))

        return make(out, (x, gamma, beta), vjp_eval, "batchnorm")

    n = b * h * w
    if n < 2:
        raise ParameterError("batch_norm in train mode needs at least 2 values per channel")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g + beta.data.reshape(1, c, 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(c)

    def vjp(gout):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3))
        dbeta = gout.sum(axis=(0, 2, 3))
        dxhat = gout * g
        dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return dx, dgamma, dbeta

    return make(out, (x, gamma, beta), vjp, "batchnorm")


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    b, c, h, w = x.shape
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)
    return make(out, (x,), lambda g: (g.reshape(b, c, h, scale, w, scale).sum(axis=(3, 5)),), "upsample")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable form)."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return make(out, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce")


# ------------------------------------------------------------ bilinear sampling


def _corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Yield (flat index, weight, valid) for the four bilinear neighbours."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = []
    for dy, dx, wy, wx in ((0, 0, 1 - ly, 1 - lx), (0, 1, 1 - ly, lx), (1, 0, ly, 1 - lx), (1, 1, ly, lx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        out.append((idx, wy * wx * valid, valid))
    return out, ly, lx


def bilinear_sample(feature: Tensor, x, y) -> Tensor:
    """Sample a [C,H,W] map at real (x, y); neighbours outside the map read zero.

    ``x`` and ``y`` may be plain numbers or scalar tensors; gradients flow to
    the feature values and to tensor coordinates.
    """
    c, h, w = feature.shape
    xt, yt = as_tensor(x, feature), as_tensor(y, feature)
    px = np.asarray(xt.data, dtype=np.float64).reshape(1)
    py = np.asarray(yt.data, dtype=np.float64).reshape(1)
    corners, ly, lx = _corners(py, px, h, w)
    flat = feature.data.reshape(c, h * w)
    vals = [flat[:, idx[0]] * valid[0] for idx, _, valid in corners]
    out = sum(flat[:, idx[0]] * wt[0] for idx, wt, _ in corners).astype(feature.dtype)

    def vjp(g):
        dfeat = np.zeros(c * h * w, dtype=feature.dtype).reshape(c, h * w)
        for idx, wt, _ in corners:
            dfeat[:, idx[0]] += g * wt[0]
        v00, v01, v10, v11 = vals
        dlx = (1 - ly[0]) * (v01 - v00) + ly[0] * (v11 - v10)
        dly = (1 - lx[0]) * (v10 - v00) + lx[0] * (v11 - v01)
        return (dfeat.reshape(c, h, w),
                np.asarray((g * dlx).sum(), dtype=xt.dtype).reshape(xt.shape),
                np.asarray((g * dly).sum(), dtype=yt.dtype).reshape(yt.shape))

    return make(out, (feature, xt, yt), vjp, "bilinear")


def deform_conv2d(x: Tensor, offset: Tensor, mask: Tensor, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Modulated deformable convolution.

    ``offset`` is [B, 2K, Ho, Wo] holding (dx, dy) pairs per kernel element in
    row-major kernel order; ``mask`` is [B, K, Ho, Wo] and multiplies each
    bilinear sample. With zero offsets and unit mask this is ``conv2d``.
    """
    _check_stride(stride)
    b, c, h, w = x.shape
    n, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"deform_conv2d weight expects {cw} input channels, input has {c}")
    kk = kh * kw
    ho, wo = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    if offset.shape != (b, 2 * kk, ho, wo):
        raise ShapeError(f"offset shape {offset.shape} != {(b, 2 * kk, ho, wo)}")
    if mask.shape != (b, kk, ho, wo):
        raise ShapeError(f"mask shape {mask.shape} != {(b, kk, ho, wo)}")
    dt = x.dtype
    ky, kx = np.divmod(np.arange(kk), kw)
    base_y = (np.arange(ho) * stride - padding)[None, :, None] + ky[:, None, None]  # [K,Ho,1]
    base_x = (np.arange(wo) * stride - padding)[None, None, :] + kx[:, None, None]  # [K,1,Wo]
    off = offset.data.reshape(b, kk, 2, ho, wo).astype(np.float64)
    px = base_x[None] + off[:, :, 0]
    py = base_y[None] + off[:, :, 1]
    corners, ly, lx = _corners(py, px, h, w)
    L = kk * ho * wo
    xflat = x.data.reshape(b, c, h * w)
    cvals = []
    for idx, _, valid in corners:
        v = np.empty((b, c, L), dtype=dt)
        for bi in range(b):
            v[bi] = xflat[bi][:, idx[bi].reshape(L)]
        cvals.append(v * valid.reshape(b, 1, L))
    wts = [wt.reshape(b, 1, L).astype(dt) for _, wt, _ in corners]
    sampled = cvals[0] * wts[0] + cvals[1] * wts[1] + cvals[2] * wts[2] + cvals[3] * wts[3]  # [B,C,L]
    md = mask.data.reshape(b, 1, L)
    cols = (sampled * md).reshape(b, c * kk, ho * wo)
    wmat = weight.data.reshape(n, c * kk)
    out = np.matmul(wmat, cols).reshape(b, n, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, n, 1, 1)

    def vjp(gout):
        gm = gout.reshape(b, n, ho * wo)
        dw = np.einsum("bnp,bkp->nk", gm, cols).reshape(weight.shape) if weight.requires_grad else None
        db = gout.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        dcols = np.matmul(wmat.T, gm).reshape(b, c, L)
        dmask = (dcols * sampled).sum(axis=1).reshape(mask.shape) if mask.requires_grad else None
        dsamp = dcols * md
        dx = None
        if x.requires_grad:
            dx = np.zeros((b, c * h * w), dtype=dt)
            chan = (np.arange(c) * (h * w))[:, None]
            for (idx, _, _), wt in zip(corners, wts):
                contrib = dsamp * wt
                for bi in range(b):
                    flat_idx = (chan + idx[bi].reshape(1, L)).ravel()
                    dx[bi] += np.bincount(flat_idx, weights=contrib[bi].ravel(), minlength=c * h * w)
            dx = dx.reshape(x.shape)
        doff = None
        if offset.requires_grad:
            v00, v01, v10, v11 = cvals
            lyr, lxr = ly.reshape(b, 1, L), lx.reshape(b, 1, L)
            dlx = ((1 - lyr) * (v01 - v00) + lyr * (v11 - v10)) * dsamp
            dly = ((1 - lxr) * (v10 - v00) + lxr * (v11 - v01)) * dsamp
            doff = np.stack([dlx.sum(axis=1).reshape(b, kk, ho, wo),
                             dly.sum(axis=1).reshape(b, kk, ho, wo)], axis=2).reshape(offset.shape).astype(dt)
        return dx, doff, dmask, dw, db

    inputs = (x, offset, mask, weight) if bias is None else (x, offset, mask, weight, bias)
    return make(out.astype(dt, copy=False), inputs, vjp, "deform_conv2d")
