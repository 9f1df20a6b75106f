"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               probes: int | None = 20, seed: int = 0, return_details: bool = False):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to any tensor; a fixed random projection
    reduces it to a scalar so every output element contributes. ``probes``
    elements are drawn per input (all of them when ``None`` or when the input
    is smaller). The error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng([seed, 0x6C1D])
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape).astype(out.dtype)

    def scalar(*args):
        return float((fn(*args).data * proj).sum())

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        loss = (out * Tensor(proj)).sum()
    grads = tape.backward(loss, sources=[t for t in inputs if t.requires_grad])

    worst = 0.0
    details = []
    for ti, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = grads[id(t)].reshape(-1)
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if probes is None or probes >= n else rng.choice(n, size=probes, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar(*inputs)
            flat[i] = orig - eps
            fm = scalar(*inputs)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            details.append((ti, int(i), a, numeric, err))
            worst = max(worst, err)
    return (worst, details) if return_details else worst


# ------------------------------------------------------------------ block suite

SUITE_BLOCKS = ("conv2d", "bilinear_sample", "batch_norm", "ghost_conv", "channel_attention",
                "spatial_attention", "cbam", "dcnv2", "sppf", "c2f", "c3ghost", "detection_loss")


def _module_check(module, x, probes, seed, eps=1e-6):
    """Check d/dx and d/dparam for every parameter of ``module`` (train mode, float64)."""
    module.astype(np.float64).train()
    params = module.parameters()
    return grad_check(lambda x, *ps: module(x), [x] + params, eps=eps, probes=probes, seed=seed)


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def check_block(name: str, probes: int = 20, seed: int = 0) -> float:
    """Max relative gradient error for one named block at a small float64 size."""
    from . import blocks as B
    from . import functional as F
    from .data import Annotation
    from .train import assign_targets, detection_loss

    rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
    mrng = np.random.default_rng([seed, 7])
    if name == "conv2d":
        x, w, b = _rand(rng, 2, 4, 7, 7), _rand(rng, 6, 2, 3, 3), _rand(rng, 6)
        return grad_check(lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1, groups=2), [x, w, b],
                          probes=probes, seed=seed)
    if name == "bilinear_sample":
        f = _rand(rng, 3, 5, 6)
        px = Tensor(np.array(rng.uniform(-0.7, 5.6)), requires_grad=True)
        py = Tensor(np.array(rng.uniform(-0.7, 4.6)), requires_grad=True)
        return grad_check(F.bilinear_sample, [f, px, py], probes=probes, seed=seed)
    if name == "batch_norm":
        x, g, b = _rand(rng, 3, 4, 5, 5), Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True), _rand(rng, 4)
        rm, rv = np.zeros(4), np.ones(4)
        return grad_check(lambda x, g, b: F.batch_norm(x, g, b, rm, rv, True), [x, g, b], probes=probes, seed=seed)
    if name == "ghost_conv":
        return _module_check(B.GhostConv(6, 8, 3, 1, rng=mrng), _rand(rng, 2, 6, 6, 6), probes, seed)
    if name == "channel_attention":
        return _module_check(B.ChannelAttention(B.CbamSpec(8, 2), rng=mrng), _rand(rng, 2, 8, 5, 5), probes, seed)
    if name == "spatial_attention":
        return _module_check(B.SpatialAttention(B.CbamSpec(8), rng=mrng), _rand(rng, 2, 8, 6, 6), probes, seed)
    if name == "cbam":
        return _module_check(B.CBAM(8, 2, rng=mrng), _rand(rng, 2, 8, 6, 6), probes, seed)
    if name == "dcnv2":
        dcn = B.DCNv2(4, 5, 3, 1, rng=mrng)
        # random sibling weights so sampling points sit off the integer grid
        for conv in (dcn.offset_conv, dcn.mask_conv):
            conv.weight.data = mrng.standard_normal(conv.weight.shape) * 0.3
            conv.bias.data = mrng.uniform(-0.9, 0.9, conv.bias.shape)
        return _module_check(dcn, _rand(rng, 2, 4, 6, 6), probes, seed)
    if name == "sppf":
        return _module_check(B.SPPF(8, 8, rng=mrng), _rand(rng, 2, 8, 6, 6), probes, seed)
    if name == "c2f":
        return _module_check(B.C2f(8, 8, 1, rng=mrng), _rand(rng, 2, 8, 6, 6), probes, seed)
    if name == "c3ghost":
        return _module_check(B.C3Ghost(8, 8, 1, rng=mrng), _rand(rng, 2, 8, 6, 6), probes, seed)
    if name == "detection_loss":
        size, strides, nc = 64, (8, 16, 32), 3
        anns = [[Annotation("a", 0.0, 0, (4.0, 6.0, 30.0, 28.0), 0), Annotation("b", 0.0, 0, (33.0, 30.0, 59.0, 62.0), 2)],
                [Annotation("c", 0.0, 0, (0.0, 0.0, 64.0, 64.0), 1), Annotation("a", 0.0, 0, (40.0, 8.0, 56.0, 30.0), 0)]]
        grids = [(size // s, size // s) for s in strides]
        targets = assign_targets(anns, grids, strides, nc)
        raws = [_rand(rng, 2, 1, h, w, 5 + nc, scale=0.5) for h, w in grids]
        return grad_check(lambda *r: detection_loss(list(r), targets)[0], raws, probes=probes, seed=seed)
    raise KeyError(name)


def run_suite(probes: int = 20, seed: int = 0, blocks=SUITE_BLOCKS) -> dict[str, float]:
    return {name: check_block(name, probes, seed) for name in blocks}
