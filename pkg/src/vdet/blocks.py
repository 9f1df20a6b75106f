"""Parameterised network blocks: CBS, GhostConv, C2f, C3/C3Ghost, SPPF, CBAM, DCNv2."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .errors import ParameterError
from .tensor import DEFAULT_DTYPE, Tensor, amax, concat, mean, relu, sigmoid, silu

# ------------------------------------------------------------- cost tracing

_cost_logs: list[list[dict]] = []


@contextmanager
def cost_trace():
    """Collect per-layer (params, MACs) records emitted during a forward pass."""
    log: list[dict] = []
    _cost_logs.append(log)
    try:
        yield log
    finally:
        _cost_logs.remove(log)


def _record(module: "Module", kind: str, macs: int, **extra) -> None:
    if _cost_logs:
        _cost_logs[-1].append({"layer": module.path, "kind": kind, "macs": int(macs), **extra})


# ------------------------------------------------------------- module base


class Module:
    training = True
    path = ""
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(m, Module) for m in value):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for path, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield (f"{path}.{name}" if path else name), value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for name in mod._buffer_names:
                yield (f"{path}.{name}" if path else name), getattr(mod, name)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def assign_paths(self) -> None:
        for path, mod in self.named_modules():
            mod.path = path

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
            for name in mod._buffer_names:
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE), requires_grad=True)


# ------------------------------------------------------------- primitives


class Conv2d(Module):
    def __init__(self, c1, c2, k=1, s=1, p=None, g=1, bias=False, rng=None):
        self.spec = F.ConvSpec(c1, c2, k, s, k // 2 if p is None else p, g, bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (c1 // g) * k * k
        self.weight = _uniform(rng, (c2, c1 // g, k, k), fan_in)
        self.bias = _uniform(rng, (c2,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        sp = self.spec
        y = F.conv2d(x, self.weight, self.bias, sp.stride, sp.padding, sp.groups)
        _record(self, "conv", self.weight.size * y.shape[2] * y.shape[3] * y.shape[0],
                params=self.weight.size + (self.bias.size if self.bias is not None else 0))
        return y

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.weight = Tensor(np.ones(c, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.bias = Tensor(np.zeros(c, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(c, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        # one multiply-add per element
        _record(self, "bn", x.size, params=2 * x.shape[1])
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class CBS(Module):
    """Conv -> BatchNorm -> SiLU."""

    def __init__(self, c1, c2, k=1, s=1, p=None, g=1, rng=None):
        self.conv = Conv2d(c1, c2, k, s, p, g, bias=False, rng=rng)
        self.bn = BatchNorm2d(c2)

    @property
    def out_channels(self):
        return self.conv.spec.out_channels

    def forward(self, x):
        return silu(self.bn(self.conv(x)))


# ------------------------------------------------------------- ghost


@dataclass(frozen=True)
class GhostSpec:
    out_channels: int
    ratio: int = 2
    primary_kernel: int = 1
    cheap_kernel: int = 3

    @property
    def intrinsic(self) -> int:
        return math.ceil(self.out_channels / self.ratio)


class GhostConv(Module):
    """Primary conv to ceil(n/s) intrinsic maps plus depthwise cheap maps, truncated to n.

    Each intrinsic map yields ``s - 1`` ghost maps through a ``d x d`` depthwise
    conv; the intrinsic map itself counts as the remaining one.
    """

    def __init__(self, c1, c2, k=1, s=1, ratio=2, dw=3, rng=None):
        if ratio < 2:
            raise ParameterError(f"ghost ratio must be >= 2, got {ratio}")
        if c2 < ratio:
            raise ParameterError(f"ghost output channels {c2} smaller than ratio {ratio}")
        self.ghost = GhostSpec(c2, ratio, k, dw)
        m = self.ghost.intrinsic
        self.primary = CBS(c1, m, k, s, rng=rng)
        self.cheap = CBS(m, m * (ratio - 1), dw, 1, g=m, rng=rng)

    @property
    def out_channels(self):
        return self.ghost.out_channels

    def forward(self, x):
        x1 = self.primary(x)
        y = concat([x1, self.cheap(x1)], axis=1)
        n = self.ghost.out_channels
        return y if y.shape[1] == n else y[:, :n]


def ghost_closed_form(c1, n, k=1, ratio=2, dw=3, with_bn=True) -> int:
    m = math.ceil(n / ratio)
    count = c1 * m * k * k + m * (ratio - 1) * dw * dw
    if with_bn:
        count += 2 * m + 2 * m * (ratio - 1)
    return count


# ------------------------------------------------------------- CSP family

ConvFactory = Callable[..., Module]


class Bottleneck(Module):
    def __init__(self, c1, c2, shortcut=True, conv: ConvFactory = CBS, e=1.0, rng=None):
        c_ = int(c2 * e)
        self.cv1 = conv(c1, c_, 3, 1, rng=rng)
        self.cv2 = conv(c_, c2, 3, 1, rng=rng)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C2f(Module):
    """Split after a 1x1 CBS, chain bottlenecks, concat every branch, fuse with 1x1 CBS."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, rng=None):
        self.c = int(c2 * e)
        self.cv1 = CBS(c1, 2 * self.c, 1, 1, rng=rng)
        self.m = [Bottleneck(self.c, self.c, shortcut, CBS, 1.0, rng=rng) for _ in range(n)]
        self.cv2 = CBS((2 + n) * self.c, c2, 1, rng=rng)

    def forward(self, x):
        y = self.cv1(x)
        ys = [y[:, : self.c], y[:, self.c :]]
        for m in self.m:
            ys.append(m(ys[-1]))
        return self.cv2(concat(ys, axis=1))


class C3(Module):
    """Two 1x1 stems, a bottleneck chain on one of them, concat, 1x1 fuse."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, conv: ConvFactory = CBS, rng=None):
        c_ = int(c2 * e)
        self.cv1 = conv(c1, c_, 1, 1, rng=rng)
        self.cv2 = conv(c1, c_, 1, 1, rng=rng)
        self.m = [Bottleneck(c_, c_, shortcut, conv, 1.0, rng=rng) for _ in range(n)]
        self.cv3 = conv(2 * c_, c2, 1, 1, rng=rng)

    def forward(self, x):
        y = self.cv1(x)
        for m in self.m:
            y = m(y)
        return self.cv3(concat([y, self.cv2(x)], axis=1))


class C3Ghost(C3):
    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5, rng=None):
        super().__init__(c1, c2, n, shortcut, e, conv=GhostConv, rng=rng)


class SPPF(Module):
    """1x1 CBS, three cascaded 5x5 stride-1 max pools, concat of four stages, 1x1 CBS."""

    def __init__(self, c1, c2, k=5, hidden=None, rng=None):
        c_ = hidden or c1 // 2
        self.k = k
        self.cv1 = CBS(c1, c_, 1, 1, rng=rng)
        self.cv2 = CBS(4 * c_, c2, 1, 1, rng=rng)

    def stages(self, x) -> list[Tensor]:
        ys = [self.cv1(x)]
        for _ in range(3):
            ys.append(F.pool2d(ys[-1], "max", self.k, 1, self.k // 2))
        return ys

    def forward(self, x):
        return self.cv2(concat(self.stages(x), axis=1))


# ------------------------------------------------------------- CBAM


@dataclass(frozen=True)
class CbamSpec:
    channels: int
    reduction: int = 16
    spatial_kernel: int = 7

    @property
    def hidden(self) -> int:
        return max(self.channels // self.reduction, 4)


class ChannelAttention(Module):
    def __init__(self, spec: CbamSpec, rng=None):
        self.spec = spec
        self.fc1 = Conv2d(spec.channels, spec.hidden, 1, bias=True, rng=rng)
        self.fc2 = Conv2d(spec.hidden, spec.channels, 1, bias=True, rng=rng)

    def mlp(self, v):
        return self.fc2(relu(self.fc1(v)))

    def forward(self, x):
        return sigmoid(self.mlp(F.global_pool(x, "avg")) + self.mlp(F.global_pool(x, "max")))


class SpatialAttention(Module):
    def __init__(self, spec: CbamSpec, rng=None):
        if spec.spatial_kernel % 2 == 0:
            raise ParameterError(f"spatial kernel must be odd, got {spec.spatial_kernel}")
        self.conv = Conv2d(2, 1, spec.spatial_kernel, 1, spec.spatial_kernel // 2, bias=False, rng=rng)

    def forward(self, x):
        desc = concat([mean(x, axis=1, keepdims=True), amax(x, axis=1, keepdims=True)], axis=1)
        return sigmoid(self.conv(desc))


class CBAM(Module):
    def __init__(self, channels, reduction=16, spatial_kernel=7, rng=None):
        self.spec = CbamSpec(channels, reduction, spatial_kernel)
        self.channel = ChannelAttention(self.spec, rng=rng)
        self.spatial = SpatialAttention(self.spec, rng=rng)

    def zero_(self):
        self.channel.fc1.zero_()
        self.channel.fc2.zero_()
        self.spatial.conv.zero_()
        return self

    def forward(self, x):
        refined = self.channel(x) * x
        _record(self, "cbam_gate", 2 * x.size, params=0)
        return self.spatial(refined) * refined


# ------------------------------------------------------------- DCNv2


@dataclass(frozen=True)
class DcnSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None

    @property
    def points(self) -> int:
        return self.kernel_size * self.kernel_size

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding


class DCNv2(Module):
    """Modulated deformable conv with sibling offset (2K) and modulation (K) convs.

    Both sibling branches start at zero, so a fresh layer is a standard conv
    scaled by sigmoid(0) = 0.5.
    """

    def __init__(self, c1, c2, k=3, s=1, p=None, rng=None):
        self.spec = DcnSpec(c1, c2, k, s, p)
        kk = self.spec.points
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _uniform(rng, (c2, c1, k, k), c1 * k * k)
        self.offset_conv = Conv2d(c1, 2 * kk, k, s, self.spec.pad, bias=True, rng=rng).zero_()
        self.mask_conv = Conv2d(c1, kk, k, s, self.spec.pad, bias=True, rng=rng).zero_()

    def forward(self, x, offset=None, mask=None):
        sp = self.spec
        if offset is None:
            offset = self.offset_conv(x)
        if mask is None:
            mask = sigmoid(self.mask_conv(x))
        y = F.deform_conv2d(x, offset, mask, self.weight, None, sp.stride, sp.pad)
        b, _, ho, wo = y.shape
        _record(self, "dcn", self.weight.size * ho * wo * b, params=self.weight.size)
        # bilinear gather: 4 MACs per sampled point per input channel
        _record(self, "dcn_sample", 4 * sp.in_channels * sp.points * ho * wo * b, params=0)
        return y


class DeformCBS(Module):
    """DCNv2 -> BatchNorm -> SiLU, the head's drop-in for a 3x3 CBS."""

    def __init__(self, c1, c2, k=3, s=1, rng=None):
        self.dcn = DCNv2(c1, c2, k, s, rng=rng)
        self.bn = BatchNorm2d(c2)

    def forward(self, x):
        return silu(self.bn(self.dcn(x)))
