"""Parameter / FLOP / memory accounting by tracing one forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import cost_trace
from .tensor import Tensor


@dataclass
class ComplexityReport:
    params: int
    macs: int
    memory_bytes: int
    input_size: int
    layers: list[dict] = field(default_factory=list)

    @property
    def flops(self) -> int:
        """Reported as 2 x MACs."""
        return 2 * self.macs

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def memory_mb(self) -> float:
        return self.memory_bytes / 2**20

    def lines(self) -> list[str]:
        return [f"params={self.params}", f"params_m={self.params_m:.4f}", f"macs={self.macs}",
                f"flops={self.flops}", f"gflops={self.gflops:.4f}", f"memory_bytes={self.memory_bytes}",
                f"memory_mb={self.memory_mb:.4f}", f"input_size={self.input_size}", "flops_convention=2xMACs"]


def count_params_flops(model, input_size: int | None = None) -> ComplexityReport:
    """Walk a batch-1 inference pass at ``input_size`` and sum per-layer closed forms.

    MACs: convs N*(C/g)*k^2*H'*W' (bias excluded), batch norm one per output
    element, attention gating one per multiplied element, DCNv2 its main conv
    plus 4 per bilinear sample per input channel. Memory counts parameters at
    4 bytes each.
    """
    size = input_size or model.config.input_size
    was_training = model.training
    model.eval()
    try:
        with cost_trace() as log:
            model(Tensor(np.zeros((1, 3, size, size), dtype=np.float32)))
    finally:
        model.train(was_training)
    params = model.num_parameters()
    # shared layers (the CBAM MLP) run more than once but own their weights once
    seen = {(rec["layer"], rec["kind"]): rec.get("params", 0) for rec in log}
    traced = sum(seen.values())
    if traced != params:
        raise AssertionError(f"traced parameters {traced} != registry {params}")
    macs = sum(rec["macs"] for rec in log)
    return ComplexityReport(params, macs, 4 * params, size, log)


def percent_change(base: float, new: float) -> float:
    return 100.0 * (new - base) / base
