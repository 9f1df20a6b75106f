"""The eight-way module ablation grid (baseline, singles, pairs, all three)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

from .complexity import ComplexityReport, count_params_flops
from .data import Dataset
from .inference import evaluate
from .model import ModelConfig, build_model
from .train import TrainConfig, train

# (label, use_cbam, use_ghost, use_dcn) in the reference row order
VARIANTS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("baseline", False, False, False),
    ("+cbam", True, False, False),
    ("+ghost", False, True, False),
    ("+dcn", False, False, True),
    ("+cbam+ghost", True, True, False),
    ("+cbam+dcn", True, False, True),
    ("+ghost+dcn", False, True, True),
    ("proposed", True, True, True),
)


@dataclass
class AblationRow:
    label: str
    use_cbam: bool
    use_ghost: bool
    use_dcn: bool
    precision: float
    recall: float
    f1: float
    map50: float
    epochs_run: int
    complexity: ComplexityReport

    def cells(self) -> list[str]:
        mark = lambda f: "x" if f else "-"  # noqa: E731
        c = self.complexity
        return [self.label, mark(self.use_cbam), mark(self.use_ghost), mark(self.use_dcn),
                f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.f1:.6f}", f"{self.map50:.6f}",
                str(self.epochs_run), str(c.params), str(c.flops), str(c.memory_bytes)]


HEADER = ["variant", "cbam", "ghost", "dcn", "precision", "recall", "f1", "map50", "epochs", "params", "flops",
          "memory_bytes"]


def variant_config(base: ModelConfig, cbam: bool, ghost: bool, dcn: bool) -> ModelConfig:
    return dataclasses.replace(base, use_cbam=cbam, use_ghost=ghost, use_dcn=dcn)


def run_ablation(base: ModelConfig, train_set: Dataset, val_set: Dataset, config: TrainConfig, seed: int = 0,
                 complexity_size: int | None = None,
                 progress: Callable[[AblationRow], None] | None = None) -> list[AblationRow]:
    """Train and evaluate every variant from the same seed; complexity is traced at ``complexity_size``."""
    rows = []
    for label, cbam, ghost, dcn in VARIANTS:
        cfg = variant_config(base, cbam, ghost, dcn)
        model, history = train(build_model(cfg, seed), train_set, val_set, config, seed=seed)
        report = evaluate(model, val_set, config.conf_threshold, config.nms_iou, mean=config.mean, std=config.std)
        row = AblationRow(label, cbam, ghost, dcn, report.precision, report.recall, report.f1, report.map50,
                          len(history), count_params_flops(model, complexity_size))
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_grid(rows: list[AblationRow]) -> str:
    return "\n".join("\t".join(r) for r in [HEADER] + [row.cells() for row in rows]) + "\n"
