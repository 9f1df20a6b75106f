"""Command-line entry point: train, eval, detect, ablate, bench, gradcheck, synth.

Settings come from three layers, highest first: command-line flags, a
``key = value`` config file (``--config``), built-in defaults. Every run
directory receives ``config.txt`` with the effective settings, which can be
fed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from threadpoolctl import threadpool_limits

from .errors import FormatError, IntegrityError, ParameterError, ParseError, VdetError

log = logging.getLogger("vdet")


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str


SETTINGS: tuple[Setting, ...] = (
    Setting("seed", int, 0, "global seed"),
    Setting("data", str, None, "training / evaluation manifest"),
    Setting("val", str, None, "validation manifest (default: last 10%% of --data)"),
    Setting("ckpt", str, None, "checkpoint to load"),
    Setting("out", str, "runs/vdet", "run directory"),
    Setting("classes", str, "Car,Van,Truck,Tram", "comma-separated class list"),
    Setting("epochs", int, 150, "epoch limit"),
    Setting("batch", int, 32, "batch size"),
    Setting("lr", float, 0.001, "initial learning rate"),
    Setting("patience", int, 10, "early stopping patience (epochs)"),
    Setting("conf", float, 0.25, "confidence threshold"),
    Setting("nms_iou", float, 0.45, "NMS IoU threshold"),
    Setting("use_ghost", _bool, True, "GhostConv/C3Ghost neck"),
    Setting("use_cbam", _bool, True, "CBAM after neck stages"),
    Setting("use_dcn", _bool, True, "DCNv2 head stems"),
    Setting("width", float, 1.0, "channel width multiplier"),
    Setting("depth", float, 1.0, "bottleneck depth multiplier"),
    Setting("augment", _bool, True, "flip / colour jitter / mosaic during training"),
    Setting("synth", int, None, "use N synthetic training images instead of --data"),
    Setting("synth_val", int, None, "synthetic validation images (default N/4)"),
    Setting("img_size", int, 640, "network input size"),
    Setting("n", int, 10, "images to generate (synth command)"),
    Setting("threads", int, 1, "BLAS threads (1 gives bitwise reproducibility)"),
)
_BY_NAME = {s.name: s for s in SETTINGS}
_BOOL_FLAGS = {"use_ghost": "ghost", "use_cbam": "cbam", "use_dcn": "dcn", "augment": None}


class UsageError(VdetError):
    """Bad flags, files or combinations; exit code 2."""


# ------------------------------------------------------------------ config layers


def parse_config_text(text: str) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; keys use '-' or '_'."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _BY_NAME:
            raise ParseError(f"unknown setting {key!r}", line=lineno)
        if value.lower() in ("", "none"):
            out[key] = None
            continue
        try:
            out[key] = _BY_NAME[key].type(value)
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", line=lineno) from None
    return out


def format_config(settings: dict[str, Any], command: str) -> str:
    lines = [f"# effective settings for '{command}'"]
    for s in SETTINGS:
        v = settings.get(s.name)
        lines.append(f"{s.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults < config file < explicit flags."""
    settings = {s.name: s.default for s in SETTINGS}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            settings.update(parse_config_text(path.read_text()))
        except ParseError as exc:
            raise UsageError(f"{path}: {exc}") from None
    for s in SETTINGS:
        if hasattr(args, s.name):
            settings[s.name] = getattr(args, s.name)
    return settings


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="key = value settings file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for s in SETTINGS:
        flag = "--" + s.name.replace("_", "-")
        if s.name in _BOOL_FLAGS:
            short = _BOOL_FLAGS[s.name] or s.name
            common.add_argument(flag, dest=s.name, action="store_true", help=f"enable {s.help}")
            common.add_argument(f"--no-{short}", dest=s.name, action="store_false", help=f"disable {s.help}")
        else:
            metavar = s.name.upper() if s.type is not str else "PATH"
            common.add_argument(flag, dest=s.name, type=s.type, metavar=metavar,
                                help=f"{s.help} (default {s.default})")
    parser = argparse.ArgumentParser(prog="vdet", description="Lightweight attention/deformable vehicle detector.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train a model"), ("eval", "evaluate a checkpoint"),
                       ("detect", "write per-image detections"), ("ablate", "train and compare the 8 variants"),
                       ("bench", "parameter / FLOP / memory comparison"),
                       ("gradcheck", "finite-difference gradient suite"), ("synth", "write a synthetic dataset")):
        sub.add_parser(name, parents=[common], help=text, argument_default=argparse.SUPPRESS)
    return parser


# ------------------------------------------------------------------ shared plumbing


def _class_names(settings) -> tuple[str, ...]:
    names = tuple(c.strip() for c in str(settings["classes"]).split(",") if c.strip())
    if not names:
        raise UsageError("--classes is empty")
    return names


def _model_config(settings):
    from .model import ModelConfig

    try:
        return ModelConfig(class_names=_class_names(settings), width=settings["width"], depth=settings["depth"],
                           use_ghost=settings["use_ghost"], use_cbam=settings["use_cbam"],
                           use_dcn=settings["use_dcn"], input_size=settings["img_size"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from None


def _train_config(settings):
    from .data import AugmentConfig
    from .train import TrainConfig

    try:
        return TrainConfig(batch_size=settings["batch"], lr0=settings["lr"], epochs=settings["epochs"],
                           patience=min(settings["patience"], settings["epochs"]),
                           augment=AugmentConfig() if settings["augment"] else AugmentConfig.off(),
                           conf_threshold=settings["conf"], nms_iou=settings["nms_iou"])
    except ParameterError as exc:
        raise UsageError(str(exc)) from None


def _manifest(path, settings, names):
    from .data import load_manifest

    p = Path(path)
    if not p.exists():
        raise UsageError(f"manifest not found: {p}")
    try:
        return load_manifest(p, settings["img_size"], names)
    except FileNotFoundError as exc:
        raise UsageError(f"{p}: missing file {exc.args[0]}") from None


def _datasets(settings, names, need_val=True):
    """(train, val) from --synth or --data/--val."""
    from .data import synth_dataset

    if settings["synth"] is not None:
        n = settings["synth"]
        if n < 1:
            raise UsageError("--synth must be >= 1")
        try:
            train = synth_dataset(n, len(names), settings["seed"], settings["img_size"], names)
            n_val = settings["synth_val"] or max(1, n // 4)
            val = synth_dataset(n_val, len(names), settings["seed"] + 1, settings["img_size"], names)
        except ParameterError as exc:
            raise UsageError(str(exc)) from None
        return train, val
    if not settings["data"]:
        raise UsageError("give --data MANIFEST or --synth N")
    data = _manifest(settings["data"], settings, names)
    if settings["val"]:
        return data, _manifest(settings["val"], settings, names)
    if not need_val:
        return data, None
    if len(data) < 2:
        raise UsageError("need at least 2 images to hold out a validation split")
    cut = len(data) - max(1, len(data) // 10)
    return data.subset(range(cut)), data.subset(range(cut, len(data)))


def _eval_set(settings, names):
    """Evaluation data: --data, or the synthetic validation split for --synth."""
    if settings["synth"] is not None:
        return _datasets(settings, names)[1]
    return _datasets(settings, names, need_val=False)[0]


def _load_model(settings):
    from .model import load_checkpoint

    if not settings["ckpt"]:
        raise UsageError("--ckpt is required")
    path = Path(settings["ckpt"])
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    names = _class_names(settings)
    if tuple(model.config.class_names) != names:
        raise UsageError(f"class list {list(names)} does not match checkpoint classes "
                         f"{list(model.config.class_names)}")
    return model


def _run_dir(settings, command) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(settings, command))
    return out


# ------------------------------------------------------------------ commands


def cmd_train(settings) -> int:
    from .inference import evaluate
    from .model import build_model, save_checkpoint
    from .train import train

    names = _class_names(settings)
    train_set, val_set = _datasets(settings, names)
    mcfg, tcfg = _model_config(settings), _train_config(settings)
    out = _run_dir(settings, "train")
    model = build_model(mcfg, settings["seed"])
    model, history = train(model, train_set, val_set, tcfg, seed=settings["seed"], out_dir=out)
    save_checkpoint(model, out / "best.ckpt")
    report = evaluate(model, val_set, tcfg.conf_threshold, tcfg.nms_iou)
    (out / "report.txt").write_text(report.text())
    best = max(history.records, key=lambda r: r.map50)
    print(f"epochs={len(history)} stopped_early={str(history.stopped_early).lower()} "
          f"best_epoch={best.epoch} map50={report.map50:.6f}")
    print(f"checkpoint={out / 'best.ckpt'}")
    return 0


def cmd_eval(settings) -> int:
    from .inference import evaluate

    model = _load_model(settings)
    data = _eval_set(settings, model.config.class_names)
    report = evaluate(model, data, settings["conf"], settings["nms_iou"])
    out = _run_dir(settings, "eval")
    (out / "report.txt").write_text(report.text())
    sys.stdout.write(report.text())
    return 0


def cmd_detect(settings) -> int:
    from .inference import format_detections, predict, stack_images
    from .model import DetectionBox

    model = _load_model(settings)
    data = _eval_set(settings, model.config.class_names)
    out = _run_dir(settings, "detect")
    det_dir = out / "detections"
    det_dir.mkdir(exist_ok=True)
    total = 0
    for start in range(0, len(data), 16):
        batch = [data[i] for i in range(start, min(start + 16, len(data)))]
        for k, (sample, dets) in enumerate(zip(batch, predict(model, stack_images(batch), settings["conf"],
                                                               settings["nms_iou"]))):
            if sample.transform is not None:
                dets = [DetectionBox(d.class_index, d.confidence, sample.transform.inverse_box(d.bbox), d.image_id)
                        for d in dets]
            sid = sample.source_id or f"{start + k:05d}"
            (det_dir / f"{sid}.txt").write_text(format_detections(dets, model.config.class_names))
            total += len(dets)
    print(f"images={len(data)} detections={total} dir={det_dir}")
    return 0


def cmd_ablate(settings) -> int:
    from .ablation import format_grid, run_ablation

    names = _class_names(settings)
    train_set, val_set = _datasets(settings, names)
    out = _run_dir(settings, "ablate")
    rows = run_ablation(_model_config(settings), train_set, val_set, _train_config(settings), settings["seed"])
    grid = format_grid(rows)
    (out / "ablation.tsv").write_text(grid)
    sys.stdout.write(grid)
    return 0


def bench_text(settings) -> str:
    import dataclasses

    from .complexity import count_params_flops, percent_change
    from .model import build_model

    cfg = _model_config(settings)
    base = count_params_flops(build_model(dataclasses.replace(cfg, use_ghost=False, use_cbam=False, use_dcn=False)))
    prop = count_params_flops(build_model(dataclasses.replace(cfg, use_ghost=True, use_cbam=True, use_dcn=True)))
    lines = ["metric\tbase\tproposed\tdelta\tdelta_pct"]
    for key, a, b in (("params", base.params, prop.params), ("flops", base.flops, prop.flops),
                      ("macs", base.macs, prop.macs), ("memory_bytes", base.memory_bytes, prop.memory_bytes)):
        lines.append(f"{key}\t{a}\t{b}\t{b - a}\t{percent_change(a, b):.4f}")
    lines.append(f"input_size={cfg.input_size}")
    lines.append("flops_convention=2xMACs")
    return "\n".join(lines) + "\n"


def cmd_bench(settings) -> int:
    text = bench_text(settings)
    sys.stdout.write(text)
    if settings["out"]:
        (_run_dir(settings, "bench") / "bench.tsv").write_text(text)
    return 0


def cmd_gradcheck(settings) -> int:
    from .gradcheck import SUITE_BLOCKS, check_block

    worst = 0.0
    for name in SUITE_BLOCKS:
        err = check_block(name, probes=20, seed=settings["seed"])
        worst = max(worst, err)
        print(f"{name}\t{err:.3e}\t{'ok' if err < 1e-4 else 'FAIL'}")
    print(f"max_error={worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_synth(settings) -> int:
    from .data import synth_dataset, write_dataset

    names = _class_names(settings)
    n = settings["synth"] if settings["synth"] is not None else settings["n"]
    if n < 1:
        raise UsageError("--n must be >= 1")
    try:
        data = synth_dataset(n, len(names), settings["seed"], settings["img_size"], names)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    out = Path(settings["out"])
    manifest = write_dataset(data, out)
    print(f"manifest={manifest}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "detect": cmd_detect, "ablate": cmd_ablate,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        limit = threadpool_limits(settings["threads"]) if settings["threads"] else contextlib.nullcontext()
        with limit:
            return COMMANDS[args.command](settings)
    except (UsageError, ParseError, FormatError, IntegrityError) as exc:
        print(f"vdet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
