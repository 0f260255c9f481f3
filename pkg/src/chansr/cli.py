"""``chansr`` command line: data generation, training, fine-tuning, evaluation,
ablation, interpolation baselines and raster export.

Exit codes: 0 success, 1 usage error, 2 data/format/scale error, 3 divergence.
Settings resolve as built-in defaults < ``--config`` JSON < explicit flags,
and every command prints the fully materialized result as its first line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .characteristics import TARGETS
from .dataset import DatasetFormatError, generate_dataset, read_dataset, split, write_dataset
from .export import ExportError, export_maps
from .model import CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from .trainer import (
    ABLATION_PRESETS,
    DivergenceError,
    ScaleMismatchError,
    TrainConfig,
    baseline_predictor,
    evaluate,
    finetune_heads,
    model_predictor,
    run_ablation,
    train,
)

log = logging.getLogger("chansr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
COMMANDS = ("gen-data", "train", "finetune", "eval", "ablate", "baseline", "export")
DATA_DEFAULTS = {"seed": 7, "scenes": 96, "grid": 128, "density": 0.3}
# flag dest -> TrainConfig field
TRAIN_FLAGS = {"seed": "seed", "scale": "scale", "epochs": "epochs", "batch": "batch_size",
               "patch": "patch_size", "ablation": "ablation", "deterministic": "deterministic"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p: argparse.ArgumentParser, *names: str, required: tuple[str, ...] = ("--out",)) -> None:
    S = argparse.SUPPRESS
    spec = {
        "--seed": dict(type=int, help="master seed"),
        "--scenes": dict(type=int, help="number of base scenes"),
        "--grid": dict(type=int, help="HR grid size in cells"),
        "--density": dict(type=float, help="target building coverage"),
        "--scale": dict(type=int, choices=(2, 4, 8), help="SR factor"),
        "--epochs": dict(type=int),
        "--batch": dict(type=int, help="batch size"),
        "--patch": dict(type=int, help="HR patch size"),
        "--ablation": dict(choices=ABLATION_PRESETS, help="model preset"),
        "--deterministic": dict(action="store_true", help="single-threaded, byte-reproducible outputs"),
        "--config": dict(metavar="JSON", help="config file; explicit flags override it"),
        "--out": dict(help="output file (gen-data) or directory"),
        "--data": dict(help="dataset file written by gen-data"),
        "--checkpoint": dict(help="model checkpoint"),
        "--target": dict(choices=TARGETS + ("all",), help="head to fine-tune"),
        "--split": dict(choices=("train", "val", "test"), help="split to score"),
        "--method": dict(choices=("nearest", "bicubic", "both"), help="interpolation method"),
        "--format": dict(choices=("pgm", "csv"), help="export format"),
        "--index": dict(type=int, help="scene index to export"),
    }
    for name in names:
        kw = dict(spec[name])
        if name in required:
            kw["required"] = True
        else:
            kw["default"] = S
        p.add_argument(name, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chansr", description="Super-resolution of wireless channel-characteristic maps.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    train_flags = ("--seed", "--scale", "--epochs", "--batch", "--patch", "--ablation", "--deterministic", "--config")
    data = ("--data", "--out")
    with_ckpt = ("--data", "--checkpoint", "--out")
    _add(sub.add_parser("gen-data", help="generate a synthetic dataset"),
         "--seed", "--scenes", "--grid", "--density", "--deterministic", "--config", "--out")
    _add(sub.add_parser("train", help="train a model"), "--data", *train_flags, "--out", required=data)
    _add(sub.add_parser("finetune", help="fine-tune per-target heads"),
         "--data", "--checkpoint", "--target", *train_flags, "--out", required=with_ckpt)
    _add(sub.add_parser("eval", help="score a checkpoint"),
         "--data", "--checkpoint", "--scale", "--split", "--seed", "--config", "--deterministic", "--out",
         required=with_ckpt)
    _add(sub.add_parser("ablate", help="STL / +RES / +DA / +ATT table"), "--data", *train_flags, "--out",
         required=data)
    _add(sub.add_parser("baseline", help="interpolation baselines"),
         "--data", "--scale", "--split", "--method", "--seed", "--config", "--deterministic", "--out",
         required=data)
    _add(sub.add_parser("export", help="write rasters as PGM or CSV"),
         "--data", "--index", "--checkpoint", "--scale", "--format", "--seed", "--config", "--out",
         required=data)
    return parser


# ------------------------------------------------------------------ settings

@dataclass
class Settings:
    train: TrainConfig
    data: dict
    extra: dict

    def line(self, command: str) -> str:
        d = {"command": command, **self.data, "train": self.train.to_dict(), **self.extra}
        return "effective config: " + json.dumps(d, sort_keys=True)


def resolve(args: argparse.Namespace) -> Settings:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"--config: file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(raw, dict):
            raise UsageError("--config: top level must be a JSON object")
    data = {k: raw.pop(k, v) for k, v in DATA_DEFAULTS.items() if k != "seed"}
    train_fields = dict(raw)
    given = vars(args)
    for flag, name in TRAIN_FLAGS.items():
        if flag in given:
            train_fields[name] = given[flag]
    for k in ("scenes", "grid", "density"):
        if k in given:
            data[k] = given[k]
    try:
        cfg = TrainConfig.from_dict(train_fields)
        cfg.model_config()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from exc
    data["seed"] = cfg.seed
    extra = {k: given[k] for k in ("checkpoint", "target", "split", "method", "format", "index", "data", "out")
             if k in given}
    if "scale" not in train_fields and "checkpoint" in extra:
        # without an explicit scale, checkpoint commands use the checkpoint's own
        try:
            cfg = cfg.replace(scale=load_checkpoint(extra["checkpoint"]).config.scale)
        except (OSError, CheckpointError, ConfigError):
            pass  # reported properly when the command loads it
    return Settings(cfg, data, extra)


def _load_data(path: str, cfg: TrainConfig):
    dataset = read_dataset(path)
    return split(dataset, cfg.split_ratios, cfg.seed)


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, s: Settings) -> int:
    d = s.data
    dataset = generate_dataset(d["seed"], d["scenes"], d["grid"], d["density"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    print(f"wrote {len(dataset.samples)} scenes ({d['grid']}x{d['grid']}) to {out}")
    return EXIT_OK


def cmd_train(args, s: Settings) -> int:
    cfg = s.train
    dataset = _load_data(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.6f}  val PL MAE {rec.val_mae['PL']:.4f} dB  "
              f"LOS acc {rec.val_accuracy:.4f}", flush=True)

    result = train(cfg, dataset, progress=progress)
    save_checkpoint(result.best, out / "model.csrm")
    save_checkpoint(result.last, out / "last.csrm")
    _write(out / "history.csv", result.history.to_csv(cfg.deterministic))
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    from .plotting import plot_history

    plot_history(result.history, out / "history.png")
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'model.csrm'}")
    return EXIT_OK


def _checkpoint_for(args, cfg: TrainConfig):
    model = load_checkpoint(args.checkpoint)
    if model.config.scale != cfg.scale:
        raise ScaleMismatchError(
            f"checkpoint {args.checkpoint} was trained for scale {model.config.scale}, --scale is {cfg.scale}")
    return model


def cmd_finetune(args, s: Settings) -> int:
    cfg = s.train
    dataset = _load_data(args.data, cfg)
    model = _checkpoint_for(args, cfg)
    targets = TARGETS if s.extra.get("target", "all") == "all" else (s.extra["target"],)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["target,val_before,val_after"]
    for t in targets:
        res = finetune_heads(model, dataset, t, cfg)
        model = res.model
        unit = "error rate" if t == "LOS" else "MAE"
        print(f"{t}: val {unit} {res.mae_before:.6g} -> {res.mae_after:.6g}", flush=True)
        lines.append(f"{t},{res.mae_before:.9g},{res.mae_after:.9g}")
    save_checkpoint(model, out / "model.csrm")
    _write(out / "finetune.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(args, s: Settings) -> int:
    cfg = s.train
    dataset = _load_data(args.data, cfg)
    model = _checkpoint_for(args, cfg)
    name = s.extra.get("split", "test")
    report = evaluate(model, dataset, name, cfg.scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_csv()
    sys.stdout.write(text)
    _write(out / "report.csv", text)
    from .plotting import plot_reports

    plot_reports({"model": report}, out / "report.png")
    return EXIT_OK


def cmd_ablate(args, s: Settings) -> int:
    cfg = s.train
    dataset = _load_data(args.data, cfg)

    def progress(preset, scale, report):
        print(f"{preset} x{scale}: PL MAE {report.mae('PL'):.4f} dB", flush=True)

    table, _ = run_ablation(cfg, dataset, (cfg.scale,), progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = table.to_csv()
    sys.stdout.write(text)
    _write(out / "ablation.csv", text)
    from .plotting import plot_ablation

    plot_ablation(table, out / "ablation.png")
    return EXIT_OK


def cmd_baseline(args, s: Settings) -> int:
    cfg = s.train
    dataset = _load_data(args.data, cfg)
    method = s.extra.get("method", "both")
    methods = ("nearest", "bicubic") if method == "both" else (method,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for m in methods:
        report = evaluate(baseline_predictor(m, dataset.specs), dataset, s.extra.get("split", "test"), cfg.scale)
        reports[m] = report
        print(f"# {m}")
        sys.stdout.write(report.to_csv())
        _write(out / f"baseline_{m}.csv", report.to_csv())
    from .plotting import plot_reports

    plot_reports(reports, out / "baseline.png")
    return EXIT_OK


def cmd_export(args, s: Settings) -> int:
    cfg = s.train
    dataset = read_dataset(args.data)
    index = s.extra.get("index", 0)
    if not 0 <= index < len(dataset.samples):
        raise UsageError(f"--index: {index} outside 0..{len(dataset.samples) - 1}")
    rasters = {k: v.astype(np.float64) for k, v in dataset.samples[index].rasters.items()}
    fmt = s.extra.get("format", "pgm")
    written = export_maps(rasters, args.out, fmt, dataset.specs, prefix=f"scene{index}_")
    if "checkpoint" in s.extra:
        model = _checkpoint_for(args, cfg)
        pred = model_predictor(model, dataset.specs)(rasters, cfg.scale)
        inside = rasters["h"] > 0
        for t in TARGETS:
            pred[t] = np.where(inside, dataset.specs[t].sentinel, pred[t])
        written += export_maps(pred, args.out, fmt, dataset.specs, prefix=f"scene{index}_sr{cfg.scale}_")
    for p in written:
        print(p)
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(settings.line(args.command), flush=True)
    try:
        return HANDLERS[args.command](args, settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointError, ScaleMismatchError, ConfigError, ExportError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    raise SystemExit(main())
