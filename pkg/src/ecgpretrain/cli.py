"""Command-line entry point: ``ecgpretrain <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Failures print one JSON object on a single stderr line.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import augment
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DataError, NumericError
from .evaluation import ScoreMatrix
from .numerics import Rng
from .pipeline import (
    FinetuneConfig,
    PretrainConfig,
    classification_report,
    finetune,
    identification_report,
    model_from_checkpoint,
    pretrain,
    record_segments,
    set_dotted,
)
from .signal import CLASS_NAMES, LeadCombo, load_dataset, read_record, synth_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CommandError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


def _emit(artifacts: list[str], **extra) -> None:
    print(json.dumps({"artifacts": artifacts, **extra}, sort_keys=True))


def _load_config(path: str | None, overrides: Sequence[str]) -> dict:
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CommandError(EXIT_DATA, "data", f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CommandError(EXIT_USAGE, "config", f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise CommandError(EXIT_USAGE, "config", "config must be a JSON object")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CommandError(EXIT_USAGE, "config", f"--set expects dotted.path=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_dotted(cfg, key, value)
    return cfg


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise CommandError(EXIT_DATA, "data", f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> None:
    if args.seconds < 10:
        raise CommandError(EXIT_DATA, "data", f"--seconds {args.seconds} is shorter than one 10 s window")
    if not 2 <= args.classes <= len(CLASS_NAMES):
        raise CommandError(EXIT_USAGE, "usage", f"--classes must lie in [2, {len(CLASS_NAMES)}]")
    if args.patients < 1 or args.sessions < 1:
        raise CommandError(EXIT_USAGE, "usage", "--patients and --sessions must be positive")
    out = _fresh_dir(args.out)
    records = synth_dataset(args.patients, args.sessions, args.seconds, seed=args.seed, n_classes=args.classes)
    manifest = write_dataset(out, records, args.classes, args.seed)
    _emit([str(out / "manifest.json")], n_records=len(manifest["records"]))


def cmd_pretrain(args) -> None:
    cfg = PretrainConfig.from_dict(_load_config(args.config, args.set))
    out = _fresh_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = pretrain(cfg, out / "metrics.jsonl")
    save_checkpoint(result.checkpoint(cfg), out / "checkpoint")
    _emit([str(out / "config.json"), str(out / "metrics.jsonl"), str(out / "checkpoint")],
          final=result.metrics[-1])


def cmd_finetune(args) -> None:
    cfg = FinetuneConfig.from_dict(_load_config(args.config, args.set))
    ckpt = load_checkpoint(args.ckpt)
    out = _fresh_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = finetune(cfg, ckpt, out / "metrics.jsonl")
    save_checkpoint(result.checkpoint(cfg), out / "checkpoint")
    _emit([str(out / "config.json"), str(out / "metrics.jsonl"), str(out / "checkpoint")],
          final=result.metrics[-1])


def cmd_evaluate(args) -> None:
    combo = LeadCombo.parse(args.combo)
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    dataset = load_dataset(args.data)
    if args.task == "identification":
        gallery, probe = dataset.split("gallery"), dataset.split("probe")
        if not gallery:
            raise CommandError(EXIT_DATA, "data", "dataset has no gallery/probe split")
        report = identification_report(model, gallery, probe, combo)
    else:
        weights = ScoreMatrix.from_csv(args.weights) if args.weights else ScoreMatrix.default(dataset.n_classes)
        records = dataset.split(args.split)
        if not records:
            raise CommandError(EXIT_DATA, "data", f"dataset split {args.split!r} is empty")
        report = classification_report(model, records, weights, combo)
    if args.out:
        report.write(args.out)
        _emit([args.out], report=json.loads(report.to_json()))
    else:
        print(report.to_json())


def cmd_augment_preview(args) -> None:
    path = Path(args.input)
    record = read_record(path.parent, path.name.removesuffix(".json").removesuffix(".bin"))
    segment = record_segments(record)[args.segment]
    fn = augment.resolve(args.aug)
    augmented = fn(segment, Rng(args.seed))
    augment.write_preview_csv(args.out, segment, augmented)
    _emit([args.out])


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgpretrain", description="Contrastive ECG pre-training on synthetic 12-lead data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic 12-lead dataset")
    p.add_argument("--patients", type=int, required=True, help="number of synthetic patients")
    p.add_argument("--sessions", type=int, default=2, help="recording sessions per patient")
    p.add_argument("--seconds", type=float, default=20.0, help="record length in seconds (at least 10)")
    p.add_argument("--classes", type=int, default=len(CLASS_NAMES), help="number of rhythm classes, 2 to 6")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--out", required=True, help="output directory, must be new or empty")
    p.set_defaults(func=cmd_synth_data)

    overrides = dict(action="append", default=[], metavar="PATH=VALUE",
                     help="override a config field by dotted path; VALUE is parsed as JSON when possible")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--config", help="JSON file with PretrainConfig fields")
    p.add_argument("--set", **overrides)
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    p.add_argument("--config", help="JSON file with FinetuneConfig fields")
    p.add_argument("--set", **overrides)
    p.add_argument("--ckpt", required=True, help="checkpoint directory to start from")
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--task", choices=("classification", "identification"), required=True, help="downstream task")
    p.add_argument("--combo", default="full12", help="lead combination: full12, limb6, three, two or one")
    p.add_argument("--weights", help="score matrix CSV for classification (ignored for identification)")
    p.add_argument("--split", default="test", help="dataset split scored for classification")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment-preview", help="write original and augmented leads of one segment as CSV")
    p.add_argument("--in", dest="input", required=True, help="record header (.json) inside a dataset directory")
    p.add_argument("--aug", choices=augment.AUGMENTATION_NAMES, required=True, help="augmentation to apply")
    p.add_argument("--seed", type=int, required=True, help="augmentation seed")
    p.add_argument("--segment", type=int, default=0, help="index of the 5 s segment to preview")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_augment_preview)
    return parser


_ERRORS: list[tuple[type, int, str]] = [
    (NumericError, EXIT_NUMERIC, "numeric"),
    (CheckpointError, EXIT_DATA, "checkpoint"),
    (DataError, EXIT_DATA, "data"),
    (ContractError, EXIT_USAGE, "config"),
    (TypeError, EXIT_USAGE, "config"),
    (IndexError, EXIT_USAGE, "usage"),
]


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except CommandError as exc:
        code, kind, message = exc.code, exc.kind, str(exc)
    except tuple(e for e, _, _ in _ERRORS) as exc:
        code, kind = next((c, k) for e, c, k in _ERRORS if isinstance(exc, e))
        message = str(exc)
    except FloatingPointError as exc:
        code, kind, message = EXIT_NUMERIC, "numeric", str(exc)
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
