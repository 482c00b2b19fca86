"""Command-line entry point: ``crdn <subcommand> ...``.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime
failure (I/O, malformed files, divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .data import INU_LEVELS, NOISE_LEVELS, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, TrainingDiverged
from .formats import colorize, read_tensor, write_pgm, write_ppm
from .metrics import write_boxplot_csv
from .model import CRDN, CrdnConfig, load_checkpoint, param_count
from .rdc import GATE_MODES, UPSAMPLE_MODES, VARIANTS, decoder_param_formula
from .train import TrainConfig, boxplot_rows, evaluate, train

log = logging.getLogger("crdn")


class UsageError(Exception):
    """Bad command-line usage; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return [int(v) if v.is_integer() else v for v in values]


def _echo_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.stem + ".config.json")


def write_echo(artifact, command: str, settings: dict) -> Path:
    """Write the fully resolved settings of a run next to its artifact."""
    artifact = Path(artifact)
    path = _echo_path(artifact) if artifact.suffix else artifact / "run_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "version": __version__, "settings": settings}
    path.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return path


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"--config {path}: expected a JSON object")
    if "settings" in raw and "command" in raw:
        # a config echo written by an earlier run; only its model/train sections are reusable
        settings = raw["settings"]
        raw = {k: settings[k] for k in ("model", "train") if k in settings} or settings
    if "model" in raw or "train" in raw:
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise ConfigError(f"--config {path}: unknown sections {sorted(unknown)}")
        return {"model": dict(raw.get("model", {})), "train": dict(raw.get("train", {}))}
    return {"model": dict(raw), "train": {}}


def _model_config(args, base: dict) -> CrdnConfig:
    merged = dict(base)
    for key in ("classes", "modalities", "stages", "variant", "upsample", "gates", "precision", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return CrdnConfig.from_dict(merged)


def _threads():
    raw = os.environ.get("CRDN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CRDN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"CRDN_THREADS must be >= 0, got {n}")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    for level in args.noise:
        if level < 0:
            raise ConfigError(f"--noise: levels must be >= 0, got {level}")
    for level in args.inu:
        if not 0 <= level < 200:
            raise ConfigError(f"--inu: levels must be in [0, 200), got {level}")
    if args.train < 1 or args.test < 1:
        raise ConfigError("--train and --test must be >= 1")
    if args.size % 16:
        raise ConfigError(f"--size must be divisible by 16, got {args.size}")
    test_noise = args.noise if args.corrupt_test else [0]
    test_inu = args.inu if args.corrupt_test else [0]
    train_set = generate_dataset(args.train, args.size, args.seed, "train", args.noise, args.inu)
    test_set = generate_dataset(args.test, args.size, args.seed, "test", test_noise, test_inu)
    write_dataset(train_set, out / "train")
    write_dataset(test_set, out / "test")
    write_echo(out, "gen-data", {
        "train": args.train, "test": args.test, "size": args.size, "seed": args.seed,
        "noise": args.noise, "inu": args.inu, "corrupt_test": args.corrupt_test,
    })
    print(json.dumps({"train": len(train_set), "test": len(test_set), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    from .plotting import training_curves

    cfg_file = _load_config_file(args.config)
    model_cfg = _model_config(args, cfg_file.get("model", {}))
    train_dict = dict(cfg_file.get("train", {}))
    for key in ("epochs", "lr", "weight_decay", "lr_decay", "batch_size", "train_seed"):
        value = getattr(args, key, None)
        if value is not None:
            train_dict["seed" if key == "train_seed" else key] = value
    train_cfg = TrainConfig.from_dict(train_dict)

    train_set = read_dataset(args.data, split="train")
    eval_set = read_dataset(args.data, split=args.eval_split)
    if train_set.images.shape[1] != model_cfg.modalities:
        raise ConfigError(f"--data has {train_set.images.shape[1]} modalities, model expects {model_cfg.modalities}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.stem + ".metrics.jsonl")
    write_echo(out, "train", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                              "data": str(args.data), "eval_split": args.eval_split})
    model = CRDN(model_cfg)
    start = time.perf_counter()
    result = train(model, train_set, train_cfg, eval_set=eval_set, log_path=log_path, checkpoint_path=out)
    elapsed = time.perf_counter() - start
    if result.log:
        training_curves(result.log, out.with_name(out.stem + ".curves.png"),
                        title=f"{model_cfg.variant} / {model_cfg.gates} / {model_cfg.upsample}")
    final = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(out), "epochs": len(result.log), "seconds": round(elapsed, 1),
                      "mean_dice": final.get("mean_dice"), "pixel_acc": final.get("pixel_acc")}))
    return 0


def cmd_eval(args) -> int:
    from .plotting import dice_boxplot

    ck = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data, split=args.split)
    report = evaluate(ck.model, dataset, average=args.average)
    report.update({"checkpoint": str(args.ckpt), "data": str(args.data), "split": dataset.split})
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_echo(out, "eval", {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
                             "average": args.average, "boxplot": args.boxplot})
    if args.boxplot:
        rows = boxplot_rows(ck.model, dataset)
        box = Path(args.boxplot)
        box.parent.mkdir(parents=True, exist_ok=True)
        write_boxplot_csv(box, rows)
        dice_boxplot(rows, box.with_suffix(".png"))
    print(json.dumps({k: report[k] for k in ("mean_dice", "pixel_acc", "per_class_dice", "samples")}))
    return 0


def cmd_predict(args) -> int:
    from .plotting import segmentation_overlay

    ck = load_checkpoint(args.ckpt)
    image = read_tensor(args.input)
    if image.shape[1] != ck.model.config.modalities:
        raise ConfigError(f"--input has {image.shape[1]} channels, model expects {ck.model.config.modalities}")
    pred = ck.model.predict(image.astype(ck.model.config.dtype))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(pred) == 1:
        targets = [out]
    else:
        targets = [out.with_name(f"{out.stem}_{i:04d}{out.suffix or '.pgm'}") for i in range(len(pred))]
    for p, target in zip(pred, targets):
        write_pgm(target, p)
        write_ppm(target.with_suffix(".ppm"), colorize(p))
    segmentation_overlay(image[0], pred[0], out.with_name(out.stem + ".overlay.png"))
    write_echo(out, "predict", {"ckpt": str(args.ckpt), "input": str(args.input)})
    print(json.dumps({"outputs": [str(t) for t in targets]}))
    return 0


def cmd_param_count(args) -> int:
    cfg = _model_config(args, _load_config_file(args.config).get("model", {}))
    counts = param_count(CRDN(cfg))
    formula = decoder_param_formula(cfg.variant, cfg.classes, cfg.kernel_size, cfg.upsample)
    counts.update({"decoder_formula": formula, "decoder_share": counts["decoder"] / counts["total"],
                   "config": cfg.to_dict()})
    print(json.dumps(counts, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    if not args.eps > 0:
        raise ConfigError(f"--eps must be > 0, got {args.eps}")
    cfg = _model_config(args, _load_config_file(args.config).get("model", {}))
    start = time.perf_counter()
    cases = run_suite(cfg, eps=args.eps, seed=args.seed)
    elapsed = time.perf_counter() - start
    rows = [c.to_dict(args.tol) for c in cases]
    for r in rows:
        status = "ok  " if r["passed"] else "FAIL"
        print(f"{status} {r['name']:<40} max_rel={r['max_rel_error']:.2e} checked={r['checked']}"
              f" skipped={r['skipped_kinks']}")
    failed = [r["name"] for r in rows if not r["passed"]]
    summary = {"cases": len(rows), "failed": failed, "tolerance": args.tol, "seconds": round(elapsed, 2),
               "max_rel_error": max(r["max_rel_error"] for r in rows)}
    print(json.dumps(summary))
    if args.report:
        out = Path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"summary": summary, "cases": rows}, indent=2) + "\n")
        write_echo(out, "grad-check", {"model": cfg.to_dict(), "eps": args.eps, "seed": args.seed, "tol": args.tol})
    return 2 if failed else 0


def cmd_robustness_sweep(args) -> int:
    from .plotting import robustness_sweep as plot_sweep
    from .robustness import robustness_sweep

    ck = load_checkpoint(args.ckpt)
    clean = read_dataset(args.data, split=args.split)
    report = robustness_sweep(ck.model, clean, args.noise, args.inu)
    report.update({"checkpoint": str(args.ckpt), "data": str(args.data)})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    plot_sweep(report["cells"], out.with_suffix(".png"))
    write_echo(out, "robustness-sweep", {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
                                         "noise": args.noise, "inu": args.inu})
    for a in report["anomalies"]:
        log.warning("non-monotone %s step %s -> %s (+%.4f)", a["axis"], a["from"], a["to"], a["increase"])
    print(json.dumps({"cells": len(report["cells"]), "clean_mean_dice": report["clean_mean_dice"],
                      "harshest": report["harshest"], "anomalies": len(report["anomalies"])}))
    return 0


# ---------------------------------------------------------------- parser

def _add_model_flags(p, with_defaults: bool = False) -> None:
    p.add_argument("--config", help="JSON file with model (and optionally train) settings")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--upsample", choices=UPSAMPLE_MODES)
    p.add_argument("--gates", choices=GATE_MODES)
    p.add_argument("--classes", type=int)
    p.add_argument("--modalities", type=int)
    p.add_argument("--stages", type=int)
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--seed", type=int, help="model initialization seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crdn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crdn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic phantom train/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=_float_list, default=[0], help=f"noise levels %% to mix, e.g. {NOISE_LEVELS}")
    p.add_argument("--inu", type=_float_list, default=[0], help=f"INU levels %% to mix, e.g. {INU_LEVELS}")
    p.add_argument("--corrupt-test", action="store_true", help="apply the corruption mix to the test split too")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a CRDN and write a checkpoint plus metric log")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-seed", type=int, help="shuffling seed")
    p.add_argument("--eval-split", default="test")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice and pixel accuracy of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--boxplot", help="per-sample Dice CSV (a PNG is written next to it)")
    p.add_argument("--split", default="test")
    p.add_argument("--average", choices=("micro", "macro"), default="micro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment a CRDT image tensor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("param-count", help="print the parameter breakdown")
    _add_model_flags(p)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    _add_model_flags(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--report")
    p.set_defaults(func=cmd_grad_check, seed=0)

    p = sub.add_parser("robustness-sweep", help="evaluate over a noise x INU corruption grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--noise", type=_float_list, default=list(NOISE_LEVELS))
    p.add_argument("--inu", type=_float_list, default=list(INU_LEVELS))
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        with _threads():
            return args.func(args)
    except (FormatError, TrainingDiverged, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
