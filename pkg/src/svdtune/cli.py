"""Command-line entry point: ``svdtune <command> [options]``.

Settings come from three places, later ones winning: built-in defaults, an
INI config file (``--config``) and command-line flags. The config file uses
a ``[run]`` section for run settings, ``[model]`` for architecture settings
and ``[toggles]`` for the spectral adapter components::

    [run]
    method = svd
    steps = 300
    lr = 1e-3

    [model]
    image_size = 128

    [toggles]
    shift = off

Relative output directories are placed under ``$SVDTUNE_OUTPUT_ROOT``
(default ``runs``). Exit codes: 0 success, 2 config error, 3 data error,
4 training error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
import typing
from pathlib import Path
from typing import Dict, List, Optional

from .baselines import SVD_TOGGLES, AccountingError
from .checkpoint import CheckpointError, load_model
from .data import DataError, DomainShiftSpec, SOURCE, TARGET, generate, ingest, write_dataset
from .metrics import EvaluationError, evaluate
from .model import ConfigError, ModelConfig, PoolingRatioError
from .report import ReportError, build_report
from .text import PromptError
from .train import AuditError, RunConfig, TrainingError, adapt, default_pretrain_config, pretrain, run_ablation

log = logging.getLogger("svdtune")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "SVDTUNE_OUTPUT_ROOT"

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def parse_bool(text: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {text!r}") from None


def _coerce(cls, name: str, text: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"unknown {cls.__name__} key {name!r}")
    hint = hints[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if args:  # Optional[...]
        if str(text).strip().lower() in ("", "none"):
            return None
        hint = args[0]
    try:
        if hint is bool:
            return parse_bool(text)
        if hint in (int, float, str):
            return hint(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigError(f"{name} cannot be set from text")


def read_config_file(path) -> Dict[str, dict]:
    """Parse an INI config file into ``{"run": {...}, "model": {...}, "toggles": {...}}`` with typed values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    unknown = set(parser.sections()) - {"run", "model", "toggles"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    out: Dict[str, dict] = {"run": {}, "model": {}, "toggles": {}}
    if parser.has_section("run"):
        for k, v in parser.items("run"):
            if k in ("model", "toggles"):
                raise ConfigError(f"{path}: use the [{k}] section")
            out["run"][k] = _coerce(RunConfig, k, v)
    if parser.has_section("model"):
        out["model"] = {k: _coerce(ModelConfig, k, v) for k, v in parser.items("model")}
    if parser.has_section("toggles"):
        for k, v in parser.items("toggles"):
            if k not in SVD_TOGGLES:
                raise ConfigError(f"{path}: unknown toggle {k!r}")
            out["toggles"][k] = parse_bool(v)
    return out


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _resolve_out(out_dir: Optional[str], default: str) -> str:
    p = Path(out_dir or default)
    return str(p if p.is_absolute() else output_root() / p)


def parse_toggles(items: Optional[List[str]]) -> Dict[str, bool]:
    out = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep or name not in SVD_TOGGLES:
            raise ConfigError(f"toggle must look like NAME=on|off with NAME in {SVD_TOGGLES}, got {item!r}")
        out[name] = parse_bool(value)
    return out


# --------------------------------------------------------------------------- argument parser

_RUN_FLAGS = {
    "method": str, "lr": float, "steps": int, "batch_size": int, "seed": int, "domain": str, "n_train": int,
    "n_eval": int, "data_seed": int, "eval_seed": int, "data_dir": str, "eval_dir": str, "warmup_steps": int,
    "target_image_size": int, "bce_weight": float, "dice_weight": float, "present_fraction": float,
    "log_every": int,
}


def _add_run_flags(p: argparse.ArgumentParser, pretrained: bool) -> None:
    for name, typ in _RUN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--include-attn-proj", dest="include_attn_proj", type=parse_bool, default=None,
                   metavar="on|off")
    p.add_argument("--train-bias", dest="train_bias", type=parse_bool, default=None, metavar="on|off")
    p.add_argument("--toggle", action="append", metavar="NAME=on|off",
                   help=f"spectral-adapter component switch, NAME in {', '.join(SVD_TOGGLES)}")
    p.add_argument("--image-size", type=int, default=None, help="model input size (pretraining)")
    p.add_argument("--out-dir", default=None)
    if pretrained:
        p.add_argument("--pretrained", default=None, help="pretrained checkpoint path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svdtune", description="Spectral fine-tuning of a toy promptable segmenter.")
    ap.add_argument("--config", help="INI config file; command-line flags override it")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the stand-in foundation model on the source domain")
    _add_run_flags(p, pretrained=False)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to the target domain")
    _add_run_flags(p, pretrained=True)

    p = sub.add_parser("ablation", help="run the cumulative component ablation over several seeds")
    _add_run_flags(p, pretrained=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--extra-methods", default="frozen,full", help="comma-separated extra baselines")

    p = sub.add_parser("evaluate", help="score a checkpoint with per-class DSC")
    p.add_argument("checkpoint")
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--eval-seed", type=int, default=12345)
    p.add_argument("--eval-dir", default=None, help="evaluate on an on-disk dataset instead")
    p.add_argument("--out", default=None, help="write the JSON result here")

    p = sub.add_parser("report", help="tables and charts from finished runs")
    p.add_argument("runs", nargs="*", help="run directories containing eval.json and param_report.json")
    p.add_argument("--ablation", default=None, help="ablation.json to tabulate")
    p.add_argument("--out-dir", default=None)

    p = sub.add_parser("gen-data", help="write a synthetic corpus to disk")
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--out-dir", default=None)
    return ap


# --------------------------------------------------------------------------- config assembly


def run_config(args: argparse.Namespace, base: RunConfig) -> RunConfig:
    """Merge defaults, the config file and command-line flags into a RunConfig."""
    file_cfg = read_config_file(args.config) if args.config else {"run": {}, "model": {}, "toggles": {}}
    run = dict(file_cfg["run"])
    for name in list(_RUN_FLAGS) + ["include_attn_proj", "train_bias", "pretrained"]:
        v = getattr(args, name, None)
        if v is not None:
            run[name] = v
    model = {**base.model.to_dict(), **file_cfg["model"]}
    if args.image_size is not None:
        model["image_size"] = args.image_size
    toggles = {**base.toggles, **file_cfg["toggles"], **parse_toggles(args.toggle)}
    cfg = base.replace(**run, model=ModelConfig.from_dict(model), toggles=toggles)
    cfg = cfg.replace(out_dir=_resolve_out(args.out_dir or run.get("out_dir"), f"{args.command}"))
    return cfg.validate()


def _cmd_pretrain(args) -> int:
    cfg = run_config(args, default_pretrain_config())
    ckpt = pretrain(cfg)
    print(f"pretrained checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_adapt(args) -> int:
    cfg = run_config(args, RunConfig())
    if cfg.pretrained is None:
        raise ConfigError("adapt needs --pretrained (or 'pretrained' in the config file)")
    ckpt, report = adapt(cfg)
    print(report.text(), end="")
    print(f"adapted checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_ablation(args) -> int:
    cfg = run_config(args, RunConfig())
    if cfg.pretrained is None:
        raise ConfigError("ablation needs --pretrained (or 'pretrained' in the config file)")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds {args.seeds!r}") from None
    extra = [m.strip() for m in args.extra_methods.split(",") if m.strip()]
    table = run_ablation(cfg, seeds=seeds, extra_methods=extra)
    for row in table["rows"]:
        print(f"{row['name']:<12} {row['mean']:.3f}  " + " ".join(f"{d:.3f}" for d in row["dsc"]))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model = load_model(args.checkpoint)
    size = model.config.image_size
    if args.eval_dir:
        ds = ingest(args.eval_dir, domain=args.domain)
    else:
        ds = generate(SOURCE if args.domain == "source" else TARGET, args.n_eval, args.eval_seed, image_size=size)
    result = evaluate(model, ds)
    print(result.table(Path(args.checkpoint).parent.name or "model"))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        result.save(out)
    return EXIT_OK


def _cmd_report(args) -> int:
    ablation = None
    if args.ablation:
        path = Path(args.ablation)
        if not path.exists():
            raise ReportError(f"ablation file not found: {path}")
        ablation = json.loads(path.read_text())
    written = build_report(args.runs, _resolve_out(args.out_dir, "report"), ablation)
    for name, path in written.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    spec: DomainShiftSpec = SOURCE if args.domain == "source" else TARGET
    ds = generate(spec, args.n_images, args.seed, image_size=args.image_size)
    root = write_dataset(ds, _resolve_out(args.out_dir, f"data/{args.domain}"))
    print(f"wrote {args.n_images} images ({len(ds)} queries) to {root}")
    return EXIT_OK


COMMANDS = {"pretrain": _cmd_pretrain, "adapt": _cmd_adapt, "ablation": _cmd_ablation,
            "evaluate": _cmd_evaluate, "report": _cmd_report, "gen-data": _cmd_gen_data}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PoolingRatioError, CheckpointError, AccountingError, PromptError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EvaluationError, ReportError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, AuditError) as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
