"""Command-line interface: train, eval, ablate, gradcheck, export-features, rerun.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or usage
error, 3 I/O error.  Data goes to stdout; categorized errors go to stderr.
Every command that writes artifacts also writes ``manifest.json`` next to
them, and ``rerun`` replays a manifest.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig, TaskKind
from .tensor.io import FormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

ABLATIONS = {
    "no-fcpg": {"fcpg": False},
    "no-spm": {"spm": False},
    "fixed-thresholds": {"fcpg_mode": "fixed"},
    "single-threshold": {"fcpg_mode": "single"},
    "channel-concat": {"concat": "channel"},
}


class UsageFailure(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    config: dict
    seed: int | None
    artifacts: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- config resolution -------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def resolve_configs(args) -> tuple[ModelConfig, "TrainConfig"]:
    from .train import TrainConfig
    raw = _read_config(getattr(args, "config", None))
    model_d = dict(raw.get("model", {}))
    train_d = dict(raw.get("train", {}))
    if getattr(args, "preset", None) == "tiny":
        model_d = {**ModelConfig.tiny().to_dict(), **model_d}
    flags_model = {"task": args.task, "seed": args.seed, "num_classes": getattr(args, "classes", None)}
    flags_train = {
        "task": args.task, "seed": args.seed, "max_iters": getattr(args, "iters", None),
        "lr": getattr(args, "lr", None), "batch_size": getattr(args, "batch_size", None),
        "num_samples": getattr(args, "samples", None), "crop": getattr(args, "size", None),
        "data_seed": getattr(args, "data_seed", None), "stage": getattr(args, "stage", None),
    }
    model_d.update({k: v for k, v in flags_model.items() if v is not None})
    train_d.update({k: v for k, v in flags_train.items() if v is not None})
    train_d.setdefault("task", model_d.get("task", "bcd"))
    model_d.setdefault("task", train_d["task"])
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _dataset(task: str, n: int, size: int, seed: int, mcfg: ModelConfig):
    from .data import generate_dataset
    return generate_dataset(task, n, size, size, seed, mcfg.num_classes, mcfg.damage_levels)


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import model_from_checkpoint, train
    from .model import ChangeModel
    init = None
    if args.init:
        init = ckpt.load(args.init)
        if not init.config:
            raise ConfigError(f"{args.init} has no config snapshot")
        args.task = args.task or init.task
    mcfg, tcfg = resolve_configs(args)
    if init is not None:
        mcfg = ModelConfig.from_dict(init.config["model"])
        if mcfg.task != tcfg.task:
            raise ConfigError(f"checkpoint task {mcfg.task} differs from requested {tcfg.task}")
    if tcfg.stage == 2 and init is None:
        raise UsageFailure("stage 2 needs --init with a stage-1 checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    samples = _dataset(tcfg.task, tcfg.num_samples, tcfg.crop, tcfg.data_seed, mcfg)
    model = ChangeModel(mcfg, dtype=np.dtype(tcfg.dtype)) if init is None else model_from_checkpoint(init)
    result, ck = train(model, samples, tcfg, init=init)
    ck_path = ckpt.save(out / "checkpoint.uckp", ck)
    trace = out / "trace.tsv"
    trace.write_text(result.trace_text())
    print(f"trained {result.steps} steps; final loss {result.totals[-1] if result.totals else float('nan'):.6f}")
    manifest = RunManifest("train", args.argv, args.config, {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
                           tcfg.seed, {"checkpoint": str(ck_path), "config": str(ckpt.config_path(ck_path)),
                                       "trace": str(trace)}, time.perf_counter() - t0)
    manifest.write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, model_from_checkpoint
    ck = ckpt.load(args.checkpoint)
    if args.task and args.task != ck.task:
        raise UsageFailure(f"checkpoint task {ck.task} does not match dataset task {args.task}")
    if args.samples < 1:
        raise UsageFailure("evaluation dataset is empty")
    t0 = time.perf_counter()
    model = model_from_checkpoint(ck)
    samples = _dataset(ck.task, args.samples, args.size, args.data_seed, model.cfg)
    report = evaluate(model, samples, dataset=args.dataset)
    print(report.to_csv() if args.format == "csv" else report.table(), end="\n" if args.format == "table" else "")
    if report.flags:
        print(f"warning[degenerate]: {', '.join(report.flags)}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        csv_path.write_text(report.to_csv())
        RunManifest("eval", args.argv, None, {"checkpoint": args.checkpoint, "samples": args.samples,
                                               "size": args.size, "data_seed": args.data_seed},
                    None, {"metrics": str(csv_path)}, time.perf_counter() - t0).write(out)
    return EXIT_OK


def ablation_variants(axis: str) -> list[str]:
    if axis == "all":
        return ["baseline", *ABLATIONS]
    if axis not in ABLATIONS:
        raise UsageFailure(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATIONS)} or all")
    return ["baseline", axis]


def run_variant(mcfg: ModelConfig, tcfg, samples, probe):
    """Stage 1 then stage 2 on ``samples``; returns the trained model and its metrics."""
    from dataclasses import replace
    from .analysis import distractor_response
    from .model import ChangeModel
    from .train import evaluate, train
    model = ChangeModel(mcfg, dtype=np.dtype(tcfg.dtype))
    _, ck1 = train(model, samples, replace(tcfg, stage=1))
    if tcfg.stage_split < 1:
        train(model, samples, replace(tcfg, stage=2), init=ck1)
    report = evaluate(model, samples)
    if probe:
        report.values["distractor_response"] = distractor_response(model, probe)
    return model, report


def cmd_ablate(args) -> int:
    from .data import dataset_hash
    from .metrics import comparison_table
    variants = ablation_variants(args.axis)
    mcfg, tcfg = resolve_configs(args)
    t0 = time.perf_counter()
    samples = _dataset(tcfg.task, tcfg.num_samples, tcfg.crop, tcfg.data_seed, mcfg)
    probe = _dataset(tcfg.task, args.probe, tcfg.crop, tcfg.data_seed + 1, mcfg) if args.probe else []
    digest = dataset_hash(samples)
    reports = []
    for name in variants:
        vcfg = mcfg if name == "baseline" else mcfg.replace(**ABLATIONS[name])
        _, rep = run_variant(vcfg, tcfg, samples, probe)
        rep.dataset = name
        reports.append(rep)
        print(f"finished variant {name}", file=sys.stderr)
    lines = ["variant,metric,value,dataset_hash"]
    for r in reports:
        lines += [f"{r.dataset},{k},{v!r},{digest}" for k, v in r.values.items()]
    csv_text = "\n".join(lines) + "\n"
    print(csv_text if args.format == "csv" else comparison_table(reports), end="" if args.format == "csv" else "\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(csv_text)
        RunManifest("ablate", args.argv, args.config, {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                                                       "variants": variants}, tcfg.seed,
                    {"table": str(out / "ablation.csv")}, time.perf_counter() - t0).write(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, format_report, run_suite
    if args.list:
        print("\n".join(c.name for c in CASES))
        return EXIT_OK
    names = args.only or None
    if names:
        unknown = set(names) - {c.name for c in CASES}
        if unknown:
            raise UsageFailure(f"unknown gradcheck cases: {sorted(unknown)}")
    t0 = time.perf_counter()
    results = run_suite(names, seed=args.seed, tol=args.tol)
    report = format_report(results)
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report + "\n")
        RunManifest("gradcheck", args.argv, None, {"only": names, "tol": args.tol}, args.seed,
                    {"report": str(out / "gradcheck.txt")}, time.perf_counter() - t0).write(out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_export_features(args) -> int:
    from .analysis import export_stage, feature_magnitude, pair_layout_mask, response_ratio, stage_features
    from .model import ChangeModel
    from .train import model_from_checkpoint
    stages = [1, 2, 3, 4] if args.stage == "all" else [_stage_number(args.stage)]
    t0 = time.perf_counter()
    if args.checkpoint:
        model = model_from_checkpoint(ckpt.load(args.checkpoint))
    else:
        preset = ModelConfig.tiny if args.preset == "tiny" else ModelConfig.toy
        model = ChangeModel(preset(task=args.task or "bcd", seed=args.seed or 0))
    task = model.cfg.task
    sample = _dataset(task, args.sample + 1, args.size, args.data_seed, model.cfg)[args.sample]
    levels = stage_features(model, sample)
    mask = sample.labels["change"] if "change" in sample.labels else sample.labels["loc"]
    out = Path(args.out)
    artifacts = {}
    print("stage,channels,height,width,inside_outside_ratio")
    for s in stages:
        lv = levels[s - 1]
        pgm, raw = export_stage(lv, out, s)
        artifacts[f"stage{s}_pgm"], artifacts[f"stage{s}_utsr"] = str(pgm), str(raw)
        mag = feature_magnitude(lv)
        ratio = response_ratio(mag, pair_layout_mask(mask, mag.shape, model.cfg.concat))
        print(f"{s},{lv.shape[0]},{lv.shape[1]},{lv.shape[2]},{ratio!r}")
    RunManifest("export-features", args.argv, None,
                {"checkpoint": args.checkpoint, "sample": args.sample, "stages": stages, "model": model.cfg.to_dict()},
                model.cfg.seed, artifacts, time.perf_counter() - t0).write(out)
    return EXIT_OK


def _stage_number(v: str) -> int:
    try:
        s = int(v)
    except ValueError:
        raise UsageFailure(f"stage must be 1..4 or all, got {v!r}") from None
    if not 1 <= s <= 4:
        raise UsageFailure(f"stage must be 1..4, got {s}")
    return s


def cmd_rerun(args) -> int:
    data = json.loads(Path(args.manifest).read_text())
    argv = list(data["argv"])
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    return main(argv)


# -- parser ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, train_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' objects")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--classes", type=int, help="semantic classes K for scd")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--toy", dest="preset", action="store_const", const="toy", help="default small model")
    group.add_argument("--tiny", dest="preset", action="store_const", const="tiny", help="smallest model")
    if train_flags:
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--samples", type=int)
        p.add_argument("--size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one stage on a synthetic dataset")
    _common(p)
    p.add_argument("--stage", type=int, choices=[1, 2])
    p.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a synthetic dataset")
    p.add_argument("checkpoint")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants under one seed")
    _common(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATIONS)} or all")
    p.add_argument("--probe", type=int, default=8, help="held-out scenes for the pseudo-change response")
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--only", nargs="*")
    p.add_argument("--list", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="also write the report and a manifest here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", help="dump per-stage prompt-refined feature maps")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--seed", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--toy", dest="preset", action="store_const", const="toy")
    group.add_argument("--tiny", dest="preset", action="store_const", const="tiny")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    p.add_argument("--stage", default="all", help="1..4 or all")
    p.add_argument("--out", default="runs/features")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("rerun", help="replay a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="write artifacts here instead of the original location")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .losses import ContractError, LabelError
    from .train import UsageError
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except (CheckpointError, FormatError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, UsageFailure, ContractError, LabelError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
