"""Command-line orchestration.

Commands: generate, pretrain, estimate-shift, adapt, evaluate. All
randomness flows from --seed (or the config's seed) through named
substreams. Exit codes: 0 success, 2 input error, 3 schema/dimension
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import adapt as adapt_mod
from . import shift as shift_mod
from .errors import (
    CheckpointError,
    DatasetFormatError,
    DimensionError,
    NumericError,
    ShiftRangeError,
    TmlabError,
    ValidationError,
)
from .eval_metrics import evaluate
from .model import ModelDims, load_checkpoint, save_checkpoint
from .rng import stream
from .sits_data import (
    Dataset,
    ScenarioSpec,
    UNKNOWN_CLASS,
    generate_domain,
    load_dataset,
    remap_to_classes,
    save_dataset,
    select_frequent_classes,
    split_dataset,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4

METHODS = ("timematch", "fixmatch", "source_only", "shiftaug_source")
METRICS = ("am", "is", "entropy")


# ---------------------------------------------------------------------------
# Config


@dataclass
class RunConfig:
    train: adapt_mod.TrainConfig = field(default_factory=adapt_mod.TrainConfig)
    d_h: int = 64
    d_e: int = 64
    d_k: int = 16
    d_v: int = 64
    min_class_examples: int = 200

    def dims_for(self, dataset: Dataset) -> ModelDims:
        return ModelDims(
            n_channels=dataset.n_channels,
            n_classes=dataset.n_classes,
            d_h=self.d_h, d_e=self.d_e, d_k=self.d_k, d_v=self.d_v,
        )


_TRAIN_KEYS = set(adapt_mod.TrainConfig().to_dict())
_MODEL_KEYS = {"d_h", "d_e", "d_k", "d_v"}
_DATA_KEYS = {"min_class_examples"}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    """Parse either JSON or flat dotted `key = value` lines."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad JSON config: {exc}") from exc
    nested: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"config line {lineno}: key clash at {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return nested


def build_run_config(data: dict) -> RunConfig:
    cfg = RunConfig()
    data = dict(data)
    if "seed" in data:
        cfg.train.seed = int(data.pop("seed"))
    for section, payload in data.items():
        if not isinstance(payload, dict):
            raise ValidationError(f"unknown top-level config key {section!r}")
        if section == "train":
            for key, value in payload.items():
                if key not in _TRAIN_KEYS:
                    raise ValidationError(f"unknown config key train.{key}")
                setattr(cfg.train, key, type(getattr(cfg.train, key))(value))
        elif section == "model":
            for key, value in payload.items():
                if key not in _MODEL_KEYS:
                    raise ValidationError(f"unknown config key model.{key}")
                setattr(cfg, key, int(value))
        elif section == "data":
            for key, value in payload.items():
                if key not in _DATA_KEYS:
                    raise ValidationError(f"unknown config key data.{key}")
                setattr(cfg, key, int(value))
        else:
            raise ValidationError(f"unknown config section {section!r}")
    # the CLI enforces the strict threshold range; the API allows > 1 as an
    # explicit off-switch for pseudo-labeling
    cfg.train.validate(strict_threshold=True)
    if min(cfg.d_h, cfg.d_e, cfg.d_k, cfg.d_v) < 1 or cfg.d_e % 2 != 0:
        raise ValidationError("model dims must be positive and d_e even")
    if cfg.min_class_examples < 0:
        raise ValidationError("min_class_examples must be >= 0")
    return cfg


def load_run_config(path, seed_override=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        cfg = build_run_config(parse_config_text(Path(path).read_text()))
    if seed_override is not None:
        if seed_override < 0:
            raise ValidationError("seed must be >= 0")
        cfg.train.seed = seed_override
    return cfg


# ---------------------------------------------------------------------------
# Helpers


def _load_split(data_dir, split) -> Dataset:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return load_dataset(path)


def _check_classes(model_classes, dataset: Dataset):
    missing = set(model_classes) - {UNKNOWN_CLASS} - set(dataset.class_names)
    if missing or UNKNOWN_CLASS not in dataset.class_names:
        raise DimensionError(
            f"dataset classes {dataset.class_names} cannot be mapped onto "
            f"model classes {list(model_classes)}"
        )


def _json_print(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    scenario_path = Path(args.scenario)
    if not scenario_path.exists():
        raise FileNotFoundError(f"missing scenario file {scenario_path}")
    try:
        scenario = ScenarioSpec.from_dict(json.loads(scenario_path.read_text()))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad scenario JSON: {exc}") from exc
    out = Path(args.out)
    for domain_id in scenario.domains:
        gen_seed = int(stream(args.seed, f"data:{domain_id}").integers(2**31))
        dataset = generate_domain(scenario, domain_id, gen_seed)
        dom_dir = out / domain_id
        dom_dir.mkdir(parents=True, exist_ok=True)
        save_dataset(dataset, dom_dir / "full.jsonl")
        split_rng = stream(args.seed, f"split:{domain_id}")
        train, val, test = split_dataset(dataset, (0.7, 0.1, 0.2), split_rng)
        save_dataset(train, dom_dir / "train.jsonl")
        save_dataset(val, dom_dir / "val.jsonl")
        save_dataset(test, dom_dir / "test.jsonl")
        _json_print({
            "domain": domain_id,
            "n": len(dataset.samples),
            "splits": {"train": len(train.samples), "val": len(val.samples),
                       "test": len(test.samples)},
            "out": str(dom_dir),
        })
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    train_ds = _load_split(args.source, "train")
    try:
        val_ds = _load_split(args.source, "val")
    except FileNotFoundError:
        val_ds = None
    train_ds = select_frequent_classes(train_ds, cfg.min_class_examples)
    if val_ds is not None:
        val_ds = remap_to_classes(val_ds, train_ds.class_names)
    result = adapt_mod.pretrain_source(
        train_ds, cfg.train, shiftaug=args.shiftaug, val_dataset=val_ds,
        dims=cfg.dims_for(train_ds),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out)
    log_path = Path(str(out) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.write(json.dumps({
            "summary": {
                "best_epoch": result.best_epoch,
                "shiftaug": bool(args.shiftaug),
                "classes": list(result.params.class_names),
            }
        }, sort_keys=True) + "\n")
    _json_print({
        "checkpoint": str(out),
        "log": str(log_path),
        "best_epoch": result.best_epoch,
        "classes": list(result.params.class_names),
        "shiftaug": bool(args.shiftaug),
    })
    return EXIT_OK


def cmd_estimate_shift(args) -> int:
    params, _ = load_checkpoint(args.model)
    target = _load_split(args.target, "train")
    if target.n_channels != params.dims.n_channels:
        raise DimensionError("target channels do not match the model")
    max_shift = params.posenc.max_shift if args.max_shift is None else args.max_shift
    if max_shift < 0 or max_shift > params.posenc.max_shift:
        raise ShiftRangeError(
            f"--max-shift must be in [0, {params.posenc.max_shift}]"
        )
    curves = shift_mod.score_curves(params, target, max_shift,
                                    sample_cap=args.cap, seed=args.seed)
    if args.metric == "am":
        est = shift_mod.estimate_temporal_shift(
            params, target, max_shift, sample_cap=args.cap, seed=args.seed)
    elif args.metric == "is":
        est = shift_mod.estimate_shift_is(
            params, target, max_shift, sample_cap=args.cap, seed=args.seed)
    else:
        est = shift_mod.estimate_shift_entropy(
            params, target, max_shift, sample_cap=args.cap, seed=args.seed)

    csv_path = Path(args.out_csv)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("shift,entropy,is,am\n")
        for delta in sorted(curves["entropy"]):
            fh.write(f"{delta},{curves['entropy'][delta]!r},"
                     f"{curves['is'][delta]!r},{curves['am'][delta]!r}\n")
    _json_print({
        "delta": est.delta_t_to_s,
        "metric": est.metric,
        "class_distribution": (
            None if est.class_distribution_used is None
            else [float(v) for v in est.class_distribution_used]
        ),
        "curve_csv": str(csv_path),
    })
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    init, _ = load_checkpoint(args.init)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else Path(str(out) + ".report.jsonl")

    if args.method in ("source_only", "shiftaug_source"):
        save_checkpoint(init, out)
        report = adapt_mod.AdaptReport(method=args.method)
        report.summary = {"method": args.method, "epochs": 0,
                          "n_estimation_calls": 0, "seed": cfg.train.seed}
    else:
        source = _load_split(args.source, "train")
        target = _load_split(args.target, "train")
        _check_classes(init.class_names, source)
        _check_classes(init.class_names, target)
        source = remap_to_classes(source, init.class_names)
        target = remap_to_classes(target, init.class_names)
        if args.method == "timematch":
            student, report = adapt_mod.timematch(source, target, init, cfg.train)
        else:
            student, report = adapt_mod.fixmatch_baseline(source, target, init, cfg.train)
        save_checkpoint(student, out)

    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json_lines(), encoding="utf-8")
    _json_print({"checkpoint": str(out), "report": str(report_path),
                 "method": args.method, "epochs": len(report.epochs)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, _ = load_checkpoint(args.model)
    dataset = _load_split(args.data, args.split)
    _check_classes(params.class_names, dataset)
    dataset = remap_to_classes(dataset, params.class_names)
    result = evaluate(params, dataset, domain_tag=args.domain, shift=args.shift)
    _json_print(result.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmlab",
        description="Temporal-shift estimation and self-training adaptation "
                    "for irregular pixel-set time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize datasets from a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train a model on labeled source data")
    p.add_argument("--config", default=None)
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shiftaug", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("estimate-shift", help="estimate the target-to-source day shift")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--metric", choices=METRICS, default="am")
    p.add_argument("--cap", type=int, default=shift_mod.DEFAULT_SAMPLE_CAP)
    p.add_argument("--max-shift", type=int, default=None)
    p.add_argument("--out-csv", default="shift_scores.csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_estimate_shift)

    p = sub.add_parser("adapt", help="run an adaptation method from a source-trained model")
    p.add_argument("--config", default=None)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="full-resolution evaluation of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "full"), default="test")
    p.add_argument("--shift", type=int, default=0)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValidationError, ShiftRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DatasetFormatError, CheckpointError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TmlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
