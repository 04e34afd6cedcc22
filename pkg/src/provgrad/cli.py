"""Command-line entry point: generate / train / ablate / eval.

Config files are JSON with three optional sections: ``data`` (dataset spec
fields, plus ``kind``: "image" or "skeleton"), ``train`` (training config
fields) and ``ablation`` (``seeds``, ``parts``, ``alpha_grid``, ``jobs``).
Every field has a default; flags override file values, which override the
defaults.  The ``PROVGRAD_OUT`` environment variable supplies the root that
relative ``--out`` paths resolve against.

Timestamps and wall-clock figures live only in each run's ``manifest.json``;
every other artifact is byte-deterministic in (config, seed).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from typing import Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .ablation import (
    ALPHA_GRID,
    AblationError,
    SUITE_PARTS,
    config_hash,
    deterministic_summary,
    run_ablation_suite,
    write_metrics_csv,
)
from .datasets import (
    DatasetError,
    ToyImageSpec,
    ToySkeletonSpec,
    generate_image_dataset,
    write_dataset,
)
from .evaluation import EvaluationError, evaluate_model, saliency_map
from .guidance import MASK_MODES, GuidanceError
from .models import ModelError, load_checkpoint, save_checkpoint
from .synthesis import SynthesisError, heatmap_to_pgm
from .training import TrainConfig, TrainingError, substream, train

ENV_OUT_ROOT = "PROVGRAD_OUT"


class CLIError(ValueError):
    """Bad invocation or config file."""


_USER_ERRORS = (
    CLIError,
    DatasetError,
    TrainingError,
    ModelError,
    SynthesisError,
    GuidanceError,
    EvaluationError,
    AblationError,
    OSError,
)


def _known_fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _build_dataclass(cls, section: dict, prefix: str):
    unknown = set(section) - _known_fields(cls)
    if unknown:
        name = sorted(unknown)[0]
        raise CLIError(f"unknown config field {prefix}.{name}")
    fixed = {
        k: tuple(v) if isinstance(v, list) else v for k, v in section.items()
    }  # JSON has no tuples; level lists arrive as lists
    return cls(**fixed)


def load_config_doc(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CLIError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CLIError(f"config file {path} must hold a JSON object")
    for section in doc:
        if section not in ("data", "train", "ablation"):
            raise CLIError(f"unknown config section {section!r}")
    return doc


def resolve_data_spec(doc: dict):
    section = dict(doc.get("data", {}))
    kind = section.pop("kind", "image")
    if kind == "image":
        return _build_dataclass(ToyImageSpec, section, "data")
    if kind == "skeleton":
        return _build_dataclass(ToySkeletonSpec, section, "data")
    raise CLIError(f"data.kind must be 'image' or 'skeleton', got {kind!r}")


def resolve_train_config(doc: dict, args) -> TrainConfig:
    config = _build_dataclass(TrainConfig, dict(doc.get("train", {})), "train")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "mask_mode", None) is not None:
        overrides["mask_mode"] = args.mask_mode
    return dataclasses.replace(config, **overrides) if overrides else config


def resolve_out_dir(out: str) -> str:
    if os.path.isabs(out):
        return out
    return os.path.join(os.environ.get(ENV_OUT_ROOT, "."), out)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out_dir: str, config, data_spec, chash: str, paths: Sequence[str], extra=None):
    doc = {
        "run_id": f"{time.strftime('%Y%m%dT%H%M%S')}-s{getattr(config, 'seed', 0)}",
        "version": __version__,
        "config_hash": chash,
        "resolved_config": dataclasses.asdict(config) if config is not None else None,
        "resolved_data_spec": dataclasses.asdict(data_spec),
        "data_kind": type(data_spec).__name__,
        "paths": list(paths),
    }
    if extra:
        doc.update(extra)
    _write_json(os.path.join(out_dir, "manifest.json"), doc)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_generate(args) -> int:
    doc = load_config_doc(args.config)
    spec = resolve_data_spec(doc)
    if not isinstance(spec, ToyImageSpec):
        raise CLIError("generate writes the binary image format; data.kind must be 'image'")
    seed = args.seed if args.seed is not None else 0
    out_dir = resolve_out_dir(args.out)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split in ("train", "test"):
        ds = generate_image_dataset(spec, split, substream(seed, f"dataset_{split}"))
        path = os.path.join(out_dir, f"{split}.bin")
        write_dataset(path, ds)
        paths[split] = path
    sidecar = {
        "spec": dataclasses.asdict(spec),
        "seed": seed,
        "files": {split: os.path.basename(p) for split, p in paths.items()},
        "sha256": {split: _sha256_file(p) for split, p in paths.items()},
    }
    _write_json(os.path.join(out_dir, "dataset.json"), sidecar)
    _manifest(out_dir, None, spec, config_hash(TrainConfig(seed=seed), spec), list(paths.values()))
    print(f"wrote {paths['train']} and {paths['test']}")
    return 0


def cmd_train(args) -> int:
    doc = load_config_doc(args.config)
    spec = resolve_data_spec(doc)
    config = resolve_train_config(doc, args)
    out_dir = resolve_out_dir(args.out)
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(config, spec)
    run_id = f"train-{chash[:12]}"

    result = train(config, spec)

    csv_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(csv_path, run_id, result.metrics)
    summary = deterministic_summary(run_id, chash, config, result)
    summary["data_spec"] = dataclasses.asdict(spec)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    ckpt_prefix = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt_prefix, result.model)
    _manifest(
        out_dir,
        config,
        spec,
        chash,
        [csv_path, ckpt_prefix + ".params", ckpt_prefix + ".json"],
        extra={
            "wall_clock_s": result.summary()["wall_clock_s"],
            "per_epoch_wall_clock_s": result.summary()["per_epoch_wall_clock_s"],
        },
    )
    final = result.metrics[-1]
    print(
        f"{run_id}: {config.epochs} epochs, final test accuracy "
        f"{final['test_accuracy']:.4f}, best epoch {result.best_epoch}"
    )
    return 0


def cmd_ablate(args) -> int:
    doc = load_config_doc(args.config)
    spec = resolve_data_spec(doc)
    config = resolve_train_config(doc, args)
    section = dict(doc.get("ablation", {}))
    unknown = set(section) - {"seeds", "parts", "alpha_grid", "jobs"}
    if unknown:
        raise CLIError(f"unknown config field ablation.{sorted(unknown)[0]}")
    seeds = tuple(int(s) for s in section.get("seeds", (0, 1, 2)))
    parts = tuple(section.get("parts", SUITE_PARTS))
    alpha_grid = tuple(float(a) for a in section.get("alpha_grid", ALPHA_GRID))
    jobs = args.jobs if args.jobs is not None else int(section.get("jobs", 1))
    out_dir = resolve_out_dir(args.out)

    report = run_ablation_suite(
        config, spec, out_dir, seeds=seeds, parts=parts, alpha_grid=alpha_grid, jobs=jobs
    )
    _manifest(
        out_dir,
        config,
        spec,
        config_hash(config, spec),
        [report.csv_path],
        extra={"num_runs": len(report.rows), "num_failed": report.num_failed},
    )
    print(f"{len(report.rows)} runs, {report.num_failed} failed -> {report.csv_path}")
    if not report.all_ok:
        failed = [r["run_id"] for r in report.rows if r["status"] != "ok"]
        raise AblationError(f"{len(failed)} runs failed: {', '.join(failed[:5])}")
    return 0


def cmd_eval(args) -> int:
    doc = load_config_doc(args.config)
    spec = resolve_data_spec(doc)
    if not isinstance(spec, ToyImageSpec):
        raise CLIError("eval scores the image task; data.kind must be 'image'")
    config = resolve_train_config(doc, args)
    out_dir = resolve_out_dir(args.out)
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    test_ds = generate_image_dataset(spec, "test", substream(config.resolved_data_seed, "dataset_test"))
    metrics = evaluate_model(model, test_ds, include_box=True, limit=config.box_eval_limit)
    _write_json(
        os.path.join(out_dir, "eval.json"),
        {"checkpoint": args.checkpoint, "metrics": metrics},
    )
    for i in range(min(4, len(test_ds))):
        sal = saliency_map(model, test_ds.image(i), test_ds.label(i))
        heatmap_to_pgm(sal, os.path.join(out_dir, f"saliency_{i}.pgm"))
    _manifest(out_dir, config, spec, config_hash(config, spec), [os.path.join(out_dir, "eval.json")])
    print(json.dumps(metrics, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="provgrad",
        description="Synthesis with exact provenance masks plus input-gradient-guided training.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the root seed")

    gen = sub.add_parser("generate", help="write the binary dataset files")
    common(gen)

    tr = sub.add_parser("train", help="run one training configuration")
    common(tr)
    tr.add_argument("--alpha", type=float, help="override the penalty weight")
    tr.add_argument("--mask-mode", choices=MASK_MODES, help="override the mask source")

    ab = sub.add_parser("ablate", help="run the ablation suite")
    common(ab)
    ab.add_argument("--alpha", type=float, help="override the base penalty weight")
    ab.add_argument("--mask-mode", choices=MASK_MODES)
    ab.add_argument("--jobs", type=int, help="parallel workers for suite runs")

    ev = sub.add_parser("eval", help="score a saved checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", required=True, help="checkpoint path prefix")
    ev.add_argument("--alpha", type=float, help=argparse.SUPPRESS)
    ev.add_argument("--mask-mode", choices=MASK_MODES, help=argparse.SUPPRESS)
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _USER_ERRORS as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(err), file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            out_dir = resolve_out_dir(out)
            try:
                os.makedirs(out_dir, exist_ok=True)
                _write_json(os.path.join(out_dir, "error.json"), err)
            except OSError:
                pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
