"""Ablation suite: alpha sweep, mask-mode controls, mask-perturbation grid.

Each run lives in its own directory keyed by a content hash of its resolved
configuration, which is what makes interrupted suites resumable: a run whose
deterministic summary already exists under the same hash is loaded, not
re-executed.  Failures become rows too; the suite always finishes.

Everything written here except the per-run manifest is byte-deterministic in
(config, data spec).  Wall-clock numbers go to the manifest only.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .training import TrainConfig, TrainResult, train

ALPHA_GRID = (0.0, 0.01, 0.03, 0.05, 0.07, 0.09)
PERTURB_GRID = (("none", 0.0), ("dilate", 0.10), ("dilate", 0.30), ("erode", 0.10), ("erode", 0.30))
SUITE_PARTS = ("alpha", "mask", "perturb")
DEFAULT_CONTROL_ALPHA = 0.05

METRIC_COLUMNS = (
    "epoch",
    "l_cls",
    "l_pg",
    "l_total",
    "test_accuracy",
    "worst_group_accuracy",
    "gradient_mass",
    "box_loc_30",
    "box_loc_50",
    "box_loc_70",
    "box_loc_mean",
    "num_synthetic",
    "num_penalized",
    "num_skipped_same_class",
    "peak_tape_bytes",
)
_INTEGRAL_COLUMNS = {
    "epoch",
    "num_synthetic",
    "num_penalized",
    "num_skipped_same_class",
    "peak_tape_bytes",
    "best_epoch",
    "seed",
}

SUITE_COLUMNS = (
    "run_id",
    "part",
    "seed",
    "synthesis",
    "alpha",
    "mask_mode",
    "mask_perturb",
    "mask_perturb_delta",
    "status",
    "best_epoch",
    "best_test_accuracy",
    "final_test_accuracy",
    "final_worst_group_accuracy",
    "final_gradient_mass",
    "final_box_loc_30",
    "final_box_loc_50",
    "final_box_loc_70",
    "final_box_loc_mean",
    "final_l_cls",
    "final_l_pg",
    "final_l_total",
    "config_hash",
    "error",
)


class AblationError(RuntimeError):
    pass


def _fmt(column: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if column in _INTEGRAL_COLUMNS:
        return str(int(value))
    return repr(float(value))


def config_hash(config: TrainConfig, data_spec) -> str:
    doc = {
        "config": dataclasses.asdict(config),
        "data": dataclasses.asdict(data_spec),
        "data_kind": type(data_spec).__name__,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_metrics_csv(path: str, run_id: str, rows: Sequence[Dict[str, float]]) -> None:
    """One line per epoch, RFC 4180, float values via repr so rewrites of the
    same run are byte-identical."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("run_id",) + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([run_id] + [_fmt(c, row.get(c)) for c in METRIC_COLUMNS])


def write_suite_csv(path: str, rows: Sequence[Dict[str, object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUITE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(c, row.get(c)) for c in SUITE_COLUMNS])


def deterministic_summary(run_id: str, chash: str, config: TrainConfig, result: TrainResult) -> dict:
    s = result.summary()
    return {
        "run_id": run_id,
        "config_hash": chash,
        "status": "ok",
        "config": dataclasses.asdict(config),
        "epochs": s["epochs"],
        "best_epoch": s["best_epoch"],
        "best": s["best"],
        "final": s["final"],
        "peak_tape_bytes": s["peak_tape_bytes"],
    }


def _suite_row(plan_entry: dict, summary: dict) -> Dict[str, object]:
    row = {
        "run_id": plan_entry["run_id"],
        "part": plan_entry["part"],
        "seed": plan_entry["config"].seed,
        "synthesis": plan_entry["config"].synthesis,
        "alpha": plan_entry["config"].alpha,
        "mask_mode": plan_entry["config"].mask_mode,
        "mask_perturb": plan_entry["config"].mask_perturb,
        "mask_perturb_delta": plan_entry["config"].mask_perturb_delta,
        "config_hash": plan_entry["hash"],
        "status": summary["status"],
        "error": summary.get("error", ""),
    }
    if summary["status"] == "ok":
        final = summary["final"]
        row["best_epoch"] = summary["best_epoch"]
        row["best_test_accuracy"] = summary["best"]["test_accuracy"]
        for key in (
            "test_accuracy",
            "worst_group_accuracy",
            "gradient_mass",
            "box_loc_30",
            "box_loc_50",
            "box_loc_70",
            "box_loc_mean",
            "l_cls",
            "l_pg",
            "l_total",
        ):
            if key in final:
                row[f"final_{key}"] = final[key]
    return row


def build_plan(
    base_config: TrainConfig,
    data_spec,
    seeds: Sequence[int],
    parts: Sequence[str],
    alpha_grid: Sequence[float] = ALPHA_GRID,
) -> List[dict]:
    """Expand the suite into concrete (run_id, config) entries.

    The mask and perturb parts need a live penalty, so they run at the base
    config's alpha when it is positive and at a fixed default otherwise.
    """
    for part in parts:
        if part not in SUITE_PARTS:
            raise AblationError(f"unknown suite part {part!r}; valid parts are {SUITE_PARTS}")
    if not seeds:
        raise AblationError("need at least one seed")
    control_alpha = base_config.alpha if base_config.alpha > 0 else DEFAULT_CONTROL_ALPHA
    plan: List[dict] = []

    def add(part: str, config: TrainConfig) -> None:
        chash = config_hash(config, data_spec)
        run_id = (
            f"{part}-a{config.alpha:g}-{config.mask_mode}"
            f"-{config.mask_perturb}{config.mask_perturb_delta:g}"
            f"-s{config.seed}-{chash[:12]}"
        )
        plan.append({"part": part, "config": config, "hash": chash, "run_id": run_id})

    if "alpha" in parts:
        for alpha in alpha_grid:
            for seed in seeds:
                add(
                    "alpha",
                    replace(
                        base_config,
                        alpha=float(alpha),
                        seed=int(seed),
                        mask_mode="provenance",
                        mask_perturb="none",
                        mask_perturb_delta=0.0,
                    ),
                )
    if "mask" in parts:
        for mode in ("provenance", "random", "unmasked"):
            for seed in seeds:
                add(
                    "mask",
                    replace(
                        base_config,
                        alpha=control_alpha,
                        seed=int(seed),
                        mask_mode=mode,
                        mask_perturb="none",
                        mask_perturb_delta=0.0,
                    ),
                )
    if "perturb" in parts:
        for mode, delta in PERTURB_GRID:
            for seed in seeds:
                add(
                    "perturb",
                    replace(
                        base_config,
                        synthesis="simulated_edit",
                        alpha=control_alpha,
                        seed=int(seed),
                        mask_mode="provenance",
                        mask_perturb=mode,
                        mask_perturb_delta=float(delta),
                    ),
                )
    return plan


def execute_run(config: TrainConfig, data_spec, run_dir: str, run_id: str, chash: str) -> dict:
    """Train one configuration and write its artifacts.  Returns the
    deterministic summary document; never raises on training failure."""
    os.makedirs(run_dir, exist_ok=True)
    started = time.time()
    try:
        result = train(config, data_spec)
    except Exception as exc:
        doc = {
            "run_id": run_id,
            "config_hash": chash,
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
        }
        with open(os.path.join(run_dir, "error.json"), "w", encoding="utf-8") as fh:
            json.dump({**doc, "traceback": traceback.format_exc()}, fh, indent=2)
            fh.write("\n")
        return doc
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), run_id, result.metrics)
    summary = deterministic_summary(run_id, chash, config, result)
    with open(os.path.join(run_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = {
        "run_id": run_id,
        "config_hash": chash,
        "started_unix": started,
        "wall_clock_s": result.summary()["wall_clock_s"],
        "per_epoch_wall_clock_s": result.summary()["per_epoch_wall_clock_s"],
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _pool_worker(args: Tuple) -> dict:
    config, data_spec, run_dir, run_id, chash = args
    return execute_run(config, data_spec, run_dir, run_id, chash)


def _load_completed(run_dir: str, chash: str) -> Optional[dict]:
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    if doc.get("config_hash") != chash or doc.get("status") != "ok":
        return None
    return doc


@dataclass
class AblationReport:
    rows: List[Dict[str, object]]
    csv_path: str

    def select(self, **filters) -> List[Dict[str, object]]:
        out = []
        for row in self.rows:
            if all(row.get(k) == v for k, v in filters.items()):
                out.append(row)
        return out

    @property
    def num_failed(self) -> int:
        return sum(1 for r in self.rows if r["status"] != "ok")

    @property
    def all_ok(self) -> bool:
        return self.num_failed == 0


def run_ablation_suite(
    base_config: TrainConfig,
    data_spec,
    out_dir: str,
    seeds: Sequence[int] = (0, 1, 2),
    parts: Sequence[str] = SUITE_PARTS,
    alpha_grid: Sequence[float] = ALPHA_GRID,
    jobs: int = 1,
) -> AblationReport:
    """Run (or resume) every configured run and merge one CSV row per run."""
    if jobs < 1:
        raise AblationError(f"jobs must be at least 1, got {jobs}")
    os.makedirs(out_dir, exist_ok=True)
    plan = build_plan(base_config, data_spec, seeds, parts, alpha_grid)

    pending = []
    summaries: Dict[str, dict] = {}
    for entry in plan:
        run_dir = os.path.join(out_dir, entry["run_id"])
        done = _load_completed(run_dir, entry["hash"])
        if done is not None:
            summaries[entry["run_id"]] = done
        else:
            pending.append((entry["config"], data_spec, run_dir, entry["run_id"], entry["hash"]))

    if pending:
        if jobs == 1:
            results = [_pool_worker(args) for args in pending]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_pool_worker, pending))
        for doc in results:
            summaries[doc["run_id"]] = doc

    rows = [_suite_row(entry, summaries[entry["run_id"]]) for entry in plan]
    csv_path = os.path.join(out_dir, "suite.csv")
    write_suite_csv(csv_path, rows)
    return AblationReport(rows=rows, csv_path=csv_path)
