# helpers/ablate_helpers.py

import asyncio
import itertools
import logging
import os
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config import settings
from errors import CeclError, UsageError
from models import (
    AblationReport,
    AblationRow,
    AblationRunError,
    AblationRunResult,
    AblationRunSuccess,
    NEG_TYPES,
    TrainConfig,
)
from services.evaluation_service import bootstrap_ci

logger = logging.getLogger(__name__)

THRESHOLD_AXIS = "threshold"


class GridPoint:
    def __init__(self, name: str, overrides: Dict[str, Any]):
        self.name = name
        self.overrides = overrides

    def __repr__(self) -> str:
        return f"GridPoint({self.name!r})"


def _expand_axis_value(key: str, value: Any) -> Dict[str, Any]:
    """`threshold = "fixed:5"` is shorthand for threshold_mode + fixed_threshold."""
    if key != THRESHOLD_AXIS:
        return {key: value}
    if value == "adaptive":
        return {"threshold_mode": "adaptive"}
    match = re.fullmatch(r"fixed:(\d+(?:\.\d+)?)", str(value))
    if not match:
        raise UsageError(f"threshold axis value {value!r} must be 'adaptive' or 'fixed:V'")
    return {"threshold_mode": "fixed", "fixed_threshold": float(match.group(1))}


def _label(value: Any) -> str:
    if isinstance(value, list):
        return "+".join(str(v.value if hasattr(v, "value") else v) for v in value) or "none"
    return str(value).lower() if isinstance(value, bool) else str(value)


def expand_grid(grid: Dict[str, Any]) -> Tuple[List[GridPoint], Optional[str]]:
    """
    Grid file layout:
      baseline = "<point name>"          optional
      [axes]   key = [v1, v2, ...]       cartesian product, in file order
      [[points]] name = "...", plus overrides   explicit extra points
    """
    axes: Dict[str, List[Any]] = grid.get("axes", {}) or {}
    points: List[GridPoint] = []
    for key, values in axes.items():
        if not isinstance(values, list) or not values:
            raise UsageError(f"grid axis {key!r} must be a non-empty list")
    if axes:
        keys = list(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            overrides: Dict[str, Any] = {}
            for key, value in zip(keys, combo):
                overrides.update(_expand_axis_value(key, value))
            name = ",".join(f"{key}={_label(value)}" for key, value in zip(keys, combo))
            points.append(GridPoint(name, overrides))
    for entry in grid.get("points", []) or []:
        entry = dict(entry)
        name = entry.pop("name", None)
        if not name:
            raise UsageError("every [[points]] entry needs a name")
        overrides = {}
        for key, value in entry.items():
            overrides.update(_expand_axis_value(key, value))
        points.append(GridPoint(name, overrides))

    names = [p.name for p in points]
    if len(set(names)) != len(names):
        raise UsageError("grid point names must be unique")
    baseline = grid.get("baseline")
    if baseline is not None and baseline not in names:
        raise UsageError(f"baseline {baseline!r} is not a grid point")
    return points, baseline


def validate_points(base: Dict[str, Any], points: Sequence[GridPoint]) -> None:
    """Every point must form a valid TrainConfig before any run starts."""
    for point in points:
        try:
            TrainConfig.model_validate({**base, **point.overrides})
        except ValidationError as e:
            raise UsageError(f"grid point {point.name!r} is not a valid config: {e}") from e


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]+", "_", name) or "point"


def run_grid_point(
    point_name: str,
    overrides: Dict[str, Any],
    seed: int,
    base: Dict[str, Any],
    data_path: str,
    items_path: str,
    out_dir: str,
) -> AblationRunResult:
    """One training + eval run. Runs in a worker process; never raises."""
    from helpers.eval_helpers import evaluate_items, scoring_model_from_checkpoint
    from helpers.manifest_helpers import read_jsonl
    from helpers.train_helpers import load_checkpoint, train
    from models import BenchItem, DatasetRecord

    try:
        config = TrainConfig.model_validate({**base, **overrides, "seed": seed})
        run_dir = os.path.join(out_dir, "runs", _slug(point_name), f"seed{seed}")
        records = read_jsonl(data_path, DatasetRecord)
        items = read_jsonl(items_path, BenchItem)
        result = train(config, records, run_dir)
        model = scoring_model_from_checkpoint(load_checkpoint(result.checkpoint_path))
        report, _ = evaluate_items(model, items)
        return AblationRunResult(success=True, result=AblationRunSuccess(
            point=point_name,
            seed=seed,
            overrides=overrides,
            report=report,
            final_thresholds=result.state.thresholds.as_dict(),
        ))
    except CeclError as e:
        return AblationRunResult(success=False, error_info=AblationRunError(point=point_name, seed=seed, error=f"{type(e).__name__}: {e}"))
    except Exception as e:
        return AblationRunResult(success=False, error_info=AblationRunError(
            point=point_name, seed=seed, error=f"{type(e).__name__}: {e}", detail=traceback.format_exc(),
        ))


async def _run_all(
    points: Sequence[GridPoint],
    seeds: Sequence[int],
    base: Dict[str, Any],
    data_path: str,
    items_path: str,
    out_dir: str,
    max_workers: int,
) -> List[AblationRunResult]:
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        tasks = [
            loop.run_in_executor(pool, run_grid_point, p.name, p.overrides, s, base, data_path, items_path, out_dir)
            for p in points
            for s in seeds
        ]
        results = await asyncio.gather(*tasks, return_exceptions=True)

    final: List[AblationRunResult] = []
    for (point, seed), result in zip(itertools.product(points, seeds), results):
        if isinstance(result, BaseException):
            logger.error(f"Ablate: worker for {point.name} seed {seed} died: {result}")
            final.append(AblationRunResult(success=False, error_info=AblationRunError(point=point.name, seed=seed, error=repr(result))))
        else:
            final.append(result)
    return final


def aggregate(
    points: Sequence[GridPoint],
    results: Sequence[AblationRunResult],
    baseline: Optional[str] = None,
    n_resamples: Optional[int] = None,
    confidence: Optional[float] = None,
) -> AblationReport:
    """Keyed merge: rows follow grid order and seeds sort ascending, whatever order results arrive in."""
    n_resamples = settings.bootstrap_resamples if n_resamples is None else n_resamples
    confidence = settings.bootstrap_confidence if confidence is None else confidence
    by_point: Dict[str, Dict[int, AblationRunSuccess]] = {p.name: {} for p in points}
    errors: List[AblationRunError] = []
    for result in results:
        if result.success and result.result is not None:
            by_point.setdefault(result.result.point, {})[result.result.seed] = result.result
        elif result.error_info is not None:
            errors.append(result.error_info)
    errors.sort(key=lambda e: (e.point, e.seed))

    baseline_runs = by_point.get(baseline, {}) if baseline else {}
    rows: List[AblationRow] = []
    for point in points:
        runs = by_point.get(point.name, {})
        failures = sum(1 for e in errors if e.point == point.name)
        if not runs:
            logger.warning(f"Ablate: no successful runs for {point.name}.")
            continue
        seeds = sorted(runs)
        overall = [runs[s].report.overall_accuracy for s in seeds]
        per_type: Dict[str, float] = {}
        for k in [t.value for t in NEG_TYPES]:
            values = [runs[s].report.per_type_accuracy[k] for s in seeds if k in runs[s].report.per_type_accuracy]
            if values:
                per_type[k] = float(np.mean(values))
        low, high = bootstrap_ci(overall, n_resamples, confidence, seed=0)
        diff_ci = None
        common = [s for s in seeds if s in baseline_runs]
        if baseline and point.name != baseline and common:
            diffs = [runs[s].report.overall_accuracy - baseline_runs[s].report.overall_accuracy for s in common]
            diff_ci = list(bootstrap_ci(diffs, n_resamples, confidence, seed=0))
        rows.append(AblationRow(
            point=point.name,
            overrides=point.overrides,
            seeds=seeds,
            overall_mean=float(np.mean(overall)),
            overall_ci=[low, high],
            per_type_mean=per_type,
            per_seed_overall=overall,
            diff_vs_baseline_ci=diff_ci,
            failures=failures,
        ))
    return AblationReport(baseline=baseline, rows=rows, errors=errors)


def run_ablation(
    grid: Dict[str, Any],
    base: Dict[str, Any],
    seeds: Sequence[int],
    data_path: str,
    items_path: str,
    out_dir: str,
    max_workers: Optional[int] = None,
) -> AblationReport:
    points, baseline = expand_grid(grid)
    if not points:
        logger.info("Ablate: grid is empty; nothing to run.")
        return AblationReport(baseline=baseline)
    validate_points(base, points)
    workers = max(1, max_workers or settings.max_concurrent_runs)
    logger.info(f"Ablate: {len(points)} points x {len(seeds)} seeds on {workers} worker(s).")
    results = asyncio.run(_run_all(points, seeds, base, data_path, items_path, out_dir, workers))
    report = aggregate(points, results, baseline)
    logger.info(f"Ablate: {len(report.rows)} rows, {len(report.errors)} failed runs.")
    return report


def render_ablation_table(report: AblationReport) -> str:
    types = [t.value for t in NEG_TYPES]
    header = ["point", "seeds", "overall", "ci"] + types + (["diff_ci"] if report.baseline else []) + ["failures"]
    rows = [header]
    for row in report.rows:
        cells = [
            row.point + (" *" if row.point == report.baseline else ""),
            str(len(row.seeds)),
            f"{row.overall_mean:.4f}",
            f"[{row.overall_ci[0]:.4f}, {row.overall_ci[1]:.4f}]",
        ]
        cells += [f"{row.per_type_mean[k]:.4f}" if k in row.per_type_mean else "-" for k in types]
        if report.baseline:
            cells.append(f"[{row.diff_vs_baseline_ci[0]:+.4f}, {row.diff_vs_baseline_ci[1]:+.4f}]" if row.diff_vs_baseline_ci else "-")
        cells.append(str(row.failures))
        rows.append(cells)
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    return "\n".join("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip() for r in rows)
