# helpers/eval_helpers.py

import csv
import logging
import os
from typing import Dict, List, Optional, Sequence

from config import settings
from models import AnalysisBlock, BenchItem, CheckpointFile, EvalReport, MetricsRecord, NEG_TYPES
from services.encoder_service import params_from_checkpoint
from services.evaluation_service import (
    EncoderScoringModel,
    PairScore,
    modality_gap_stats,
    per_item_rows,
    recall_table,
    report_from_scores,
    score_items,
)
from services.text_processing_service import Vocabulary
from helpers.manifest_helpers import write_json

logger = logging.getLogger(__name__)

REPORT_NAME = "eval_report.json"
PER_ITEM_NAME = "per_item_scores.csv"
ANALYSIS_NAME = "analysis.json"
LOSS_SERIES = ("itc_hn", "imc", "cmr", "cmr_hinge", "cmr_rel", "total", "temperature", "mean_pos_sim")


def scoring_model_from_checkpoint(ckpt: CheckpointFile) -> EncoderScoringModel:
    return EncoderScoringModel(params_from_checkpoint(ckpt), Vocabulary(ckpt.vocabulary, ckpt.text_ngrams))


def evaluate_items(
    model: EncoderScoringModel,
    items: Sequence[BenchItem],
    recall_ks: Optional[Sequence[int]] = None,
) -> tuple[EvalReport, List[PairScore]]:
    scores = score_items(model, items)
    report = report_from_scores(scores, len(items))
    if recall_ks:
        report.recall = recall_table(model, items, recall_ks)
    return report, scores


def render_report_table(report: EvalReport) -> str:
    """Aligned-column text table of accuracies, then recall if present."""
    rows = [("type", "pairs", "correct", "accuracy")]
    for k in [t.value for t in NEG_TYPES]:
        if k in report.per_type_pairs:
            rows.append((k, str(report.per_type_pairs[k]), str(report.per_type_correct[k]), f"{report.per_type_accuracy[k]:.4f}"))
    rows.append(("ALL", str(report.total_pairs), str(report.correct_pairs), f"{report.overall_accuracy:.4f}"))
    lines = _align(rows)
    if report.recall:
        lines.append("")
        lines += _align([("retrieval", "value")] + [(k, f"{v:.4f}") for k, v in report.recall.items()])
    return "\n".join(lines)


def render_analysis_table(block: AnalysisBlock) -> str:
    rows = [("type", "n", "intra_mean", "intra_ci", "gap_mean", "gap_ci")]
    for k, intra in block.intra_modal.items():
        gap = block.cross_modal_gap[k]
        rows.append((
            k,
            str(intra.n),
            f"{intra.mean:.4f}",
            f"[{intra.ci_low:.4f}, {intra.ci_high:.4f}]",
            f"{gap.mean:.4f}",
            f"[{gap.ci_low:.4f}, {gap.ci_high:.4f}]",
        ))
    return "\n".join(_align(rows))


def _align(rows: List[Sequence[str]]) -> List[str]:
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    return ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip() for row in rows]


def write_per_item_csv(path: str, scores: Sequence[PairScore]) -> None:
    rows = per_item_rows(scores)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["item_id", "type", "positive_score", "negative_score", "correct"])
        writer.writeheader()
        writer.writerows(rows)


def run_eval(
    ckpt: CheckpointFile,
    items: Sequence[BenchItem],
    out_dir: str,
    recall_ks: Optional[Sequence[int]] = None,
    per_item_csv: bool = True,
) -> tuple[EvalReport, Dict[str, str]]:
    """Writes the EvalReport JSON (and per-item CSV); returns the report and artifact paths."""
    model = scoring_model_from_checkpoint(ckpt)
    report, scores = evaluate_items(model, items, recall_ks)
    paths = {"report": os.path.join(out_dir, REPORT_NAME)}
    write_json(paths["report"], report)
    if per_item_csv:
        paths["per_item"] = os.path.join(out_dir, PER_ITEM_NAME)
        write_per_item_csv(paths["per_item"], scores)
    logger.info(f"Eval: {report.items} items, {report.total_pairs} pairs, accuracy {report.overall_accuracy:.4f}.")
    return report, paths


def run_analyze(
    ckpt: CheckpointFile,
    items: Sequence[BenchItem],
    out_dir: str,
    n_resamples: Optional[int] = None,
    confidence: Optional[float] = None,
    seed: int = 0,
) -> tuple[AnalysisBlock, str]:
    model = scoring_model_from_checkpoint(ckpt)
    block = modality_gap_stats(
        model,
        items,
        n_resamples=settings.bootstrap_resamples if n_resamples is None else n_resamples,
        confidence=settings.bootstrap_confidence if confidence is None else confidence,
        seed=seed,
    )
    path = os.path.join(out_dir, ANALYSIS_NAME)
    write_json(path, block)
    return block, path


def write_series(metrics: Sequence[MetricsRecord], out_dir: str) -> Dict[str, str]:
    """One `step,value` CSV per threshold type and per loss component."""
    os.makedirs(out_dir, exist_ok=True)
    series: Dict[str, List[tuple]] = {}
    for record in metrics:
        for k, value in record.thresholds.items():
            series.setdefault(f"threshold_{k}", []).append((record.step, value))
        for name in LOSS_SERIES:
            series.setdefault(name, []).append((record.step, getattr(record, name)))
    paths = {}
    for name, points in series.items():
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "value"])
            writer.writerows(points)
        paths[name] = path
    logger.info(f"Analyze: wrote {len(paths)} series to {out_dir}.")
    return paths
