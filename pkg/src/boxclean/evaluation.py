"""Detection and dataset-quality metrics.

AP50 follows the COCO convention: confidence-ranked greedy matching at
IoU >= 0.5 and 101-point interpolated average precision, averaged over the
categories present in the ground truth.

Errors decompose into three classes — bkg (spurious box, IoU < 0.1 to every
truth), loc (overlaps a truth at [0.1, 0.5)), miss (truth no prediction
accounts for) — and each class is quantified as a dAP: the AP gained by
oracle-fixing only that class. Deleting a bkg box, snapping a loc box onto
its object, or injecting a missed truth as a top-ranked detection can only
help, so dAPs are non-negative up to float error.

Dataset quality treats candidate labels as confidence-1 predictions and
reports precision/recall/F1 at IoU 0.5 plus per-class error counts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .budget import BudgetLedger, CostModel, budget_percent
from .data import AnnotationSet, Label
from .geometry import iou

FG_IOU = 0.5  # a prediction at or above this matches a truth
BG_IOU = 0.1  # below this against every truth, a prediction is background

# Explicit marker for metrics that are undefined on empty ground truth.
NO_TRUTH = None


def flatten_predictions(per_image: Mapping[int, Sequence[Label]]) -> list[Label]:
    return [l for image_id in sorted(per_image) for l in per_image[image_id]]


def _rank_order(predictions: Iterable[Label]) -> list[Label]:
    # Ties resolve in dataset order (image, then label), matching how COCO
    # evaluators consume equal-score detections in file order. This matters
    # when labels are evaluated as predictions: every box carries the same
    # confidence, and a global id order would park late-minted ids at the end
    # of the curve instead of spreading them across it.
    return sorted(predictions, key=lambda l: (-l.confidence, l.image_id, l.label_id))


def _greedy_match(
    ranked: Sequence[Label], truths_by_image: Mapping[int, list[Label]]
) -> tuple[list[bool], dict[int, int]]:
    """Confidence-ordered one-to-one matching at FG_IOU.

    Returns a TP flag per ranked prediction and a map pred label_id -> matched
    truth label_id. Each truth is claimed at most once; among unclaimed truths
    the highest IoU wins (ties to the lower truth id).
    """
    claimed: set[int] = set()
    flags: list[bool] = []
    assignment: dict[int, int] = {}
    for pred in ranked:
        best_iou = 0.0
        best: Label | None = None
        for truth in truths_by_image.get(pred.image_id, []):
            if truth.label_id in claimed:
                continue
            overlap = iou(pred.box, truth.box)
            if overlap >= FG_IOU and (
                overlap > best_iou or (overlap == best_iou and best is not None and truth.label_id < best.label_id)
            ):
                best_iou, best = overlap, truth
        if best is None:
            flags.append(False)
        else:
            claimed.add(best.label_id)
            assignment[pred.label_id] = best.label_id
            flags.append(True)
    return flags, assignment


def _interpolated_ap(tp_flags: Sequence[bool], n_truth: int) -> float:
    """101-point interpolated AP from rank-ordered TP flags, as a fraction."""
    if n_truth == 0:
        raise ValueError("AP undefined without ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_truth
    # Precision envelope: best precision achievable at recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    indices = np.searchsorted(recall, points, side="left")
    sampled = np.where(indices < len(envelope), envelope[np.minimum(indices, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _split_by_category(
    predictions: Iterable[Label], ground_truth: AnnotationSet
) -> dict[int, tuple[list[Label], dict[int, list[Label]], int]]:
    """Per truth category: (ranked predictions, truths by image, truth count)."""
    truths_by_cat: dict[int, dict[int, list[Label]]] = {}
    counts: dict[int, int] = {}
    for truth in ground_truth.all_labels():
        truths_by_cat.setdefault(truth.category_id, {}).setdefault(truth.image_id, []).append(truth)
        counts[truth.category_id] = counts.get(truth.category_id, 0) + 1
    out = {}
    preds = list(predictions)
    for category_id, by_image in truths_by_cat.items():
        ranked = _rank_order(l for l in preds if l.category_id == category_id)
        out[category_id] = (ranked, by_image, counts[category_id])
    return out


def ap50(predictions: Iterable[Label], ground_truth: AnnotationSet) -> float | None:
    """Average precision at IoU 0.5, in percent; NO_TRUTH on empty truth."""
    per_cat = _split_by_category(predictions, ground_truth)
    if not per_cat:
        return NO_TRUTH
    values = []
    for ranked, by_image, n_truth in per_cat.values():
        flags, _ = _greedy_match(ranked, by_image)
        values.append(_interpolated_ap(flags, n_truth))
    return 100.0 * float(np.mean(values))


def _classify_errors(
    ranked: Sequence[Label], by_image: Mapping[int, list[Label]]
) -> tuple[dict[int, str], dict[int, int], set[int]]:
    """Error class per non-TP prediction, loc-fix targets, and missed truths.

    A false prediction is 'loc' when its best available truth overlap lands in
    [BG_IOU, FG_IOU); duplicates (overlap >= FG_IOU with an already-claimed
    truth) fold into 'loc' unless they are background against every other
    truth. Missed truths are those no TP claimed and no loc-class prediction
    covers at BG_IOU or better.
    """
    flags, assignment = _greedy_match(ranked, by_image)
    classes: dict[int, str] = {}
    loc_targets: dict[int, int] = {}
    covered: set[int] = set()
    for pred, is_tp in zip(ranked, flags):
        if is_tp:
            continue
        truths = by_image.get(pred.image_id, [])
        overlaps = sorted(
            ((iou(pred.box, t.box), t.label_id) for t in truths),
            key=lambda p: (-p[0], p[1]),
        )
        if not overlaps or overlaps[0][0] < BG_IOU:
            classes[pred.label_id] = "bkg"
            continue
        best_iou, best_id = overlaps[0]
        if best_iou >= FG_IOU:
            # Duplicate of a matched truth: background unless it meaningfully
            # overlaps some other truth.
            rest = [o for o in overlaps[1:] if o[0] >= BG_IOU]
            if rest:
                classes[pred.label_id] = "loc"
                loc_targets[pred.label_id] = best_id
                covered.add(best_id)
            else:
                classes[pred.label_id] = "bkg"
        else:
            classes[pred.label_id] = "loc"
            loc_targets[pred.label_id] = best_id
            covered.add(best_id)
    matched_truths = set(assignment.values())
    missed = {
        t.label_id
        for truths in by_image.values()
        for t in truths
        if t.label_id not in matched_truths and t.label_id not in covered
    }
    return classes, loc_targets, missed


def tide_decompose(
    predictions: Iterable[Label], ground_truth: AnnotationSet
) -> dict[str, float] | None:
    """dAP of oracle-fixing each error class alone, in percent points."""
    preds = list(predictions)
    base = ap50(preds, ground_truth)
    if base is NO_TRUTH:
        return NO_TRUTH
    per_cat = _split_by_category(preds, ground_truth)
    truth_by_id = {t.label_id: t for t in ground_truth.all_labels()}
    synth_ids = itertools.count(-(10**9))

    bkg_fixed: list[Label] = []
    loc_fixed: list[Label] = []
    miss_fixed: list[Label] = []
    for ranked, by_image, _ in per_cat.values():
        classes, loc_targets, missed = _classify_errors(ranked, by_image)
        bkg_fixed.extend(p for p in ranked if classes.get(p.label_id) != "bkg")

        # Truths claimed by TPs keep their claims while loc boxes are snapped.
        _, assignment = _greedy_match(ranked, by_image)
        claimed = set(assignment.values())
        for pred in ranked:
            cls = classes.get(pred.label_id)
            if cls == "loc":
                target = loc_targets[pred.label_id]
                if target in claimed:
                    continue  # snapping would duplicate; drop the prediction
                claimed.add(target)
                loc_fixed.append(pred.with_box(truth_by_id[target].box))
            else:
                loc_fixed.append(pred)

        miss_fixed.extend(ranked)
        for truth_id in sorted(missed):
            truth = truth_by_id[truth_id]
            miss_fixed.append(
                Label(
                    label_id=next(synth_ids),
                    image_id=truth.image_id,
                    box=truth.box,
                    source=ranked[0].source if ranked else truth.source,
                    category_id=truth.category_id,
                    confidence=1.0,
                )
            )
    return {
        "bkg_dap": ap50(bkg_fixed, ground_truth) - base,
        "loc_dap": ap50(loc_fixed, ground_truth) - base,
        "miss_dap": ap50(miss_fixed, ground_truth) - base,
    }


@dataclass(frozen=True)
class LabelQuality:
    precision: float | None
    recall: float
    f1: float | None
    matched: int
    candidate_count: int
    truth_count: int
    error_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matched": self.matched,
            "candidate_count": self.candidate_count,
            "truth_count": self.truth_count,
            "error_counts": dict(self.error_counts),
        }


def label_quality(
    candidate: AnnotationSet, ground_truth: AnnotationSet
) -> LabelQuality | None:
    """Precision/recall/F1 of a label set against truth at IoU 0.5."""
    truth_count = ground_truth.label_count
    if truth_count == 0:
        return NO_TRUTH
    as_preds = [
        Label(
            label_id=l.label_id,
            image_id=l.image_id,
            box=l.box,
            source=l.source,
            category_id=l.category_id,
            confidence=1.0,
        )
        for l in candidate.all_labels()
    ]
    per_cat = _split_by_category(as_preds, ground_truth)
    matched = 0
    errors = {"bkg": 0, "loc": 0, "miss": 0}
    seen_pred_ids: set[int] = set()
    for ranked, by_image, _ in per_cat.values():
        flags, assignment = _greedy_match(ranked, by_image)
        matched += sum(flags)
        seen_pred_ids.update(l.label_id for l in ranked)
        classes, _, missed = _classify_errors(ranked, by_image)
        for cls in classes.values():
            errors[cls] += 1
        errors["miss"] += len(missed)
    # Candidates in categories absent from truth are pure background.
    stray = len(as_preds) - len(seen_pred_ids)
    errors["bkg"] += stray
    candidate_count = len(as_preds)
    precision = matched / candidate_count if candidate_count else None
    recall = matched / truth_count
    if precision is None or (precision + recall) == 0:
        f1 = None if precision is None else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return LabelQuality(
        precision=precision,
        recall=recall,
        f1=f1,
        matched=matched,
        candidate_count=candidate_count,
        truth_count=truth_count,
        error_counts=errors,
    )


@dataclass
class EvalReport:
    """One Table-style result row; `tide_metric` records that the error
    breakdown is a dAP decomposition (not raw error counts)."""

    method: str
    ap50: float | None = None
    tide: dict[str, float] | None = None
    quality: LabelQuality | None = None
    budget: float | None = None
    tide_metric: str = "dap"
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ap50": self.ap50,
            "tide": dict(self.tide) if self.tide else None,
            "label_quality": self.quality.to_dict() if self.quality else None,
            "budget_percent": self.budget,
            "tide_metric": self.tide_metric,
            "notes": dict(self.notes),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        quality = raw.get("label_quality")
        return cls(
            method=raw["method"],
            ap50=raw.get("ap50"),
            tide=raw.get("tide"),
            quality=LabelQuality(
                precision=quality["precision"],
                recall=quality["recall"],
                f1=quality["f1"],
                matched=quality["matched"],
                candidate_count=quality["candidate_count"],
                truth_count=quality["truth_count"],
                error_counts=quality["error_counts"],
            )
            if quality
            else None,
            budget=raw.get("budget_percent"),
            tide_metric=raw.get("tide_metric", "dap"),
            notes=raw.get("notes", {}),
        )


def evaluate_labels(
    candidate: AnnotationSet,
    ground_truth: AnnotationSet,
    method: str = "labels",
    ledger: BudgetLedger | None = None,
    cost_model: CostModel | None = None,
) -> EvalReport:
    """Labels-as-predictions report: AP50 + dAP decomposition + quality."""
    as_preds = list(candidate.all_labels())
    budget = None
    if ledger is not None:
        budget = budget_percent(ledger, ground_truth.label_count, cost_model)
    return EvalReport(
        method=method,
        ap50=ap50(as_preds, ground_truth),
        tide=tide_decompose(as_preds, ground_truth),
        quality=label_quality(candidate, ground_truth),
        budget=budget,
    )


def render_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width comparison table: method, AP50, per-class dAP, F1, budget."""
    header = f"{'method':<24} {'AP50':>7} {'bkg':>7} {'miss':>7} {'loc':>7} {'F1':>7} {'budget%':>8}"
    lines = [header, "-" * len(header)]

    def fmt(value: float | None, width: int = 7) -> str:
        return f"{value:>{width}.2f}" if value is not None else f"{'—':>{width}}"

    for report in reports:
        tide = report.tide or {}
        f1 = report.quality.f1 if report.quality else None
        lines.append(
            f"{report.method:<24} {fmt(report.ap50)} {fmt(tide.get('bkg_dap'))} "
            f"{fmt(tide.get('miss_dap'))} {fmt(tide.get('loc_dap'))} "
            f"{fmt(100 * f1 if f1 is not None else None)} {fmt(report.budget, 8)}"
        )
    return "\n".join(lines)
