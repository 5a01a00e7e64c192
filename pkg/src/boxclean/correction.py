"""Instance-level correction of the unselected images' crowd labels.

After the selection loop finishes, the final models predict on every image
that never saw an expert. Per image, the region partition drives a graded
response:

- merged-box (bib) greens are removed outright when a model box is covered
  almost entirely by the crowd box — the strongest single-box signature of
  two objects fused into one; the covering model box is kept as the label;
- gray clusters are trusted: the crowd box is snapped to the matched
  cleaning-model box (or stands, lacking one); model-only gray agreements
  are added as recovered misses;
- pink boxes (cleaning-model only) are added as recovered misses;
- what remains of red and green goes to a human review queue with model
  suggestions attached.

Reviewer decisions land in an append-only log; `apply_decisions`
materializes the final cleaned label set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .budget import Action, Actor, BudgetLedger
from .data import AnnotationSet, Label, Source, label_from_dict, label_to_dict
from .errors import ConfigError, DataFormatError, StateError
from .geometry import Box, iou, overlap_fraction
from .matching import RegionPartition, partition_image

SUGGESTION_IOU = 0.1  # predictions at least this close to a flagged box are offered


class ReviewStatus(str, Enum):
    PENDING = "pending"
    ACCEPTED = "accepted"
    EDITED = "edited"
    REJECTED = "rejected"
    ADDED_MISSING = "added_missing"


RESOLVED_STATUSES = frozenset(
    {ReviewStatus.ACCEPTED, ReviewStatus.EDITED, ReviewStatus.REJECTED, ReviewStatus.ADDED_MISSING}
)


@dataclass(frozen=True)
class ReviewItem:
    item_id: int
    image_id: int
    region: str  # "red" | "green"
    flagged: Label
    suggestions: tuple[Label, ...] = ()
    status: ReviewStatus = ReviewStatus.PENDING
    resolution: Box | None = None
    reviewer: str | None = None
    decided_at: str | None = None

    def resolved(self) -> bool:
        return self.status in RESOLVED_STATUSES

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "image_id": self.image_id,
            "region": self.region,
            "flagged": label_to_dict(self.flagged),
            "suggestions": [label_to_dict(s) for s in self.suggestions],
            "status": self.status.value,
            "resolution": list(self.resolution.as_xywh()) if self.resolution else None,
            "reviewer": self.reviewer,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ReviewItem":
        resolution = raw.get("resolution")
        return cls(
            item_id=int(raw["item_id"]),
            image_id=int(raw["image_id"]),
            region=str(raw["region"]),
            flagged=label_from_dict(raw["flagged"]),
            suggestions=tuple(label_from_dict(s) for s in raw.get("suggestions", [])),
            status=ReviewStatus(raw.get("status", "pending")),
            resolution=Box(*(float(v) for v in resolution)) if resolution else None,
            reviewer=raw.get("reviewer"),
            decided_at=raw.get("decided_at"),
        )


@dataclass(frozen=True)
class DecisionRecord:
    """One reviewer action; later records for the same item supersede earlier
    ones, but every record stays in the log."""

    item_id: int
    action: str  # accept | edit | reject | add_missing
    suggestion_id: int | None = None
    box: Box | None = None
    reviewer: str = "anonymous"
    decided_at: str | None = None

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "action": self.action,
            "suggestion_id": self.suggestion_id,
            "box": list(self.box.as_xywh()) if self.box else None,
            "reviewer": self.reviewer,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DecisionRecord":
        box = raw.get("box")
        return cls(
            item_id=int(raw["item_id"]),
            action=str(raw["action"]),
            suggestion_id=raw.get("suggestion_id"),
            box=Box(*(float(v) for v in box)) if box else None,
            reviewer=raw.get("reviewer", "anonymous"),
            decided_at=raw.get("decided_at"),
        )


_ACTION_TO_STATUS = {
    "accept": ReviewStatus.ACCEPTED,
    "edit": ReviewStatus.EDITED,
    "reject": ReviewStatus.REJECTED,
    "add_missing": ReviewStatus.ADDED_MISSING,
}


def resolve_item(item: ReviewItem, decision: DecisionRecord) -> ReviewItem:
    """Validate a decision against an item and return the updated item."""
    if decision.item_id != item.item_id:
        raise StateError(f"decision for item {decision.item_id} applied to item {item.item_id}")
    if decision.action not in _ACTION_TO_STATUS:
        raise DataFormatError(f"unknown decision action {decision.action!r}")
    status = _ACTION_TO_STATUS[decision.action]
    resolution: Box | None = None
    if status is ReviewStatus.ACCEPTED:
        match = [s for s in item.suggestions if s.label_id == decision.suggestion_id]
        if not match:
            raise DataFormatError(
                f"item {item.item_id}: unknown suggestion id {decision.suggestion_id}"
            )
        resolution = match[0].box
    elif status in (ReviewStatus.EDITED, ReviewStatus.ADDED_MISSING):
        if decision.box is None:
            raise DataFormatError(f"item {item.item_id}: {decision.action} needs a box")
        resolution = decision.box
    return replace(
        item,
        status=status,
        resolution=resolution,
        reviewer=decision.reviewer,
        decided_at=decision.decided_at,
    )


@dataclass(frozen=True)
class BibRemoval:
    green: Label
    witness: Label
    fraction: float


def bib_filter(
    greens: Sequence[Label],
    b_p: Sequence[Label],
    b_a: Sequence[Label],
    gamma: float = 0.8,
    witness_pool: Sequence[Label] | None = None,
) -> tuple[list[Label], list[BibRemoval]]:
    """Split crowd-only labels into retained ones and merged-box removals.

    A green label is removed when some witness box is covered by it for
    strictly more than ``gamma`` of the witness's own area — the witness box
    then stands in as the correct label. The default witness pool is the two
    models' predictions; pass ``witness_pool`` to use a different one.
    """
    if not (0.0 < gamma < 1.0):
        raise ConfigError(f"gamma must be in (0, 1), got {gamma}")
    pool = list(witness_pool) if witness_pool is not None else list(b_p) + list(b_a)
    retained: list[Label] = []
    removed: list[BibRemoval] = []
    for green in sorted(greens, key=lambda l: l.label_id):
        best: tuple[float, Label] | None = None
        for witness in sorted(pool, key=lambda l: l.label_id):
            if witness.image_id != green.image_id:
                continue
            fraction = overlap_fraction(green.box, witness.box)
            if fraction > gamma and (best is None or fraction > best[0]):
                best = (fraction, witness)
        if best is None:
            retained.append(green)
        else:
            removed.append(BibRemoval(green=green, witness=best[1], fraction=best[0]))
    return retained, removed


@dataclass
class AutoCorrectStats:
    gray_replaced: int = 0
    gray_untouched: int = 0
    gray_added: int = 0
    pink_added: int = 0
    bib_removed: int = 0
    bib_witness_added: int = 0


def _as_dataset_label(
    source_label: Label, label_id: int, note: str, category_id: int
) -> Label:
    return Label(
        label_id=label_id,
        image_id=source_label.image_id,
        box=source_label.box,
        source=Source.CROWD,
        category_id=category_id,
        confidence=1.0,
        provenance_note=note,
    )


def auto_correct(
    d_c: AnnotationSet,
    partitions: Mapping[int, RegionPartition],
    bib_removals: Sequence[BibRemoval] = (),
    next_label_id: int = 0,
) -> tuple[AnnotationSet, AutoCorrectStats, int]:
    """Apply the trusted corrections; red/green labels are left for review.

    Gray crowd boxes snap to their matched cleaning-model box; model-only
    agreements and pink boxes are added as recovered instances; bib-removed
    greens are dropped with their witness box added once (a witness that is
    itself a pink or gray member is not duplicated). Returns the corrected
    set, the action counts, and the next free label id.
    """
    if next_label_id <= 0:
        next_label_id = d_c.max_label_id() + 1
    stats = AutoCorrectStats()
    removed_ids = {r.green.label_id for r in bib_removals}
    stats.bib_removed = len(removed_ids)

    out_by_image: dict[int, list[Label]] = {
        image_id: [] for image_id in sorted(partitions)
    }
    added_prediction_ids: set[int] = set()

    for image_id in sorted(partitions):
        part = partitions[image_id]
        crowd_here = {l.label_id: l for l in d_c.labels_for(image_id)}
        out = out_by_image[image_id]
        for cluster in part.gray:
            crowd = cluster.member_from(Source.CROWD)
            model_p = cluster.member_from(Source.MODEL_P)
            if crowd is not None and model_p is not None:
                out.append(
                    _as_dataset_label(
                        model_p,
                        crowd.label_id,
                        f"auto:replaced:{model_p.label_id}",
                        crowd.category_id,
                    )
                )
                added_prediction_ids.add(model_p.label_id)
                stats.gray_replaced += 1
            elif crowd is not None:
                out.append(crowd)
                stats.gray_untouched += 1
            elif model_p is not None:
                out.append(
                    _as_dataset_label(
                        model_p, next_label_id, f"auto:agreed:{model_p.label_id}", model_p.category_id
                    )
                )
                added_prediction_ids.add(model_p.label_id)
                next_label_id += 1
                stats.gray_added += 1
            # model_a-only pairs cannot form a cluster (two sources required)
        for pink in part.pink:
            out.append(
                _as_dataset_label(pink, next_label_id, f"auto:pink:{pink.label_id}", pink.category_id)
            )
            added_prediction_ids.add(pink.label_id)
            next_label_id += 1
            stats.pink_added += 1
        for green in part.green:
            if green.label_id not in removed_ids and green.label_id in crowd_here:
                out.append(green)

    for removal in sorted(bib_removals, key=lambda r: r.green.label_id):
        witness = removal.witness
        if witness.label_id in added_prediction_ids:
            continue
        out_by_image.setdefault(witness.image_id, []).append(
            _as_dataset_label(
                witness, next_label_id, f"auto:bib-witness:{witness.label_id}", witness.category_id
            )
        )
        added_prediction_ids.add(witness.label_id)
        next_label_id += 1
        stats.bib_witness_added += 1

    corrected = d_c.replacing_images(out_by_image)
    return corrected, stats, next_label_id


def build_review_queue(
    reds: Sequence[Label],
    greens: Sequence[Label],
    b_p: Mapping[int, Sequence[Label]],
    b_a: Mapping[int, Sequence[Label]],
) -> list[ReviewItem]:
    """One pending item per red/green label, with overlapping predictions as
    confidence-sorted suggestions; ordered by (image, position)."""
    flagged = [("red", l) for l in reds] + [("green", l) for l in greens]
    flagged.sort(key=lambda rl: (rl[1].image_id, rl[1].box.x, rl[1].box.y, rl[1].label_id))
    items: list[ReviewItem] = []
    for item_id, (region, label) in enumerate(flagged, start=1):
        pool = list(b_p.get(label.image_id, ())) + list(b_a.get(label.image_id, ()))
        suggestions = [s for s in pool if iou(s.box, label.box) > SUGGESTION_IOU]
        suggestions.sort(key=lambda s: (-s.confidence, s.label_id))
        items.append(
            ReviewItem(
                item_id=item_id,
                image_id=label.image_id,
                region=region,
                flagged=label,
                suggestions=tuple(suggestions),
            )
        )
    return items


def apply_decisions(
    corrected: AnnotationSet,
    queue: Sequence[ReviewItem],
    next_label_id: int,
    ledger: BudgetLedger | None = None,
) -> AnnotationSet:
    """Materialize reviewer decisions into the final cleaned label set.

    Green items replace/drop the flagged crowd label; red items insert the
    resolved box. Inserted labels get ids deterministic in the item id, so
    re-applying the same resolved queue is a no-op. When a ledger is given,
    one review action per item is charged.
    """
    pending = [item.item_id for item in queue if not item.resolved()]
    if pending:
        raise StateError(f"queue has unresolved items: {pending[:10]}")
    by_image: dict[int, dict[int, Label]] = {}
    for label in corrected.all_labels():
        by_image.setdefault(label.image_id, {})[label.label_id] = label

    for item in queue:
        image_labels = by_image.setdefault(item.image_id, {})
        flagged_present = item.flagged.label_id in image_labels
        insert_id = next_label_id + item.item_id  # stable across re-application
        if item.status in (ReviewStatus.ACCEPTED, ReviewStatus.EDITED):
            if item.resolution is None:
                raise StateError(f"item {item.item_id}: resolved without a box")
            label = Label(
                label_id=item.flagged.label_id if item.region == "green" and flagged_present else insert_id,
                image_id=item.image_id,
                box=item.resolution,
                source=Source.CROWD,
                category_id=item.flagged.category_id,
                confidence=1.0,
                provenance_note=f"review:{item.status.value}:{item.item_id}",
            )
            image_labels[label.label_id] = label
        elif item.status is ReviewStatus.REJECTED:
            if item.region == "green" and flagged_present:
                del image_labels[item.flagged.label_id]
        elif item.status is ReviewStatus.ADDED_MISSING:
            if item.resolution is None:
                raise StateError(f"item {item.item_id}: resolved without a box")
            image_labels[insert_id] = Label(
                label_id=insert_id,
                image_id=item.image_id,
                box=item.resolution,
                source=Source.CROWD,
                category_id=item.flagged.category_id,
                confidence=1.0,
                provenance_note=f"review:added:{item.item_id}",
            )
    if ledger is not None and queue:
        ledger.charge(
            Actor.REVIEWER, Action.REVIEW_ITEM, len(queue), note="step2 review decisions"
        )
    final = {image_id: list(labels.values()) for image_id, labels in by_image.items()}
    return corrected.replacing_images(final)


@dataclass
class CorrectionReport:
    region_counts: dict[str, int] = field(default_factory=dict)
    auto: AutoCorrectStats = field(default_factory=AutoCorrectStats)
    queue_size_with_bib: int = 0
    queue_size_without_bib: int = 0
    decision_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "region_counts": dict(self.region_counts),
            "auto_correct": self.auto.__dict__,
            "queue_size_with_bib": self.queue_size_with_bib,
            "queue_size_without_bib": self.queue_size_without_bib,
            "decision_counts": dict(self.decision_counts),
        }


@dataclass(frozen=True)
class CorrectionConfig:
    gamma: float = 0.8
    iou_threshold: float = 0.5
    # Where merged-box witnesses may come from: the models' raw predictions
    # ("predictions", default) or the non-green partition members ("regions").
    bib_witness_source: str = "predictions"
    use_bib_filter: bool = True

    def __post_init__(self) -> None:
        if self.bib_witness_source not in ("predictions", "regions"):
            raise ConfigError(
                f"bib_witness_source must be 'predictions' or 'regions', got {self.bib_witness_source!r}"
            )


def partition_all(
    d_c: AnnotationSet,
    preds_p: Mapping[int, Sequence[Label]],
    preds_a: Mapping[int, Sequence[Label]],
    image_ids: Iterable[int],
    iou_threshold: float = 0.5,
) -> dict[int, RegionPartition]:
    return {
        image_id: partition_image(
            d_c.labels_for(image_id),
            preds_p.get(image_id, ()),
            preds_a.get(image_id, ()),
            iou_threshold,
        )
        for image_id in sorted(image_ids)
    }


def _witness_pool(
    part: RegionPartition,
    b_p: Sequence[Label],
    b_a: Sequence[Label],
    config: CorrectionConfig,
) -> list[Label]:
    if config.bib_witness_source == "predictions":
        return list(b_p) + list(b_a)
    pool = [m for cluster in part.gray for m in cluster.members]
    return pool + list(part.pink) + list(part.red)


def prepare_correction(
    d_c: AnnotationSet,
    preds_p: Mapping[int, Sequence[Label]],
    preds_a: Mapping[int, Sequence[Label]],
    image_ids: Iterable[int],
    config: CorrectionConfig = CorrectionConfig(),
    next_label_id: int = 0,
) -> tuple[AnnotationSet, list[ReviewItem], CorrectionReport, int]:
    """Everything before human review: partition, bib filter, auto-correct,
    queue construction. Returns (corrected set, pending queue, report, next id)."""
    image_ids = sorted(set(image_ids))
    partitions = partition_all(d_c, preds_p, preds_a, image_ids, config.iou_threshold)

    region_counts = {"gray_clusters": 0, "pink": 0, "red": 0, "green": 0}
    for part in partitions.values():
        region_counts["gray_clusters"] += len(part.gray)
        region_counts["pink"] += len(part.pink)
        region_counts["red"] += len(part.red)
        region_counts["green"] += len(part.green)

    retained_greens: list[Label] = []
    removals: list[BibRemoval] = []
    reds: list[Label] = []
    for image_id in image_ids:
        part = partitions[image_id]
        reds.extend(part.red)
        if config.use_bib_filter and part.green:
            pool = _witness_pool(
                part, preds_p.get(image_id, ()), preds_a.get(image_id, ()), config
            )
            kept, gone = bib_filter(
                part.green, (), (), gamma=config.gamma, witness_pool=pool
            )
            retained_greens.extend(kept)
            removals.extend(gone)
        else:
            retained_greens.extend(part.green)

    corrected, stats, next_label_id = auto_correct(
        d_c.restricted_to(image_ids), partitions, removals, next_label_id
    )
    queue = build_review_queue(reds, retained_greens, preds_p, preds_a)
    report = CorrectionReport(
        region_counts=region_counts,
        auto=stats,
        queue_size_with_bib=len(queue),
        queue_size_without_bib=len(queue) + len(removals),
    )
    return corrected, queue, report, next_label_id


def save_queue(items: Sequence[ReviewItem], path: str | Path) -> None:
    lines = [json.dumps(item.to_dict(), sort_keys=True) for item in items]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_queue(path: str | Path) -> list[ReviewItem]:
    items = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(ReviewItem.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, DataFormatError) as exc:
            raise DataFormatError(f"{path}:{n}: bad queue line: {exc}") from None
    return items


def load_decisions(path: str | Path) -> list[DecisionRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(DecisionRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, DataFormatError) as exc:
            raise DataFormatError(f"{path}:{n}: bad decision line: {exc}") from None
    return records


def materialize_queue(
    items: Sequence[ReviewItem], decisions: Sequence[DecisionRecord]
) -> list[ReviewItem]:
    """Replay the append-only decision log; the last decision per item wins."""
    by_id = {item.item_id: item for item in items}
    for decision in decisions:
        if decision.item_id not in by_id:
            raise StateError(f"decision references unknown item {decision.item_id}")
        by_id[decision.item_id] = resolve_item(by_id[decision.item_id], decision)
    return [by_id[item.item_id] for item in items]
