"""Truth-backed stand-ins for the humans in the loop.

These make the full pipeline scriptable: the expert annotator returns ground
truth labels for whatever images it is asked about, and the reviewer resolves
queue items the way an idealized expert would — snap a flagged box onto the
object it belongs to, or reject it when there is no object left to claim.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .correction import DecisionRecord, ReviewItem
from .data import AnnotationSet, Label, Source
from .errors import StateError
from .geometry import iou

FIXED_TIMESTAMP = "1970-01-01T00:00:00+00:00"
# A flagged box must reach this IoU with an unclaimed truth to be salvaged.
CLAIM_IOU = 0.1
# A suggestion this close to the truth is accepted as-is instead of edited.
ACCEPT_IOU = 0.95


class TruthExpert:
    """Expert annotator oracle: returns exact ground-truth labels."""

    def __init__(self, truth: AnnotationSet) -> None:
        self.truth = truth

    def annotate(self, image_ids: Iterable[int]) -> list[Label]:
        out: list[Label] = []
        for image_id in sorted(set(image_ids)):
            if image_id not in self.truth.covered_ids:
                raise StateError(f"expert oracle has no truth for image {image_id}")
            for label in self.truth.labels_for(image_id):
                out.append(
                    Label(
                        label_id=label.label_id,
                        image_id=image_id,
                        box=label.box,
                        source=Source.EXPERT,
                        category_id=label.category_id,
                        confidence=1.0,
                    )
                )
        return out


class TruthReviewer:
    """Review oracle: resolves each flagged item against the ground truth.

    Truths already explained by the corrected dataset are claimed up front
    (flagged greens excepted — they are the ones under review), and each item
    then claims the best remaining truth overlapping its flagged box. With a
    near-exact suggestion the item is accepted; otherwise it is edited to the
    truth box; with nothing to claim it is rejected. Claims make the oracle
    idempotent against double-adding one object through two items.
    """

    def __init__(self, truth: AnnotationSet, reviewer: str = "truth-oracle") -> None:
        self.truth = truth
        self.reviewer = reviewer

    def decide(
        self, queue: Sequence[ReviewItem], corrected: AnnotationSet
    ) -> list[DecisionRecord]:
        flagged_green_ids = {
            item.flagged.label_id for item in queue if item.region == "green"
        }
        claimed_by_image: dict[int, set[int]] = {}
        for image_id in sorted({item.image_id for item in queue}):
            truths = self.truth.labels_for(image_id)
            existing = [
                l
                for l in corrected.labels_for(image_id)
                if l.label_id not in flagged_green_ids
            ]
            claimed: set[int] = set()
            pairs = sorted(
                (
                    (-iou(l.box, t.box), l.label_id, t.label_id)
                    for l in existing
                    for t in truths
                    if iou(l.box, t.box) >= 0.5
                ),
            )
            used: set[int] = set()
            for _, lid, tid in pairs:
                if lid in used or tid in claimed:
                    continue
                used.add(lid)
                claimed.add(tid)
            claimed_by_image[image_id] = claimed

        decisions: list[DecisionRecord] = []
        for item in sorted(queue, key=lambda i: i.item_id):
            claimed = claimed_by_image[item.image_id]
            best_iou, best = 0.0, None
            for truth in self.truth.labels_for(item.image_id):
                if truth.label_id in claimed:
                    continue
                overlap = iou(item.flagged.box, truth.box)
                if overlap >= CLAIM_IOU and overlap > best_iou:
                    best_iou, best = overlap, truth
            if best is None:
                decisions.append(
                    DecisionRecord(
                        item_id=item.item_id,
                        action="reject",
                        reviewer=self.reviewer,
                        decided_at=FIXED_TIMESTAMP,
                    )
                )
                continue
            claimed.add(best.label_id)
            acceptable = [
                s for s in item.suggestions if iou(s.box, best.box) >= ACCEPT_IOU
            ]
            if acceptable:
                decisions.append(
                    DecisionRecord(
                        item_id=item.item_id,
                        action="accept",
                        suggestion_id=acceptable[0].label_id,
                        reviewer=self.reviewer,
                        decided_at=FIXED_TIMESTAMP,
                    )
                )
            else:
                decisions.append(
                    DecisionRecord(
                        item_id=item.item_id,
                        action="edit",
                        box=best.box,
                        reviewer=self.reviewer,
                        decided_at=FIXED_TIMESTAMP,
                    )
                )
        return decisions
