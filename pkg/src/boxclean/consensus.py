"""Consensus dataset construction.

The consensus set keeps only those expert labels that some crowd label
corroborates: an expert box survives when a crowd box covers strictly more
than ``delta`` of its area. The consensus model is trained on this set, so
it inherits the crowd's blind spots on purpose — objects the crowd never
annotated stay out, which is what makes its solo predictions (red region)
informative about crowd misses.
"""

from __future__ import annotations

from typing import Iterable

from .data import AnnotationSet, Label, Source
from .errors import StateError
from .geometry import overlap_fraction


def _corroborated(expert_label: Label, crowd_labels: Iterable[Label], delta: float) -> bool:
    # Fraction is measured over the expert box's area; any single crowd box
    # may corroborate any number of expert boxes.
    return any(
        overlap_fraction(crowd.box, expert_label.box) > delta for crowd in crowd_labels
    )


def build_consensus_increment(
    d_p: AnnotationSet,
    d_c: AnnotationSet,
    d_a_prev: AnnotationSet,
    image_ids: Iterable[int],
    delta: float = 0.5,
) -> AnnotationSet:
    """Grow the consensus set with corroborated expert labels of ``image_ids``.

    For each image, every expert label in ``d_p`` that some crowd label in
    ``d_c`` covers by strictly more than ``delta`` (of the expert box's area)
    is copied into the consensus set with source ``expert``. Images already in
    the consensus support are recomputed from the current inputs, replacing
    their stale entries; other images are untouched, so the result grows
    monotonically across loop iterations. Idempotent under repetition.
    """
    if not (0.0 < delta < 1.0):
        raise StateError(f"delta must be in (0, 1), got {delta}")
    image_ids = sorted(set(image_ids))
    missing = [i for i in image_ids if i not in d_p.covered_ids]
    if missing:
        raise StateError(
            f"consensus requested for images without expert annotations: {missing[:5]}"
        )
    new_by_image: dict[int, list[Label]] = {}
    for image_id in image_ids:
        crowd = d_c.labels_for(image_id)
        kept = [
            label
            for label in d_p.labels_for(image_id)
            if _corroborated(label, crowd, delta)
        ]
        new_by_image[image_id] = [
            Label(
                label_id=l.label_id,
                image_id=l.image_id,
                box=l.box,
                source=Source.EXPERT,
                category_id=l.category_id,
                confidence=1.0,
                provenance_note=l.provenance_note,
            )
            for l in kept
        ]
    # The previous consensus set may never have seen these images (fresh run,
    # first iteration), so extend its image table from the expert set.
    images = dict(d_a_prev.images)
    for image_id in image_ids:
        images[image_id] = d_p.images[image_id]
    labels = [l for l in d_a_prev.all_labels() if l.image_id not in new_by_image]
    for group in new_by_image.values():
        labels.extend(group)
    return AnnotationSet(
        Source.EXPERT,
        images,
        labels,
        covered_ids=d_a_prev.covered_ids | set(new_by_image),
        categories=d_p.categories or d_a_prev.categories,
    )
