"""Datasets and label provenance, plus COCO-style JSON serialization.

A :class:`Label` is one bounding box with a source tag (crowd, expert, or one
of the two cleaning models) and a confidence. An :class:`AnnotationSet` maps
image ids to label lists over a shared image table and carries an explicit
coverage set, so "this image was annotated and found empty" is distinguishable
from "this image was never touched".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import DataFormatError
from .geometry import Box

DEFAULT_CATEGORIES = {1: "object"}


class Source(str, Enum):
    """Where a label came from. Human sources always carry confidence 1.0."""

    CROWD = "crowd"
    EXPERT = "expert"
    MODEL_P = "model_p"
    MODEL_A = "model_a"


HUMAN_SOURCES = frozenset({Source.CROWD, Source.EXPERT})


@dataclass(frozen=True)
class Label:
    """One bounding-box annotation or prediction."""

    label_id: int
    image_id: int
    box: Box
    source: Source
    category_id: int = 1
    confidence: float = 1.0
    provenance_note: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise DataFormatError(f"confidence must be in [0, 1], got {self.confidence!r}")
        if self.source in HUMAN_SOURCES and self.confidence != 1.0:
            raise DataFormatError(
                f"{self.source.value} labels must have confidence 1.0, got {self.confidence!r}"
            )

    def with_box(self, box: Box, note: str | None = None) -> "Label":
        return replace(self, box=box, provenance_note=note if note is not None else self.provenance_note)


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    width: float
    height: float
    file_name: str | None = None

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise DataFormatError(f"image {self.image_id}: width/height must be positive")


ImageTable = dict[int, ImageInfo]


class AnnotationSet:
    """Immutable per-image label collections over an image table.

    ``covered_ids`` marks images that the producing process actually looked
    at; it defaults to the images that carry at least one label.
    """

    def __init__(
        self,
        source: Source,
        images: ImageTable,
        labels: Iterable[Label] = (),
        covered_ids: Iterable[int] | None = None,
        categories: Mapping[int, str] | None = None,
    ) -> None:
        self.source = source
        self.images = images
        self.categories = dict(categories) if categories is not None else dict(DEFAULT_CATEGORIES)
        by_image: dict[int, list[Label]] = {}
        seen_ids: set[int] = set()
        for label in labels:
            if label.image_id not in images:
                raise DataFormatError(
                    f"label {label.label_id} references unknown image {label.image_id}"
                )
            if label.label_id in seen_ids:
                raise DataFormatError(f"duplicate label id {label.label_id}")
            seen_ids.add(label.label_id)
            by_image.setdefault(label.image_id, []).append(label)
        self._by_image: dict[int, tuple[Label, ...]] = {
            img: tuple(sorted(group, key=lambda l: l.label_id)) for img, group in by_image.items()
        }
        if covered_ids is None:
            self.covered_ids: frozenset[int] = frozenset(self._by_image)
        else:
            covered = frozenset(covered_ids)
            missing = covered - images.keys()
            if missing:
                raise DataFormatError(f"covered ids not in image table: {sorted(missing)[:5]}")
            if not set(self._by_image) <= covered:
                extra = sorted(set(self._by_image) - covered)
                raise DataFormatError(f"labels present on uncovered images: {extra[:5]}")
            self.covered_ids = covered

    def labels_for(self, image_id: int) -> tuple[Label, ...]:
        return self._by_image.get(image_id, ())

    def all_labels(self) -> Iterator[Label]:
        for image_id in sorted(self._by_image):
            yield from self._by_image[image_id]

    @property
    def label_count(self) -> int:
        return sum(len(g) for g in self._by_image.values())

    def max_label_id(self) -> int:
        return max((l.label_id for l in self.all_labels()), default=0)

    def label_ids(self) -> set[int]:
        return {l.label_id for l in self.all_labels()}

    def restricted_to(self, image_ids: Iterable[int]) -> "AnnotationSet":
        keep = set(image_ids)
        return AnnotationSet(
            self.source,
            self.images,
            (l for l in self.all_labels() if l.image_id in keep),
            covered_ids=self.covered_ids & keep,
            categories=self.categories,
        )

    def without_images(self, image_ids: Iterable[int]) -> "AnnotationSet":
        drop = set(image_ids)
        return AnnotationSet(
            self.source,
            self.images,
            (l for l in self.all_labels() if l.image_id not in drop),
            covered_ids=self.covered_ids - drop,
            categories=self.categories,
        )

    def merged_with(
        self, labels: Iterable[Label], covered_ids: Iterable[int] = ()
    ) -> "AnnotationSet":
        return AnnotationSet(
            self.source,
            self.images,
            list(self.all_labels()) + list(labels),
            covered_ids=self.covered_ids | set(covered_ids),
            categories=self.categories,
        )

    def replacing_images(self, new_by_image: Mapping[int, Sequence[Label]]) -> "AnnotationSet":
        kept = [l for l in self.all_labels() if l.image_id not in new_by_image]
        for image_id, group in new_by_image.items():
            kept.extend(group)
        return AnnotationSet(
            self.source,
            self.images,
            kept,
            covered_ids=self.covered_ids | set(new_by_image),
            categories=self.categories,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return (
            self.source == other.source
            and self._by_image == other._by_image
            and self.covered_ids == other.covered_ids
        )

    def __repr__(self) -> str:
        return (
            f"AnnotationSet({self.source.value}, images={len(self.images)}, "
            f"labels={self.label_count}, covered={len(self.covered_ids)})"
        )


def label_to_dict(label: Label) -> dict:
    """Compact JSON form used by queues and overlays (not COCO)."""
    out = {
        "label_id": label.label_id,
        "image_id": label.image_id,
        "bbox": list(label.box.as_xywh()),
        "source": label.source.value,
        "category_id": label.category_id,
        "confidence": label.confidence,
    }
    if label.provenance_note is not None:
        out["note"] = label.provenance_note
    return out


def label_from_dict(raw: Mapping) -> Label:
    x, y, w, h = (float(v) for v in raw["bbox"])
    return Label(
        label_id=int(raw["label_id"]),
        image_id=int(raw["image_id"]),
        box=Box(x, y, w, h),
        source=Source(raw["source"]),
        category_id=int(raw.get("category_id", 1)),
        confidence=float(raw.get("confidence", 1.0)),
        provenance_note=raw.get("note"),
    )


def _require(entry: Mapping, key: str, where: str):
    if key not in entry:
        raise DataFormatError(f"{where}: missing field {key!r}")
    return entry[key]


def load_coco(path: str | Path, source: Source) -> tuple[ImageTable, AnnotationSet]:
    """Load a COCO-style annotation file.

    Annotations become Labels tagged with ``source`` unless they carry an
    explicit ``source`` extension field (written by :func:`save_coco`, so
    mixed-provenance sets survive a round trip). Confidence is read from the
    ``score`` extension, defaulting to 1.0.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: top level must be an object")

    images: ImageTable = {}
    for entry in raw.get("images", []):
        image_id = int(_require(entry, "id", f"{path} images[]"))
        try:
            info = ImageInfo(
                image_id=image_id,
                width=float(_require(entry, "width", f"{path} image {image_id}")),
                height=float(_require(entry, "height", f"{path} image {image_id}")),
                file_name=entry.get("file_name"),
            )
        except (ValueError, DataFormatError) as exc:
            raise DataFormatError(f"{path}: image {image_id}: {exc}") from None
        images[image_id] = info

    categories = {
        int(c["id"]): str(c.get("name", f"category_{c['id']}")) for c in raw.get("categories", [])
    } or dict(DEFAULT_CATEGORIES)

    labels = []
    for entry in raw.get("annotations", []):
        ann_id = int(_require(entry, "id", f"{path} annotations[]"))
        where = f"{path}: annotation {ann_id}"
        bbox = _require(entry, "bbox", where)
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise DataFormatError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise DataFormatError(f"{where}: non-positive bbox size w={w} h={h}")
        score = float(entry.get("score", 1.0))
        if not (0.0 <= score <= 1.0):
            raise DataFormatError(f"{where}: score {score} outside [0, 1]")
        label_source = Source(entry["source"]) if "source" in entry else source
        try:
            labels.append(
                Label(
                    label_id=ann_id,
                    image_id=int(_require(entry, "image_id", where)),
                    box=Box(x, y, w, h),
                    source=label_source,
                    category_id=int(entry.get("category_id", 1)),
                    confidence=score,
                    provenance_note=entry.get("note"),
                )
            )
        except (ValueError, DataFormatError) as exc:
            raise DataFormatError(f"{where}: {exc}") from None

    covered = raw.get("covered_image_ids")
    annotations = AnnotationSet(
        source,
        images,
        labels,
        covered_ids=[int(i) for i in covered] if covered is not None else None,
        categories=categories,
    )
    return images, annotations


def coco_dict(images: ImageTable, annotations: AnnotationSet) -> dict:
    """COCO-style dict for ``annotations`` over ``images``; stable ordering."""
    image_entries = []
    for image_id in sorted(images):
        info = images[image_id]
        entry = {"id": info.image_id, "width": info.width, "height": info.height}
        if info.file_name is not None:
            entry["file_name"] = info.file_name
        image_entries.append(entry)
    ann_entries = []
    for label in annotations.all_labels():
        entry = {
            "id": label.label_id,
            "image_id": label.image_id,
            "category_id": label.category_id,
            "bbox": list(label.box.as_xywh()),
            "area": label.box.area,
            "iscrowd": 0,
            "score": label.confidence,
            "source": label.source.value,
        }
        if label.provenance_note is not None:
            entry["note"] = label.provenance_note
        ann_entries.append(entry)
    return {
        "images": image_entries,
        "annotations": ann_entries,
        "categories": [
            {"id": cid, "name": name} for cid, name in sorted(annotations.categories.items())
        ],
        "covered_image_ids": sorted(annotations.covered_ids),
    }


def save_coco(images: ImageTable, annotations: AnnotationSet, path: str | Path) -> None:
    """Inverse of :func:`load_coco` up to field ordering; deterministic bytes."""
    Path(path).write_text(json.dumps(coco_dict(images, annotations), sort_keys=True, indent=2) + "\n")
