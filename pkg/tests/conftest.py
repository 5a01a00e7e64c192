"""Shared test helpers: small factories for boxes, labels, and datasets."""

from __future__ import annotations

import numpy as np
import pytest

from boxclean.data import AnnotationSet, ImageInfo, Label, Source
from boxclean.geometry import Box


def box(x: float = 0.0, y: float = 0.0, w: float = 10.0, h: float = 10.0) -> Box:
    return Box(x, y, w, h)


def label(
    label_id: int,
    image_id: int = 1,
    b: Box | None = None,
    source: Source = Source.CROWD,
    confidence: float | None = None,
    category_id: int = 1,
) -> Label:
    if confidence is None:
        confidence = 1.0 if source in (Source.CROWD, Source.EXPERT) else 0.5
    return Label(
        label_id=label_id,
        image_id=image_id,
        box=b if b is not None else box(),
        source=source,
        category_id=category_id,
        confidence=confidence,
    )


def image_table(*image_ids: int, width: float = 640.0, height: float = 480.0) -> dict:
    return {
        i: ImageInfo(image_id=i, width=width, height=height, file_name=f"img_{i:05d}.png")
        for i in image_ids
    }


def dataset(
    labels: list[Label],
    source: Source = Source.CROWD,
    image_ids: tuple[int, ...] | None = None,
) -> AnnotationSet:
    ids = set(image_ids or ()) | {l.image_id for l in labels}
    return AnnotationSet(source, image_table(*sorted(ids)), labels, covered_ids=ids)


def random_boxes(
    rng: np.random.Generator,
    count: int,
    width: float = 100.0,
    height: float = 100.0,
    min_size: float = 4.0,
    max_size: float = 40.0,
) -> list[Box]:
    out = []
    for _ in range(count):
        w = float(rng.uniform(min_size, max_size))
        h = float(rng.uniform(min_size, max_size))
        x = float(rng.uniform(0, width - w))
        y = float(rng.uniform(0, height - h))
        out.append(Box(x, y, w, h))
    return out


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
