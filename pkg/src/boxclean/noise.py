"""Synthetic ground truth and crowd-style label corruption.

Four noise types are injected, mirroring how box annotations actually go
wrong: spurious background boxes (bkg), deleted instances (miss), badly
localized boxes (loc), and two nearby objects merged into one box (bib).
Instance difficulty couples to miss/loc probability, so hard objects attract
more noise, and annotator diligence varies per image — each image's error
probabilities are scaled by a mean-one gamma factor, so a careless worker
makes every kind of mistake more often on the whole image. Errors therefore
cluster on images, which is what gives active selection something to find.

Every emitted and deleted label gets exactly one tag in a noise ledger, so
downstream evaluation can verify per-type effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AnnotationSet, ImageInfo, ImageTable, Label, Source
from .errors import ConfigError
from .geometry import Box, edge_gap, hull, iou

# Difficulty map: truth label_id -> difficulty in [0, 1].
DifficultyMap = dict[int, float]

CLEAN = "clean"
BKG = "bkg"
MISS = "miss"
LOC = "loc"
BIB = "bib"
NOISE_TYPES = (CLEAN, BKG, MISS, LOC, BIB)

# Loc noise keeps the box on its object but off target: the jittered box is
# resampled into this IoU band against the original.
_LOC_IOU_BAND = (0.1, 0.5)
# IoU ceiling for spurious boxes; matches the background-error threshold used
# in evaluation so injected bkg noise round-trips into the bkg error class.
_BKG_IOU_MAX = 0.1

_TAGS = {
    "difficulty": 11,
    "miss": 13,
    "loc": 17,
    "bib": 19,
    "bkg": 23,
    "corpus": 29,
    "annotator": 31,
}


def _rng(seed: int, image_id: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, image_id, _TAGS[tag])))


@dataclass(frozen=True)
class NoiseSpec:
    """Noise profile. Default rates give a mixed, miss/loc-dominated corpus.

    Each image is labeled by one worker whose diligence varies: the image's
    error probabilities are all multiplied by a per-image factor drawn from a
    mean-one gamma distribution with coefficient of variation
    ``annotator_spread``. Errors therefore cluster on whole images — a few
    images are close to garbage while most are decent — without changing the
    corpus-wide rates. ``annotator_spread`` of zero gives every image the
    same factor of one.
    """

    miss_rate: float = 0.12
    loc_rate: float = 0.14
    bkg_rate: float = 0.05
    bib_rate: float = 0.03
    loc_jitter_sigma: float = 0.35
    difficulty_coupling: float = 6.0
    annotator_spread: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "loc_rate", "bkg_rate", "bib_rate"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"noise spec: {name} must be in [0, 1], got {value}")
        if self.loc_jitter_sigma <= 0:
            raise ConfigError("noise spec: loc_jitter_sigma must be positive")
        if self.difficulty_coupling < 0:
            raise ConfigError("noise spec: difficulty_coupling must be non-negative")
        if not (0.0 <= self.annotator_spread <= 3.0):
            raise ConfigError("noise spec: annotator_spread must be in [0, 3]")

    def coupled(self, rate: float, difficulty: float) -> float:
        """Per-instance probability: ``rate`` tilted towards hard instances.

        The tilt is normalized around mid difficulty — a d=0.5 instance gets
        exactly ``rate`` — and flattens as ``difficulty_coupling`` grows, so
        the coupling strength never changes the overall noise scale.
        """
        tilt = (self.difficulty_coupling + difficulty) / (self.difficulty_coupling + 0.5)
        return min(1.0, max(0.0, rate * tilt))

    def annotator_factor(self, image_id: int) -> float:
        """Deterministic per-image error multiplier (the worker's diligence).

        Gamma with mean one and standard deviation ``annotator_spread``:
        shape 1/spread^2, scale spread^2.
        """
        if self.annotator_spread == 0.0:
            return 1.0
        shape = 1.0 / self.annotator_spread**2
        return float(_rng(self.seed, image_id, "annotator").gamma(shape, self.annotator_spread**2))


@dataclass
class CorruptionResult:
    crowd: AnnotationSet
    noise_ledger: dict[int, str]
    bkg_skipped: int = 0

    def counts(self) -> dict[str, int]:
        out = {t: 0 for t in NOISE_TYPES}
        for tag in self.noise_ledger.values():
            out[tag] += 1
        return out


def assign_difficulty(ground_truth: AnnotationSet, seed: int) -> DifficultyMap:
    """Per-instance difficulty: Beta(2,2) draw plus a small-box bonus.

    Boxes are ranked by area; the smallest gets the full bonus (0.25), the
    largest none. Values clamp to [0, 1] and are deterministic given seed.
    """
    labels = sorted(ground_truth.all_labels(), key=lambda l: l.label_id)
    if not labels:
        return {}
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0, _TAGS["difficulty"])))
    base = rng.beta(2.0, 2.0, size=len(labels))
    by_area = sorted(labels, key=lambda l: (l.box.area, l.label_id))
    denom = max(len(labels) - 1, 1)
    bonus = {l.label_id: 0.25 * (1.0 - i / denom) for i, l in enumerate(by_area)}
    return {
        l.label_id: float(min(1.0, max(0.0, b + bonus[l.label_id])))
        for l, b in zip(labels, base)
    }


def _jitter_loc(
    box: Box, sigma: float, rng: np.random.Generator, neighbors: Sequence[Box] = ()
) -> Box:
    """Perturb a box into the loc IoU band against its original position.

    The perturbed box must still overlap its own object best: a sloppy
    annotator draws a bad outline around the right instance, not a good
    outline around a different one. Candidates that overlap any neighbor at
    least as well as the origin are redrawn.
    """
    lo, hi = _LOC_IOU_BAND
    for _ in range(60):
        dx, dy, dw, dh = rng.normal(0.0, 1.0, size=4)
        w = box.w * max(0.3, 1.0 + sigma * dw)
        h = box.h * max(0.3, 1.0 + sigma * dh)
        cand = Box(
            box.cx + sigma * box.w * dx - w / 2.0,
            box.cy + sigma * box.h * dy - h / 2.0,
            w,
            h,
        )
        own = iou(box, cand)
        if lo <= own < hi and all(iou(n, cand) < own for n in neighbors):
            return cand
    # Deterministic fallback: a pure horizontal shift by 0.55 widths lands at
    # IoU 0.45/1.55 ~= 0.29, inside the band for any box.
    return Box(box.x + 0.55 * box.w, box.y, box.w, box.h)


def _bib_candidates(survivors: Sequence[Label]) -> list[tuple[float, Label, Label]]:
    pairs = []
    for i, a in enumerate(survivors):
        for b in survivors[i + 1 :]:
            gap = edge_gap(a.box, b.box)
            limit = min((a.box.w + a.box.h) / 2.0, (b.box.w + b.box.h) / 2.0)
            if gap < limit:
                pairs.append((gap, a, b))
    pairs.sort(key=lambda p: (p[0], p[1].label_id, p[2].label_id))
    return pairs


def _apportion_bkg(weights: dict[int, float], target: int) -> dict[int, int]:
    """Split ``target`` spurious boxes across images, proportional to each
    image's weight (largest-remainder rounding; ties to lower id)."""
    total = sum(weights.values())
    if target == 0 or total == 0:
        return {i: 0 for i in weights}
    quotas = {i: target * w / total for i, w in weights.items()}
    counts = {i: int(math.floor(q)) for i, q in quotas.items()}
    leftover = target - sum(counts.values())
    by_remainder = sorted(quotas, key=lambda i: (counts[i] - quotas[i], i))
    for image_id in by_remainder[:leftover]:
        counts[image_id] += 1
    return counts


def _place_bkg(
    info: ImageInfo,
    true_boxes: Sequence[Box],
    sizes: Sequence[tuple[float, float]],
    rng: np.random.Generator,
) -> Box | None:
    for _ in range(100):
        w, h = sizes[int(rng.integers(0, len(sizes)))]
        w = min(w, info.width * 0.9)
        h = min(h, info.height * 0.9)
        x = float(rng.uniform(0.0, info.width - w))
        y = float(rng.uniform(0.0, info.height - h))
        cand = Box(x, y, w, h)
        if all(iou(cand, t) < _BKG_IOU_MAX for t in true_boxes):
            return cand
    return None


def corrupt(
    ground_truth: AnnotationSet,
    spec: NoiseSpec,
    difficulty: DifficultyMap,
) -> CorruptionResult:
    """Produce a crowd-style corrupted copy of the ground truth.

    Noise types are applied in the order miss, bib, loc, bkg, and each label
    is touched by at most one type, so the ledger tags are exclusive:
    surviving labels keep their ids (clean or loc), deleted ones are tagged
    miss, merged pairs and their replacement hull are all tagged bib, and
    spurious additions are tagged bkg. New labels get ids above the truth's
    maximum.
    """
    if ground_truth.label_count == 0:
        raise ConfigError("cannot corrupt an empty ground-truth set")
    missing = [l.label_id for l in ground_truth.all_labels() if l.label_id not in difficulty]
    if missing:
        raise ConfigError(f"difficulty map missing labels: {missing[:5]}")

    ledger: dict[int, str] = {}
    next_id = ground_truth.max_label_id() + 1
    out_labels: list[Label] = []
    image_ids = sorted(ground_truth.covered_ids)
    survivors_by_image: dict[int, list[Label]] = {}

    for image_id in image_ids:
        truths = ground_truth.labels_for(image_id)
        factor = spec.annotator_factor(image_id)
        rng_miss = _rng(spec.seed, image_id, "miss")
        survivors = []
        for label in truths:
            p_miss = min(1.0, spec.coupled(spec.miss_rate, difficulty[label.label_id]) * factor)
            if rng_miss.uniform() < p_miss:
                ledger[label.label_id] = MISS
            else:
                survivors.append(label)
        survivors_by_image[image_id] = survivors

    for image_id in image_ids:
        survivors = survivors_by_image[image_id]
        factor = spec.annotator_factor(image_id)
        rng_bib = _rng(spec.seed, image_id, "bib")
        consumed: set[int] = set()
        hulls: list[Label] = []
        for gap, a, b in _bib_candidates(survivors):
            if a.label_id in consumed or b.label_id in consumed:
                continue
            if rng_bib.uniform() < min(1.0, spec.bib_rate * factor):
                consumed.update((a.label_id, b.label_id))
                ledger[a.label_id] = BIB
                ledger[b.label_id] = BIB
                hulls.append(
                    Label(
                        label_id=next_id,
                        image_id=image_id,
                        box=hull(a.box, b.box),
                        source=Source.CROWD,
                        category_id=a.category_id,
                    )
                )
                ledger[next_id] = BIB
                next_id += 1
        remaining = [l for l in survivors if l.label_id not in consumed]

        rng_loc = _rng(spec.seed, image_id, "loc")
        scene = ground_truth.labels_for(image_id)
        for label in remaining:
            p_loc = min(1.0, spec.coupled(spec.loc_rate, difficulty[label.label_id]) * factor)
            neighbors = [t.box for t in scene if t.label_id != label.label_id]
            if rng_loc.uniform() < p_loc:
                ledger[label.label_id] = LOC
                out_labels.append(
                    Label(
                        label_id=label.label_id,
                        image_id=image_id,
                        box=_jitter_loc(label.box, spec.loc_jitter_sigma, rng_loc, neighbors),
                        source=Source.CROWD,
                        category_id=label.category_id,
                    )
                )
            else:
                ledger[label.label_id] = CLEAN
                out_labels.append(
                    Label(
                        label_id=label.label_id,
                        image_id=image_id,
                        box=label.box,
                        source=Source.CROWD,
                        category_id=label.category_id,
                    )
                )
        out_labels.extend(hulls)

    bkg_skipped = 0
    weights = {
        i: len(ground_truth.labels_for(i)) * spec.annotator_factor(i) for i in image_ids
    }
    target = math.ceil(spec.bkg_rate * ground_truth.label_count)
    bkg_counts = _apportion_bkg(weights, target)
    all_sizes = [
        (l.box.w, l.box.h)
        for l in sorted(ground_truth.all_labels(), key=lambda l: l.label_id)
    ]
    for image_id in image_ids:
        want = bkg_counts[image_id]
        if want == 0:
            continue
        rng_bkg = _rng(spec.seed, image_id, "bkg")
        true_boxes = [l.box for l in ground_truth.labels_for(image_id)]
        info = ground_truth.images[image_id]
        for _ in range(want):
            placed = _place_bkg(info, true_boxes, all_sizes, rng_bkg)
            if placed is None:
                bkg_skipped += 1
                continue
            out_labels.append(
                Label(
                    label_id=next_id,
                    image_id=image_id,
                    box=placed,
                    source=Source.CROWD,
                    category_id=1,
                )
            )
            ledger[next_id] = BKG
            next_id += 1

    crowd = AnnotationSet(
        Source.CROWD,
        ground_truth.images,
        out_labels,
        covered_ids=ground_truth.covered_ids,
        categories=ground_truth.categories,
    )
    return CorruptionResult(crowd=crowd, noise_ledger=ledger, bkg_skipped=bkg_skipped)


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of a synthetic corpus: image count, per-image instance range,
    canvas size, and box size range."""

    n_images: int = 300
    min_instances: int = 8
    max_instances: int = 8
    width: float = 640.0
    height: float = 480.0
    min_size: float = 28.0
    max_size: float = 150.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_images <= 0:
            raise ConfigError("corpus: n_images must be positive")
        if not (0 < self.min_instances <= self.max_instances):
            raise ConfigError("corpus: need 0 < min_instances <= max_instances")
        if not (0 < self.min_size <= self.max_size):
            raise ConfigError("corpus: need 0 < min_size <= max_size")


def make_corpus(spec: CorpusSpec) -> tuple[ImageTable, AnnotationSet]:
    """Generate ground truth: boxes of log-uniform size, mostly non-overlapping."""
    images: ImageTable = {}
    labels: list[Label] = []
    next_id = 1
    for image_id in range(1, spec.n_images + 1):
        rng = _rng(spec.seed, image_id, "corpus")
        info = ImageInfo(
            image_id=image_id,
            width=spec.width,
            height=spec.height,
            file_name=f"img_{image_id:05d}.png",
        )
        images[image_id] = info
        count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        placed: list[Box] = []
        for _ in range(count):
            box = None
            for _attempt in range(50):
                w = float(np.exp(rng.uniform(np.log(spec.min_size), np.log(spec.max_size))))
                h = float(np.exp(rng.uniform(np.log(spec.min_size), np.log(spec.max_size))))
                w = min(w, spec.width * 0.6)
                h = min(h, spec.height * 0.6)
                x = float(rng.uniform(0.0, spec.width - w))
                y = float(rng.uniform(0.0, spec.height - h))
                cand = Box(x, y, w, h)
                if all(iou(cand, p) < 0.25 for p in placed):
                    box = cand
                    break
            if box is None:
                box = cand  # crowded image: accept the overlap
            placed.append(box)
            labels.append(
                Label(
                    label_id=next_id,
                    image_id=image_id,
                    box=box,
                    source=Source.EXPERT,
                    category_id=1,
                )
            )
            next_id += 1
    truth = AnnotationSet(
        Source.EXPERT, images, labels, covered_ids=images.keys()
    )
    return images, truth

def render_images(truth: AnnotationSet, out_dir: str | Path) -> int:
    """Draw flat placeholder renders of a synthetic corpus (one filled
    rectangle per ground-truth instance) so the review UI has pixels to show.
    Returns the number of files written. Needs Pillow."""
    from PIL import Image, ImageDraw

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for image_id in sorted(truth.covered_ids):
        info = truth.images[image_id]
        canvas = Image.new("RGB", (int(info.width), int(info.height)), (238, 238, 238))
        draw = ImageDraw.Draw(canvas)
        for label in truth.labels_for(image_id):
            shade = 60 + (label.label_id * 47) % 160
            color = (shade, (shade * 3) % 200 + 40, 220 - shade // 2)
            box = label.box
            draw.rectangle(
                [box.x, box.y, box.x2, box.y2], fill=color, outline=(40, 40, 40)
            )
        canvas.save(out / info.file_name)
        written += 1
    return written
