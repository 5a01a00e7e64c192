"""Cross-source matching and inconsistency scoring for one image.

Three label sources are compared per image: crowd boxes, predictions of the
cleaning model trained on re-annotated images (model_p), and predictions of
the consensus model (model_a). Labels that agree across sources (IoU above a
threshold) form clusters; the rest fall into single-source regions:

- gray:  cluster where at least two sources agree — treated as reliable,
- pink:  model_p only — candidate miss, not scored,
- red:   model_a only — candidate miss, scored by model_a's confidence,
- green: crowd only — candidate noise, scored by the confidence of the
         max-IoU model_p box.

An image's inconsistency score is the sum of its red and green scores; the
active loop re-annotates the highest-scoring images first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .data import Label, Source
from .errors import ConfigError, DataFormatError
from .geometry import iou

# Canonical source order used for deterministic edge ordering.
_SOURCE_ORDER = {Source.CROWD: 0, Source.MODEL_P: 1, Source.MODEL_A: 2}


@dataclass(frozen=True)
class MatchCluster:
    """Labels from distinct sources matched to one another on one image."""

    members: tuple[Label, ...]
    pairwise_iou: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("cluster must be non-empty")
        sources = [m.source for m in self.members]
        if len(set(sources)) != len(sources):
            raise ValueError("cluster holds two labels from one source")

    @property
    def sources(self) -> frozenset[Source]:
        return frozenset(m.source for m in self.members)

    def member_from(self, source: Source) -> Label | None:
        for member in self.members:
            if member.source is source:
                return member
        return None

    def member_ids(self) -> tuple[int, ...]:
        return tuple(m.label_id for m in self.members)


@dataclass(frozen=True)
class RegionPartition:
    """Exhaustive, disjoint assignment of one image's labels to regions.

    ``scores`` holds the instance score for every red and green label (keyed
    by label_id) and nothing else.
    """

    gray: tuple[MatchCluster, ...]
    pink: tuple[Label, ...]
    red: tuple[Label, ...]
    green: tuple[Label, ...]
    scores: dict[int, float]

    def all_label_ids(self) -> list[int]:
        ids = [m.label_id for cluster in self.gray for m in cluster.members]
        ids += [l.label_id for l in self.pink + self.red + self.green]
        return ids

    def to_debug_dict(self) -> dict:
        """JSON-ready dump of the partition for audit and UI overlays."""
        return {
            "gray": [sorted(c.member_ids()) for c in self.gray],
            "pink": sorted(l.label_id for l in self.pink),
            "red": sorted(l.label_id for l in self.red),
            "green": sorted(l.label_id for l in self.green),
            "scores": {str(k): self.scores[k] for k in sorted(self.scores)},
        }


def _check_one_image(groups: Sequence[Sequence[Label]]) -> None:
    image_ids = {l.image_id for group in groups for l in group}
    if len(image_ids) > 1:
        raise DataFormatError(f"labels span multiple images: {sorted(image_ids)}")


def match_cross_source(
    b_c: Sequence[Label],
    b_p: Sequence[Label],
    b_a: Sequence[Label],
    iou_threshold: float = 0.5,
) -> tuple[list[MatchCluster], dict[Source, list[Label]]]:
    """Greedy one-to-one matching across the three sources of one image.

    Candidate edges are cross-source pairs with IoU strictly above
    ``iou_threshold``, taken in order of descending IoU (ties: higher
    confidence, then lower label ids). An edge is accepted only if the two
    components it joins share no source, so a cluster never holds two labels
    from one source. Returns the multi-member clusters plus per-source
    leftovers (labels that matched nothing).
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ConfigError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    _check_one_image((b_c, b_p, b_a))
    groups = {Source.CROWD: list(b_c), Source.MODEL_P: list(b_p), Source.MODEL_A: list(b_a)}
    for source, group in groups.items():
        for label in group:
            if label.source is not source:
                raise DataFormatError(
                    f"label {label.label_id} tagged {label.source.value} passed in the {source.value} group"
                )

    labels: list[Label] = [l for g in groups.values() for l in g]
    index = {l.label_id: i for i, l in enumerate(labels)}
    if len(index) != len(labels):
        raise DataFormatError("duplicate label ids across sources")

    edges = []
    ordered = sorted(labels, key=lambda l: (_SOURCE_ORDER[l.source], l.label_id))
    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            if a.source is b.source:
                continue
            overlap = iou(a.box, b.box)
            if overlap > iou_threshold:
                edges.append((-overlap, -a.confidence, -b.confidence, a.label_id, b.label_id, a, b))
    edges.sort(key=lambda e: e[:5])

    parent = list(range(len(labels)))
    comp_sources: list[set[Source]] = [{l.source} for l in labels]

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for *_, a, b in edges:
        ra, rb = find(index[a.label_id]), find(index[b.label_id])
        if ra == rb:
            continue
        if comp_sources[ra] & comp_sources[rb]:
            continue
        parent[rb] = ra
        comp_sources[ra] |= comp_sources[rb]

    components: dict[int, list[Label]] = {}
    for label in labels:
        components.setdefault(find(index[label.label_id]), []).append(label)

    clusters: list[MatchCluster] = []
    leftovers: dict[Source, list[Label]] = {s: [] for s in groups}
    for group in components.values():
        if len(group) == 1:
            leftovers[group[0].source].append(group[0])
            continue
        members = tuple(sorted(group, key=lambda l: (_SOURCE_ORDER[l.source], l.label_id)))
        pairwise: dict[tuple[int, int], float] = {}
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                overlap = iou(a.box, b.box)
                if overlap > iou_threshold:
                    pairwise[(a.label_id, b.label_id)] = overlap
        clusters.append(MatchCluster(members=members, pairwise_iou=pairwise))
    clusters.sort(key=lambda c: min(c.member_ids()))
    for group in leftovers.values():
        group.sort(key=lambda l: l.label_id)
    return clusters, leftovers


def score_red(label: Label) -> float:
    """A missed-object candidate is scored by the consensus model's confidence."""
    if label.source is not Source.MODEL_A:
        raise DataFormatError(f"red labels come from model_a, got {label.source.value}")
    return label.confidence


def score_green(label: Label, b_p: Sequence[Label]) -> float:
    """A crowd-only box is scored by the confidence of the max-IoU model_p box.

    The match threshold is irrelevant here. When no model_p box overlaps at
    all (or there are none), the label is uninformative for selection and
    scores 0. Ties on IoU resolve to the lowest label_id.
    """
    if label.source is not Source.CROWD:
        raise DataFormatError(f"green labels come from the crowd, got {label.source.value}")
    best: Label | None = None
    best_iou = 0.0
    for candidate in sorted(b_p, key=lambda l: l.label_id):
        overlap = iou(label.box, candidate.box)
        if overlap > best_iou:
            best, best_iou = candidate, overlap
    return best.confidence if best is not None else 0.0


def classify_regions(
    clusters: Iterable[MatchCluster],
    leftovers: dict[Source, list[Label]],
    b_p: Sequence[Label] = (),
) -> RegionPartition:
    """Assign clusters and leftovers to the four regions and score red/green.

    ``b_p`` must be the image's full model_p prediction list (not just the
    leftovers): green scoring searches all of it.
    """
    gray: list[MatchCluster] = []
    scores: dict[int, float] = {}
    for cluster in clusters:
        if len(cluster.sources) < 2:
            raise ValueError("matched cluster must span at least two sources")
        gray.append(cluster)
    pink = list(leftovers.get(Source.MODEL_P, []))
    red = list(leftovers.get(Source.MODEL_A, []))
    green = list(leftovers.get(Source.CROWD, []))
    for label in red:
        scores[label.label_id] = score_red(label)
    for label in green:
        scores[label.label_id] = score_green(label, b_p)
    return RegionPartition(
        gray=tuple(gray), pink=tuple(pink), red=tuple(red), green=tuple(green), scores=scores
    )


def partition_image(
    b_c: Sequence[Label],
    b_p: Sequence[Label],
    b_a: Sequence[Label],
    iou_threshold: float = 0.5,
) -> RegionPartition:
    """Match the three sources on one image and classify into regions."""
    clusters, leftovers = match_cross_source(b_c, b_p, b_a, iou_threshold)
    return classify_regions(clusters, leftovers, b_p)


def classify_single_model(
    b_c: Sequence[Label],
    b_p: Sequence[Label],
    iou_threshold: float = 0.5,
) -> RegionPartition:
    """Degenerate partition without a consensus model: red is always empty."""
    return partition_image(b_c, b_p, (), iou_threshold)


def image_score(partition: RegionPartition) -> float:
    """Image-level inconsistency: the sum of red and green instance scores."""
    return sum(
        partition.scores[l.label_id] for l in partition.red + partition.green
    )
