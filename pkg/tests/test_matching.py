"""Cross-source matching and region scoring.

The partition rules are the heart of the package, so they get three layers:
hand-frozen scenarios, an independent connectivity oracle on random inputs,
and algebraic properties (totality, threshold monotonicity, single-model
equivalence, score additivity).
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxclean.data import Label, Source
from boxclean.errors import ConfigError, DataFormatError
from boxclean.geometry import Box, iou
from boxclean.matching import (
    classify_single_model,
    image_score,
    match_cross_source,
    partition_image,
    score_green,
    score_red,
)

from conftest import box, label, random_boxes


def crowd(label_id, b):
    return label(label_id, b=b, source=Source.CROWD)


def model_p(label_id, b, conf=0.9):
    return label(label_id, b=b, source=Source.MODEL_P, confidence=conf)


def model_a(label_id, b, conf=0.8):
    return label(label_id, b=b, source=Source.MODEL_A, confidence=conf)


# --- hand-frozen scenarios ---------------------------------------------------


def test_three_source_agreement_forms_one_gray_cluster():
    b = box(10, 10, 20, 20)
    part = partition_image([crowd(1, b)], [model_p(2, b)], [model_a(3, b)])
    assert len(part.gray) == 1
    assert {m.label_id for m in part.gray[0].members} == {1, 2, 3}
    assert part.pink == () and part.red == () and part.green == ()
    assert image_score(part) == 0.0


def test_disjoint_sources_fall_into_their_regions():
    part = partition_image(
        [crowd(1, box(0, 0, 10, 10))],
        [model_p(2, box(40, 40, 10, 10), conf=0.7)],
        [model_a(3, box(80, 80, 10, 10), conf=0.6)],
    )
    assert part.gray == ()
    assert [l.label_id for l in part.green] == [1]
    assert [l.label_id for l in part.pink] == [2]
    assert [l.label_id for l in part.red] == [3]
    # red scored by its own confidence; green has no overlapping model_p box
    assert part.scores[3] == 0.6
    assert part.scores[1] == 0.0
    assert image_score(part) == pytest.approx(0.6)


def test_exact_threshold_overlap_does_not_match():
    # IoU exactly 0.5: (0,0,10,10) vs (0,0,10,5) -> 50/100. Strictly-greater rule.
    a = box(0, 0, 10, 10)
    b = box(0, 0, 10, 5)
    assert iou(a, b) == pytest.approx(0.5)
    part = partition_image([crowd(1, a)], [model_p(2, b)], [])
    assert part.gray == ()
    assert [l.label_id for l in part.green] == [1]
    assert [l.label_id for l in part.pink] == [2]


def test_green_scored_by_max_iou_model_p_box_even_below_threshold():
    # model_p overlaps the crowd box at IoU 1/3 (below 0.5) — still sets the score.
    g = box(0, 0, 10, 10)
    near = box(0, 5, 10, 10)  # IoU = 50/150 = 1/3
    far = box(0, 8, 10, 10)  # IoU = 20/180 = 1/9
    part = partition_image([crowd(1, g)], [model_p(2, near, 0.55), model_p(3, far, 0.99)], [])
    assert [l.label_id for l in part.green] == [1]
    assert part.scores[1] == 0.55  # max-IoU box wins, not max confidence


def test_two_crowd_boxes_cannot_join_one_cluster():
    b = box(0, 0, 10, 10)
    b2 = box(1, 1, 10, 10)
    part = partition_image([crowd(1, b), crowd(2, b2)], [model_p(3, b)], [])
    # 3 matches 1 (higher IoU); 2 must stay green because the cluster already
    # holds a crowd label.
    assert len(part.gray) == 1
    assert {m.label_id for m in part.gray[0].members} == {1, 3}
    assert [l.label_id for l in part.green] == [2]


def test_highest_iou_pair_wins_cluster_membership():
    target = box(0, 0, 10, 10)
    close = box(0, 0, 10, 9)  # IoU 0.9
    loose = box(0, 0, 10, 14)  # IoU 10/14 ≈ 0.714
    part = partition_image([crowd(1, target)], [model_p(2, close), model_p(3, loose)], [])
    assert {m.label_id for m in part.gray[0].members} == {1, 2}
    assert [l.label_id for l in part.pink] == [3]


def test_score_red_requires_model_a_label():
    with pytest.raises(DataFormatError):
        score_red(model_p(1, box()))
    assert score_red(model_a(1, box(), conf=0.35)) == 0.35


def test_score_green_requires_crowd_label():
    with pytest.raises(DataFormatError):
        score_green(model_a(1, box()), [])
    assert score_green(crowd(1, box()), []) == 0.0


def test_threshold_validation():
    with pytest.raises(ConfigError):
        match_cross_source([], [], [], iou_threshold=0.0)
    with pytest.raises(ConfigError):
        match_cross_source([], [], [], iou_threshold=1.0)


def test_duplicate_ids_across_sources_rejected():
    b = box()
    with pytest.raises(DataFormatError):
        match_cross_source([crowd(1, b)], [model_p(1, b)], [])


def test_mixed_image_ids_rejected():
    with pytest.raises(DataFormatError):
        match_cross_source([crowd(1, box())], [label(2, image_id=2, source=Source.MODEL_P, confidence=0.5)], [])


def test_wrong_source_group_rejected():
    with pytest.raises(DataFormatError):
        match_cross_source([model_p(1, box())], [], [])


# --- independent oracle on random inputs -------------------------------------


def _oracle_check(b_c, b_p, b_a, threshold):
    """Re-derive the required partition facts without reusing the algorithm:
    totality, per-cluster source uniqueness, in-cluster connectivity via
    above-threshold edges, and region membership by construction."""
    clusters, leftovers = match_cross_source(b_c, b_p, b_a, threshold)
    every_input = {l.label_id for group in (b_c, b_p, b_a) for l in group}
    seen = []
    for cluster in clusters:
        sources = [m.source for m in cluster.members]
        assert len(set(sources)) == len(sources), "one source twice in a cluster"
        assert len(cluster.members) >= 2
        # connectivity: members must form a connected graph over >threshold edges
        ids = [m.label_id for m in cluster.members]
        adj = {i: set() for i in ids}
        for i, a in enumerate(cluster.members):
            for b in cluster.members[i + 1 :]:
                if a.source != b.source and iou(a.box, b.box) > threshold:
                    adj[a.label_id].add(b.label_id)
                    adj[b.label_id].add(a.label_id)
        reached = {ids[0]}
        frontier = [ids[0]]
        while frontier:
            for nxt in adj[frontier.pop()]:
                if nxt not in reached:
                    reached.add(nxt)
                    frontier.append(nxt)
        assert reached == set(ids), "cluster not connected by above-threshold pairs"
        seen.extend(ids)
    for source, group in leftovers.items():
        for l in group:
            assert l.source == source
            seen.append(l.label_id)
    assert sorted(seen) == sorted(every_input), "partition must be total and disjoint"
    return clusters, leftovers


def _random_triple(rng, max_per_source=5):
    out = []
    next_id = 1
    for source in (Source.CROWD, Source.MODEL_P, Source.MODEL_A):
        group = []
        for b in random_boxes(rng, int(rng.integers(0, max_per_source + 1))):
            conf = 1.0 if source is Source.CROWD else float(rng.uniform(0.05, 0.99))
            group.append(Label(next_id, 1, b, source, 1, conf))
            next_id += 1
        out.append(group)
    return out


def test_partition_matches_connectivity_oracle_on_random_inputs():
    rng = np.random.default_rng(42)
    for trial in range(300):
        b_c, b_p, b_a = _random_triple(rng)
        threshold = float(rng.choice([0.3, 0.5, 0.7]))
        _oracle_check(b_c, b_p, b_a, threshold)


def test_partition_is_deterministic_and_order_invariant():
    rng = np.random.default_rng(7)
    for _ in range(50):
        b_c, b_p, b_a = _random_triple(rng)
        part1 = partition_image(b_c, b_p, b_a)
        part2 = partition_image(list(reversed(b_c)), list(reversed(b_p)), list(reversed(b_a)))
        assert part1.scores == part2.scores
        assert [tuple(m.label_id for m in c.members) for c in part1.gray] == [
            tuple(m.label_id for m in c.members) for c in part2.gray
        ]
        assert [l.label_id for l in part1.green] == [l.label_id for l in part2.green]


# --- algebraic properties -----------------------------------------------------


@st.composite
def label_triples(draw):
    n_c = draw(st.integers(0, 4))
    n_p = draw(st.integers(0, 4))
    n_a = draw(st.integers(0, 4))
    coords = st.floats(0, 80, allow_nan=False)
    sizes = st.floats(2, 40, allow_nan=False)
    next_id = iter(range(1, 100))

    def make(n, source):
        out = []
        for _ in range(n):
            b = Box(draw(coords), draw(coords), draw(sizes), draw(sizes))
            conf = 1.0 if source is Source.CROWD else draw(st.floats(0.01, 0.99))
            out.append(Label(next(next_id), 1, b, source, 1, conf))
        return out

    return make(n_c, Source.CROWD), make(n_p, Source.MODEL_P), make(n_a, Source.MODEL_A)


@given(label_triples())
@settings(max_examples=150, deadline=None)
def test_every_label_lands_in_exactly_one_region(triple):
    b_c, b_p, b_a = triple
    part = partition_image(b_c, b_p, b_a)
    assert sorted(part.all_label_ids()) == sorted(
        l.label_id for group in triple for l in group
    )


@given(label_triples())
@settings(max_examples=150, deadline=None)
def test_image_score_is_sum_of_red_and_green_scores(triple):
    b_c, b_p, b_a = triple
    part = partition_image(b_c, b_p, b_a)
    expected = sum(score_red(l) for l in part.red) + sum(
        score_green(l, b_p) for l in part.green
    )
    assert image_score(part) == pytest.approx(expected)


@given(label_triples())
@settings(max_examples=150, deadline=None)
def test_single_model_equals_partition_with_empty_model_a(triple):
    b_c, b_p, _ = triple
    via_single = classify_single_model(b_c, b_p)
    via_general = partition_image(b_c, b_p, [])
    assert via_single.scores == via_general.scores
    assert [l.label_id for l in via_single.green] == [l.label_id for l in via_general.green]
    assert [l.label_id for l in via_single.pink] == [l.label_id for l in via_general.pink]
    assert via_single.red == ()


@given(label_triples())
@settings(max_examples=100, deadline=None)
def test_gray_membership_shrinks_as_threshold_rises(triple):
    b_c, b_p, b_a = triple
    lo = partition_image(b_c, b_p, b_a, iou_threshold=0.3)
    hi = partition_image(b_c, b_p, b_a, iou_threshold=0.7)
    in_gray_lo = {m.label_id for c in lo.gray for m in c.members}
    in_gray_hi = {m.label_id for c in hi.gray for m in c.members}
    assert len(in_gray_hi) <= len(in_gray_lo)
