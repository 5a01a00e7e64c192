"""Acceptance suite: one test per shipped guarantee, end to end.

Each test states a user-facing property of the toolkit and verifies it
against an implementation-independent reference where one is computable:

1.  ap50 agrees with a brute-force PR-curve reference to 1e-9.
2.  Cross-source partitioning is total, and image scores are additive.
3.  Corroboration and box-in-box cutoffs are strict; the merged-box filter
    is monotone in its threshold.
4.  Each injected noise type surfaces in its own error category only.
5.  Cleaning lifts label F1 and downstream detector AP on every seed.
6.  Disagreement-ranked selection is not worse than random selection.
7.  Two-model cross-checking is not worse than a single cleaning model.
8.  Budget percentages are exact identities of the cost ledger.
9.  Fixed seeds reproduce byte-identical outputs; resume matches a
    straight-through run.
10. Review decisions flow through the service log into the final dataset.

The closed-loop tests (5-7) share one run matrix: three pipeline variants
(ranked, random, single-model) over ten seeds on 300-image corpora with the
default noise profile, identical annotation allowances per arm.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from boxclean.budget import Action, Actor, BudgetLedger, CostModel, budget_percent
from boxclean.consensus import build_consensus_increment
from boxclean.correction import bib_filter
from boxclean.data import AnnotationSet, Label, Source, load_coco
from boxclean.detector import fit_simulated, predict_simulated
from boxclean.evaluation import ap50, label_quality, tide_decompose
from boxclean.geometry import Box
from boxclean.loop import LoopConfig
from boxclean.matching import image_score, partition_image
from boxclean.noise import CorpusSpec, NoiseSpec, assign_difficulty, corrupt, make_corpus
from boxclean.pipeline import EvalConfig, RunConfig, finalize_run, run_pipeline
from boxclean.service import create_app

from conftest import dataset, label

MATRIX_SEEDS = tuple(range(101, 111))


def _snap(value: float) -> float:
    """Quarter-pixel lattice for fuzzed geometry.

    On this lattice every intersection/union is exactly representable, so the
    reference IoU and the production IoU agree bit for bit and tie-breaking
    can be compared without a tolerance that would mask real mismatches.
    """
    return round(float(value) * 4.0) / 4.0


# ---------------------------------------------------------------------------
# independent references, written against the published metric definitions


def _ref_iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def _ref_ap50(predictions: list[Label], truths: list[Label]) -> float | None:
    """Brute-force AP at IoU 0.5: rank, greedy-claim, scan the raw PR points.

    Matches the standard 101-point interpolated definition: detections in
    descending confidence (ties in dataset order), each claiming at most one
    unclaimed truth (highest IoU, then lowest truth id), precision envelope
    sampled on the canonical recall grid, averaged over truth categories.
    """
    if not truths:
        return None
    grid = np.linspace(0.0, 1.0, 101)
    ap_values = []
    for cat in sorted({t.category_id for t in truths}):
        cat_truths = [t for t in truths if t.category_id == cat]
        ranked = sorted(
            (p for p in predictions if p.category_id == cat),
            key=lambda l: (-l.confidence, l.image_id, l.label_id),
        )
        claimed: set[int] = set()
        flags: list[bool] = []
        for pred in ranked:
            best_id, best_iou = None, 0.0
            for t in cat_truths:
                if t.image_id != pred.image_id or t.label_id in claimed:
                    continue
                ov = _ref_iou(pred.box, t.box)
                if ov < 0.5:
                    continue
                if ov > best_iou or (ov == best_iou and best_id is not None and t.label_id < best_id):
                    best_id, best_iou = t.label_id, ov
            if best_id is None:
                flags.append(False)
            else:
                claimed.add(best_id)
                flags.append(True)
        if not flags:
            ap_values.append(0.0)
            continue
        precision, recall = [], []
        tp = 0
        for rank, flag in enumerate(flags, start=1):
            tp += int(flag)
            precision.append(tp / rank)
            recall.append(tp / len(cat_truths))
        ap = 0.0
        for point in grid:
            ap += max((p for p, r in zip(precision, recall) if r >= point), default=0.0)
        ap_values.append(ap / 101.0)
    return 100.0 * sum(ap_values) / len(ap_values)


def _ref_image_score(partition, b_p: list[Label]) -> float:
    """Recompute the inconsistency score from raw inputs, instance by instance."""
    total = 0.0
    for red in partition.red:
        total += red.confidence
    for green in partition.green:
        best_conf, best_iou = 0.0, 0.0
        for candidate in sorted(b_p, key=lambda l: l.label_id):
            ov = _ref_iou(green.box, candidate.box)
            if ov > best_iou:
                best_iou, best_conf = ov, candidate.confidence
        total += best_conf if best_iou > 0.0 else 0.0
    return total


# ---------------------------------------------------------------------------
# shared closed-loop matrix


def _matrix_config(seed: int, arm: str) -> RunConfig:
    loop = {
        "ranked": LoopConfig(x0=16, k=16, g=4),
        "random": LoopConfig(x0=16, k=16, g=4, selection="random"),
        "single": LoopConfig(x0=16, k=16, g=4, mode="single"),
    }[arm]
    return RunConfig(
        seed=seed,
        corpus=CorpusSpec(n_images=300, min_instances=8, max_instances=8, seed=seed),
        noise=NoiseSpec(seed=seed),
        loop=loop,
        eval=EvalConfig(n_images=100, seeds=(9001, 9002, 9003)),
    )


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    root = tmp_path_factory.mktemp("matrix")
    started = time.monotonic()
    out: dict[tuple[str, int], dict] = {}
    for seed in MATRIX_SEEDS:
        for arm in ("ranked", "random", "single"):
            workdir = root / f"{arm}-{seed}"
            report = run_pipeline(_matrix_config(seed, arm), workdir)
            rows = {row["method"]: row for row in report["rows"]}
            out[(arm, seed)] = {
                "workdir": workdir,
                "budget": report["budget_percent"],
                "f1_crowd": rows["crowd-labels"]["label_quality"]["f1"] * 100.0,
                "f1_clean": rows["cleaned-labels"]["label_quality"]["f1"] * 100.0,
                "ap_noisy": rows["detector-noisy"]["ap50"],
                "ap_clean": rows["detector-cleaned"]["ap50"],
            }
    out["elapsed"] = time.monotonic() - started
    return out


# ---------------------------------------------------------------------------
# 1. metric correctness


def test_ap50_matches_independent_reference_on_fuzzed_instances():
    rng = np.random.default_rng(20260814)
    started = time.monotonic()
    checked_perfect = 0
    for trial in range(1000):
        n_truth = int(rng.integers(0, 6))
        n_images = int(rng.integers(1, 3))
        two_cats = bool(n_truth >= 2 and rng.uniform() < 0.2)
        truths = []
        for i in range(n_truth):
            w, h = rng.uniform(5, 40, size=2)
            truths.append(
                label(
                    500 + i,
                    image_id=1 + int(rng.integers(0, n_images)),
                    b=Box(_snap(rng.uniform(0, 60)), _snap(rng.uniform(0, 60)), _snap(w), _snap(h)),
                    source=Source.EXPERT,
                    category_id=2 if two_cats and i % 2 else 1,
                )
            )
        preds = []
        if trial % 10 == 0:
            # perfect predictions must score exactly 100
            for i, t in enumerate(truths):
                preds.append(
                    label(900 + i, image_id=t.image_id, b=t.box, source=Source.MODEL_P,
                          confidence=float(rng.uniform(0.05, 0.99)), category_id=t.category_id)
                )
        else:
            for i, t in enumerate(truths):
                if rng.uniform() < 0.7:
                    dx, dy = rng.normal(0.0, 0.25 * t.box.w), rng.normal(0.0, 0.25 * t.box.h)
                    preds.append(
                        label(900 + i, image_id=t.image_id,
                              b=Box(_snap(t.box.x + dx), _snap(t.box.y + dy), t.box.w, t.box.h),
                              source=Source.MODEL_P, confidence=float(rng.uniform(0.05, 0.99)),
                              category_id=t.category_id)
                    )
            for j in range(int(rng.integers(0, 4))):
                w, h = rng.uniform(5, 40, size=2)
                preds.append(
                    label(970 + j, image_id=1 + int(rng.integers(0, n_images)),
                          b=Box(_snap(rng.uniform(0, 60)), _snap(rng.uniform(0, 60)), _snap(w), _snap(h)),
                          source=Source.MODEL_P, confidence=float(rng.uniform(0.05, 0.99)),
                          category_id=2 if two_cats and j % 2 else 1)
                )
        truth_set = dataset(truths, source=Source.EXPERT, image_ids=tuple(range(1, n_images + 1)))
        got = ap50(preds, truth_set)
        want = _ref_ap50(preds, truths)
        if want is None:
            assert got is None
            continue
        assert got == pytest.approx(want, abs=1e-9), f"trial {trial}: {got} vs {want}"
        if trial % 10 == 0 and truths and preds:
            assert got == 100.0
            checked_perfect += 1
    assert checked_perfect >= 80
    assert time.monotonic() - started < 10.0


# ---------------------------------------------------------------------------
# 2. partition totality and score additivity


def test_partition_assigns_every_label_once_and_scores_add_up():
    rng = np.random.default_rng(97)
    started = time.monotonic()
    for trial in range(10_000):
        bases = [
            Box(_snap(rng.uniform(0, 80)), _snap(rng.uniform(0, 80)),
                _snap(rng.uniform(6, 30)), _snap(rng.uniform(6, 30)))
            for _ in range(int(rng.integers(1, 6)))
        ]

        def draw(source: Source, id_base: int) -> list[Label]:
            out = []
            for i in range(int(rng.integers(0, 6))):
                if rng.uniform() < 0.6:
                    base = bases[int(rng.integers(0, len(bases)))]
                    b = Box(_snap(base.x + rng.normal(0, 3)), _snap(base.y + rng.normal(0, 3)),
                            base.w, base.h)
                else:
                    b = Box(_snap(rng.uniform(0, 80)), _snap(rng.uniform(0, 80)),
                            _snap(rng.uniform(6, 30)), _snap(rng.uniform(6, 30)))
                conf = 1.0 if source is Source.CROWD else float(rng.uniform(0.01, 0.99))
                out.append(label(id_base + i, image_id=7, b=b, source=source, confidence=conf))
            return out

        b_c = draw(Source.CROWD, 1000)
        b_p = draw(Source.MODEL_P, 2000)
        b_a = draw(Source.MODEL_A, 3000)
        part = partition_image(b_c, b_p, b_a, 0.5)

        every_input = sorted(l.label_id for group in (b_c, b_p, b_a) for l in group)
        assigned = sorted(part.all_label_ids())
        assert assigned == every_input, f"trial {trial}: partition dropped or duplicated labels"

        assert all(l.source is Source.MODEL_P for l in part.pink)
        assert all(l.source is Source.MODEL_A for l in part.red)
        assert all(l.source is Source.CROWD for l in part.green)
        assert all(len(c.sources) >= 2 for c in part.gray)

        got = image_score(part)
        want = _ref_image_score(part, b_p)
        assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12), f"trial {trial}"
    assert time.monotonic() - started < 30.0


# ---------------------------------------------------------------------------
# 3. strict threshold boundaries, monotone merged-box filter


def test_corroboration_and_merge_cutoffs_are_strict_and_filter_is_monotone():
    # corroboration: a crowd box covering exactly half the expert box fails
    # the "> delta" rule at delta=0.5; any sliver more passes.
    expert = label(1, image_id=3, b=Box(0, 0, 10, 10), source=Source.EXPERT)
    d_p = dataset([expert], source=Source.EXPERT, image_ids=(3,))
    empty = AnnotationSet(Source.EXPERT, d_p.images, [], covered_ids=set())

    at_boundary = dataset([label(10, image_id=3, b=Box(0, 0, 5, 10))], image_ids=(3,))
    kept = build_consensus_increment(d_p, at_boundary, empty, [3], delta=0.5)
    assert kept.label_count == 0, "coverage equal to delta must not corroborate"

    above = dataset([label(11, image_id=3, b=Box(0, 0, 5.1, 10))], image_ids=(3,))
    kept = build_consensus_increment(d_p, above, empty, [3], delta=0.5)
    assert kept.label_count == 1, "coverage strictly above delta must corroborate"

    # merged-box rule: a witness covered for exactly gamma of its area stays,
    # strictly more goes.
    witness = label(20, image_id=5, b=Box(0, 0, 10, 10), source=Source.MODEL_P, confidence=0.9)
    hold = label(30, image_id=5, b=Box(0, 0, 8, 10))  # covers 80 of 100
    drop = label(31, image_id=5, b=Box(0, 0, 8.5, 10))  # covers 85 of 100
    retained, removed = bib_filter([hold, drop], [witness], [], gamma=0.8)
    assert [l.label_id for l in retained] == [30]
    assert [r.green.label_id for r in removed] == [31]

    # monotone in gamma: raising the cutoff never removes more boxes.
    witnesses = [label(40, image_id=5, b=Box(0, 0, 10, 10), source=Source.MODEL_P, confidence=0.9)]
    greens = [
        label(50 + i, image_id=5, b=Box(0, 0, frac * 10.0, 10))
        for i, frac in enumerate((0.55, 0.65, 0.75, 0.85, 0.95))
    ]
    removals = []
    for gamma in (0.5, 0.6, 0.7, 0.8, 0.9):
        _, removed = bib_filter(greens, witnesses, [], gamma=gamma)
        removals.append(len(removed))
    assert removals == sorted(removals, reverse=True)
    assert removals == [5, 4, 3, 2, 1]


# ---------------------------------------------------------------------------
# 4. per-type noise round trip


def test_each_injected_noise_type_surfaces_only_in_its_error_category():
    _, truth = make_corpus(CorpusSpec(n_images=120, min_instances=8, max_instances=8, seed=7))
    difficulty = assign_difficulty(truth, 7)

    cases = {"miss": 0.12, "loc": 0.14, "bkg": 0.05}
    for kind, rate in cases.items():
        rates = {f"{k}_rate": 0.0 for k in ("miss", "loc", "bkg", "bib")}
        rates[f"{kind}_rate"] = rate
        crowd = corrupt(truth, NoiseSpec(seed=7, **rates), difficulty).crowd
        tide = tide_decompose(crowd.all_labels(), truth)
        target = tide.pop(f"{kind}_dap")
        assert target > 1.0, f"{kind}: expected a clear signal, got {target}"
        for other, value in tide.items():
            assert abs(value) <= 0.5, f"{kind} bled {value} points into {other}"

    # merged boxes: injecting them strictly costs recall, and the box-in-box
    # filter strictly thins them out again.
    rates = {"miss_rate": 0.0, "loc_rate": 0.0, "bkg_rate": 0.0, "bib_rate": 0.12}
    result = corrupt(truth, NoiseSpec(seed=7, **rates), difficulty)
    quality = label_quality(result.crowd, truth)
    assert quality.recall < 1.0

    model = fit_simulated(truth, Source.MODEL_P, reference=truth)
    witnesses = [
        pred
        for preds in predict_simulated(model, truth.covered_ids, truth, difficulty, 7).values()
        for pred in preds
    ]
    truth_ids = {t.label_id for t in truth.all_labels()}
    greens = list(result.crowd.all_labels())
    hulls_before = sum(1 for l in greens if l.label_id not in truth_ids)
    retained, _ = bib_filter(greens, witnesses, [], gamma=0.8)
    hulls_after = sum(1 for l in retained if l.label_id not in truth_ids)
    assert hulls_before > 0
    assert hulls_after < hulls_before


# ---------------------------------------------------------------------------
# 5-7. closed-loop directional guarantees (shared matrix)


def test_cleaning_lifts_label_f1_and_downstream_detector_ap(matrix):
    seeds = MATRIX_SEEDS[:5]
    for seed in seeds:
        run = matrix[("ranked", seed)]
        gain = run["f1_clean"] - run["f1_crowd"]
        assert gain >= 10.0, f"seed {seed}: cleaning gained only {gain:.2f} F1 points"
    mean_clean = sum(matrix[("ranked", s)]["ap_clean"] for s in seeds) / len(seeds)
    mean_noisy = sum(matrix[("ranked", s)]["ap_noisy"] for s in seeds) / len(seeds)
    assert mean_clean > mean_noisy
    assert matrix["elapsed"] < 300.0, "closed-loop matrix exceeded its time budget"


def test_disagreement_ranked_selection_not_worse_than_random(matrix):
    d_f1 = [matrix[("ranked", s)]["f1_clean"] - matrix[("random", s)]["f1_clean"] for s in MATRIX_SEEDS]
    d_ap = [matrix[("ranked", s)]["ap_clean"] - matrix[("random", s)]["ap_clean"] for s in MATRIX_SEEDS]
    assert sum(d_f1) / len(d_f1) >= 0.0
    assert sum(d_ap) / len(d_ap) >= 0.0
    assert sum(1 for d in d_f1 if d >= -1e-9) >= 8, f"F1 deltas: {d_f1}"
    assert sum(1 for d in d_ap if d >= -1e-9) >= 8, f"AP deltas: {d_ap}"


def test_two_model_cross_check_not_worse_than_single_model(matrix):
    d_f1 = [matrix[("ranked", s)]["f1_clean"] - matrix[("single", s)]["f1_clean"] for s in MATRIX_SEEDS]
    d_ap = [matrix[("ranked", s)]["ap_clean"] - matrix[("single", s)]["ap_clean"] for s in MATRIX_SEEDS]
    assert sum(d_f1) / len(d_f1) >= 0.0
    assert sum(d_ap) / len(d_ap) >= 0.0
    assert sum(1 for d in d_f1 if d >= -1e-9) >= 8, f"F1 deltas: {d_f1}"
    assert sum(1 for d in d_ap if d >= -1e-9) >= 8, f"AP deltas: {d_ap}"


# ---------------------------------------------------------------------------
# 8. budget identities


def test_budget_percentages_are_exact_ledger_identities(matrix, tmp_path):
    # annotating every box at the expert rate is exactly 100.00%
    ledger = BudgetLedger()
    ledger.charge(Actor.EXPERT, Action.ANNOTATE_BOX, 2437)
    assert budget_percent(ledger, 2437) == 100.0

    # a pipeline's reported budget is the saved ledger re-summed, and partial
    # selection always costs strictly less than full expert annotation
    run = matrix[("ranked", 101)]
    saved = BudgetLedger.load(Path(run["workdir"]) / "ledger.json")
    truth_count = 300 * 8
    assert run["budget"] == budget_percent(saved, truth_count)
    assert 0.0 < run["budget"] < 100.0

    # at the default loop sizing (seed sample 8, four rounds of 8 on 300
    # images) the whole clean-up costs less than half of full expert work
    config = RunConfig(
        seed=101,
        corpus=CorpusSpec(n_images=300, min_instances=8, max_instances=8, seed=101),
        noise=NoiseSpec(seed=101),
        loop=LoopConfig(x0=8, k=8, g=4),
        eval=EvalConfig(n_images=40, seeds=(9001,)),
    )
    report = run_pipeline(config, tmp_path / "halfbudget")
    assert report["budget_percent"] < 50.0


# ---------------------------------------------------------------------------
# 9. determinism and resume


def test_fixed_seed_reproduces_bytes_and_resume_matches_uninterrupted(tmp_path):
    config = RunConfig(
        seed=31,
        corpus=CorpusSpec(n_images=60, min_instances=4, max_instances=8, seed=31),
        noise=NoiseSpec(seed=31),
        loop=LoopConfig(x0=6, k=6, g=2),
        eval=EvalConfig(n_images=30, seeds=(9001,)),
    )
    run_pipeline(config, tmp_path / "a")
    run_pipeline(config, tmp_path / "b")
    for name in ("cleaned.json", "ledger.json", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    interrupted = run_pipeline(config, tmp_path / "c", stop_after=1)
    assert interrupted["status"] == "interrupted"
    resumed = run_pipeline(config, tmp_path / "c", resume=True)
    assert resumed["status"] == "complete"
    for name in ("cleaned.json", "ledger.json", "report.json"):
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "a" / name).read_bytes(), name


# ---------------------------------------------------------------------------
# 10. review service round trip


def test_review_decisions_reach_log_progress_and_final_dataset(tmp_path):
    config = RunConfig(
        seed=555,
        corpus=CorpusSpec(n_images=12, min_instances=3, max_instances=5, seed=555),
        noise=NoiseSpec(seed=555),
        loop=LoopConfig(x0=3, k=2, g=2),
        eval=EvalConfig(n_images=10, seeds=(9001,)),
        reviewer="interactive",
    )
    handoff = run_pipeline(config, tmp_path)
    assert handoff["status"] == "awaiting-review"
    assert handoff["pending_items"] >= 2

    client = TestClient(create_app(tmp_path))
    items = client.get("/api/queue", params={"limit": 1000}).json()["items"]

    edited = items[0]
    flagged = edited["flagged"]["bbox"]
    edited_box = [flagged[0] + 0.25, flagged[1] - 0.25, flagged[2] + 0.5, flagged[3]]
    response = client.post(
        f"/api/items/{edited['item_id']}/decision",
        json={"action": "edit", "box": edited_box, "reviewer": "acceptance"},
    )
    assert response.status_code == 200
    for item in items[1:]:
        ok = client.post(f"/api/items/{item['item_id']}/decision", json={"action": "reject"})
        assert ok.status_code == 200

    # the decision log is append-only and complete
    log_lines = (tmp_path / "step2" / "decisions.jsonl").read_text().splitlines()
    assert len(log_lines) == len(items)
    assert json.loads(log_lines[0])["action"] == "edit"

    progress = client.get("/api/progress").json()
    assert progress["pending"] == 0
    assert progress["resolved"] == len(items)

    final = finalize_run(tmp_path)
    assert final["status"] == "complete"
    _, cleaned = load_coco(tmp_path / "cleaned.json", Source.CROWD)
    deviations = [
        max(
            abs(l.box.x - edited_box[0]), abs(l.box.y - edited_box[1]),
            abs(l.box.w - edited_box[2]), abs(l.box.h - edited_box[3]),
        )
        for l in cleaned.labels_for(edited["image_id"])
    ]
    assert deviations and min(deviations) <= 0.5
