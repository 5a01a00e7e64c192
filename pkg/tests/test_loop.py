"""Tests for the iterative selection loop: seeding, scoring, selection,
budget/exhaustion stops, and checkpointing."""

from __future__ import annotations

import json

import pytest

from boxclean.budget import Action, Actor
from boxclean.data import AnnotationSet, Source
from boxclean.detector import SimulatedDetectorBackend
from boxclean.errors import ConfigError, StateError
from boxclean.loop import (
    LoopConfig,
    PipelineState,
    derive_seed,
    final_models,
    initialize,
    latest_checkpoint,
    load_checkpoint,
    run_full,
    run_iteration,
    save_checkpoint,
    score_remaining,
    select_images,
)
from boxclean.noise import CorpusSpec, NoiseSpec, assign_difficulty, corrupt, make_corpus
from boxclean.oracles import TruthExpert

from conftest import box, label


# ---------------------------------------------------------------------------
# scaffolding


def small_world(n_images=12, seed=7, noise=None):
    """Ground truth + noisy crowd labels + truth-backed expert."""
    spec = CorpusSpec(n_images=n_images, min_instances=3, max_instances=5, seed=seed)
    _, truth = make_corpus(spec)
    difficulty = assign_difficulty(truth, seed=seed)
    result = corrupt(truth, noise or NoiseSpec(seed=seed), difficulty)
    return truth, result.crowd, TruthExpert(truth)


class SilentBackend:
    """No predictions at all: every crowd label is a zero-scored green."""

    def fit(self, train, role):
        return role

    def predict(self, model, image_ids, seed):
        return {i: [] for i in image_ids}


class ScriptedBackend:
    """Model A emits one off-corner box per image with a scripted confidence,
    so each image's inconsistency score is exactly that confidence."""

    def __init__(self, confidences: dict[int, float]):
        self.confidences = confidences

    def fit(self, train, role):
        return role

    def predict(self, model, image_ids, seed):
        if model is Source.MODEL_P:
            return {i: [] for i in image_ids}
        return {
            i: [
                label(
                    900000 + i,
                    image_id=i,
                    b=box(600, 440, 8, 8),
                    source=Source.MODEL_A,
                    confidence=self.confidences[i],
                )
            ]
            for i in image_ids
        }


class NoModelABackend(SilentBackend):
    def fit(self, train, role):
        if role is Source.MODEL_A:
            raise AssertionError("single-model run must not train the consensus model")
        return role


# ---------------------------------------------------------------------------
# configuration and seed derivation


class TestLoopConfig:
    def test_round_trip(self):
        cfg = LoopConfig(x0=5, k=3, g=2, mode="single", selection="random", budget_cap=50.0)
        assert LoopConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"x0": -1},
            {"k": -2},
            {"g": -1},
            {"delta": 0.0},
            {"delta": 1.0},
            {"iou_threshold": 1.2},
            {"mode": "triple"},
            {"selection": "oracle"},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            LoopConfig(**kwargs)


class TestDeriveSeed:
    def test_frozen_values(self):
        # Pinned so checkpoints stay replayable across releases.
        assert derive_seed(0, "loop-predict", 0) == 3030461336343938395
        assert derive_seed(0, "loop-predict", 1) == 7755190489979261183
        assert derive_seed(42, "init-sample") == 8587797837472918572
        assert derive_seed(42, "step2-predict") == 18062576291571753978
        assert derive_seed(42, "select-random", 2) == 16223973597603767240

    def test_purposes_are_independent(self):
        seeds = {
            derive_seed(1, tag)
            for tag in ("init-sample", "select-random", "loop-predict", "step2-predict", "eval-predict")
        }
        assert len(seeds) == 5

    def test_unknown_purpose_rejected(self):
        with pytest.raises(KeyError):
            derive_seed(1, "coffee-break")


# ---------------------------------------------------------------------------
# initialize


class TestInitialize:
    def test_seed_round_shape(self):
        truth, crowd, expert = small_world()
        state = initialize(crowd, expert, LoopConfig(x0=4, k=2, g=2), seed=11)

        assert state.iteration == 0
        assert len(state.selection_history) == 1
        selected = state.x_selected
        assert len(selected) == 4
        assert set(state.d_p.covered_ids) == selected
        assert set(state.d_c.covered_ids) == set(crowd.covered_ids) - selected
        assert set(state.d_a.covered_ids) == selected
        for image_id in selected:
            expert_labels = state.d_p.labels_for(image_id)
            assert expert_labels and all(l.source is Source.EXPERT for l in expert_labels)
            assert state.d_c.labels_for(image_id) == ()

    def test_charges_crowd_pass_and_seed_experts(self):
        truth, crowd, expert = small_world()
        state = initialize(crowd, expert, LoopConfig(x0=4), seed=11)
        assert state.ledger.count_for(Actor.CROWD, Action.ANNOTATE_BOX) == crowd.label_count
        expert_count = state.ledger.count_for(Actor.EXPERT, Action.ANNOTATE_BOX)
        assert expert_count == state.d_p.label_count
        assert state.ledger.total == crowd.label_count * 1.0 + expert_count * 10.0

    def test_consensus_labels_are_crowd_corroborated_experts(self):
        truth, crowd, expert = small_world()
        state = initialize(crowd, expert, LoopConfig(x0=6), seed=3)
        expert_ids = {l.label_id for l in state.d_p.all_labels()}
        for lab in state.d_a.all_labels():
            assert lab.source is Source.EXPERT
            assert lab.label_id in expert_ids
        assert state.d_a.label_count <= state.d_p.label_count

    def test_deterministic_and_seed_sensitive(self):
        truth, crowd, expert = small_world()
        cfg = LoopConfig(x0=4)
        first = initialize(crowd, expert, cfg, seed=11).selection_history[0]
        again = initialize(crowd, expert, cfg, seed=11).selection_history[0]
        other = initialize(crowd, expert, cfg, seed=12).selection_history[0]
        assert first == again
        assert first != other

    def test_x0_bounds(self):
        truth, crowd, expert = small_world(n_images=6)
        with pytest.raises(ConfigError, match="x0"):
            initialize(crowd, expert, LoopConfig(x0=0), seed=1)
        with pytest.raises(ConfigError, match="exceeds"):
            initialize(crowd, expert, LoopConfig(x0=7), seed=1)


# ---------------------------------------------------------------------------
# scoring and selection


class TestSelection:
    def test_active_selects_top_scores_sorted_by_id(self):
        truth, crowd, expert = small_world(n_images=8)
        state = initialize(crowd, expert, LoopConfig(x0=3, k=3, g=1), seed=5)
        remaining = sorted(state.d_c.covered_ids)
        assert len(remaining) == 5
        confidences = dict(zip(remaining, [0.9, 0.2, 0.9, 0.5, 0.2]))
        backend = ScriptedBackend(confidences)

        scores, _, _ = score_remaining(state, backend, iteration_seed=0)
        assert scores == pytest.approx(confidences)

        new_state = run_iteration(state, backend, expert)
        expected = sorted([remaining[0], remaining[2], remaining[3]])
        assert new_state.selection_history[-1] == expected

    def test_active_tie_breaks_on_lower_image_id(self):
        scores = {30: 1.5, 10: 1.5, 20: 1.5, 40: 0.1}
        assert select_images(scores, 2, "active", seed=1, iteration=0) == [10, 20]

    def test_k_clamps_to_pool(self):
        scores = {1: 0.3, 2: 0.1}
        assert select_images(scores, 5, "active", seed=1, iteration=0) == [1, 2]
        assert len(select_images(scores, 5, "random", seed=1, iteration=0)) == 2

    def test_random_selection_ignores_scores_and_varies_by_round(self):
        scores_a = {i: float(i) * 3.3 for i in range(1, 40)}
        scores_b = {i: 0.0 for i in range(1, 40)}
        pick = select_images(scores_a, 5, "random", seed=9, iteration=1)
        assert pick == select_images(scores_b, 5, "random", seed=9, iteration=1)
        assert pick != select_images(scores_a, 5, "random", seed=9, iteration=2)
        assert pick != select_images(scores_a, 5, "random", seed=10, iteration=1)

    def test_zero_scores_fall_back_to_lowest_ids(self):
        truth, crowd, expert = small_world(n_images=8)
        state = initialize(crowd, expert, LoopConfig(x0=3, k=2, g=1), seed=5)
        remaining = sorted(state.d_c.covered_ids)
        new_state = run_iteration(state, SilentBackend(), expert)
        assert new_state.selection_history[-1] == remaining[:2]

    def test_single_mode_never_trains_model_a(self):
        truth, crowd, expert = small_world(n_images=8)
        cfg = LoopConfig(x0=3, k=2, g=2, mode="single")
        state = initialize(crowd, expert, cfg, seed=5)
        state = run_iteration(state, NoModelABackend(), expert)
        models = final_models(state, NoModelABackend())
        assert set(models) == {"model_p"}

    def test_dual_mode_returns_both_models(self):
        truth, crowd, expert = small_world(n_images=8)
        difficulty = assign_difficulty(truth, seed=7)
        backend = SimulatedDetectorBackend(truth, difficulty)
        state = initialize(crowd, expert, LoopConfig(x0=3, k=2, g=1), seed=5)
        models = final_models(state, backend)
        assert set(models) == {"model_p", "model_a"}
        assert models["model_p"].role is Source.MODEL_P


# ---------------------------------------------------------------------------
# iteration mechanics


class TestIteration:
    def test_growth_and_disjointness_each_round(self):
        truth, crowd, expert = small_world(n_images=30)
        cfg = LoopConfig(x0=5, k=5, g=3)
        state = initialize(crowd, expert, cfg, seed=21)
        backend = SilentBackend()
        for i in range(1, cfg.g + 1):
            state = run_iteration(state, backend, expert)
            assert state.iteration == i
            assert [len(r) for r in state.selection_history] == [5] * (i + 1)
            assert len(state.x_selected) == cfg.x0 + i * cfg.k
            assert not state.x_selected & set(state.d_c.covered_ids)
            assert set(state.d_p.covered_ids) == state.x_selected
            assert set(state.d_a.covered_ids) == state.x_selected

    def test_expert_charged_per_label_each_round(self):
        truth, crowd, expert = small_world(n_images=12)
        state = initialize(crowd, expert, LoopConfig(x0=4, k=4, g=1), seed=21)
        before = state.ledger.count_for(Actor.EXPERT, Action.ANNOTATE_BOX)
        state = run_iteration(state, SilentBackend(), expert)
        gained = state.ledger.count_for(Actor.EXPERT, Action.ANNOTATE_BOX) - before
        newly = state.selection_history[-1]
        assert gained == sum(len(truth.labels_for(i)) for i in newly)

    def test_loop_refuses_to_overrun_g(self):
        truth, crowd, expert = small_world(n_images=12)
        state = initialize(crowd, expert, LoopConfig(x0=2, k=2, g=1), seed=3)
        state = run_iteration(state, SilentBackend(), expert)
        with pytest.raises(StateError, match="finished"):
            run_iteration(state, SilentBackend(), expert)

    def test_pool_exhaustion_stops_early(self):
        truth, crowd, expert = small_world(n_images=10)
        cfg = LoopConfig(x0=4, k=4, g=3)
        state = initialize(crowd, expert, cfg, seed=3)
        state, _ = run_full(state, SilentBackend(), expert)
        # Round 1 takes 4, round 2 takes the last 2 and flags exhaustion.
        assert state.exhausted
        assert state.iteration == 2
        assert [len(r) for r in state.selection_history] == [4, 4, 2]
        assert len(state.x_selected) == 10
        assert sorted(state.d_c.covered_ids) == []
        with pytest.raises(StateError, match="exhausted"):
            run_iteration(state, SilentBackend(), expert)

    def test_budget_cap_halts_without_new_charges(self):
        truth, crowd, expert = small_world(n_images=12)
        cfg = LoopConfig(x0=4, k=4, g=3, budget_cap=1.0)  # below the crowd pass alone
        state = initialize(crowd, expert, cfg, seed=3)
        spent = state.ledger.total
        halted = run_iteration(state, SilentBackend(), expert)
        assert halted.exhausted
        assert halted.selection_history[-1] == []
        assert halted.ledger.total == spent
        assert halted.x_selected == state.x_selected

    def test_budget_cap_binds_at_the_next_round_boundary(self):
        truth, crowd, expert = small_world(n_images=20)
        cfg = LoopConfig(x0=4, k=4, g=3, budget_cap=1e9)
        state = initialize(crowd, expert, cfg, seed=3)
        totals = [state.ledger.total]
        uncapped = state
        for _ in range(cfg.g):
            uncapped = run_iteration(uncapped, SilentBackend(), expert)
            totals.append(uncapped.ledger.total)
        assert not uncapped.exhausted

        # A cap crossed during round 2 lets that round finish (the check sits
        # at the round boundary) and halts the loop before round 3.
        tight = (totals[1] + totals[2]) / 2.0
        cfg_tight = LoopConfig(x0=4, k=4, g=3, budget_cap=tight)
        state2 = initialize(crowd, expert, cfg_tight, seed=3)
        state2, _ = run_full(state2, SilentBackend(), expert)
        assert state2.exhausted
        assert state2.selection_history == uncapped.selection_history[:3] + [[]]
        assert state2.ledger.total == totals[2]


# ---------------------------------------------------------------------------
# state invariants


class TestInvariants:
    def test_tampered_history_is_caught(self):
        truth, crowd, expert = small_world(n_images=12)
        state = initialize(crowd, expert, LoopConfig(x0=4), seed=11)
        bad = PipelineState(
            iteration=state.iteration,
            selection_history=[state.selection_history[0][:-1]],  # one image short
            d_p=state.d_p,
            d_c=state.d_c,
            d_a=state.d_a,
            ledger=state.ledger,
            seed=state.seed,
            config=state.config,
        )
        with pytest.raises(StateError, match="invariant"):
            bad.check_invariants()

    def test_duplicate_selection_is_caught(self):
        truth, crowd, expert = small_world(n_images=12)
        state = initialize(crowd, expert, LoopConfig(x0=4, k=4), seed=11)
        first = state.selection_history[0]
        bad = PipelineState(
            iteration=1,
            selection_history=[first, first],
            d_p=state.d_p,
            d_c=state.d_c,
            d_a=state.d_a,
            ledger=state.ledger,
            seed=state.seed,
            config=state.config,
        )
        with pytest.raises(StateError, match="selected twice"):
            bad.check_invariants()


# ---------------------------------------------------------------------------
# checkpointing


class TestCheckpoints:
    def _run_state(self):
        truth, crowd, expert = small_world(n_images=10)
        state = initialize(crowd, expert, LoopConfig(x0=3, k=2, g=2), seed=17)
        return run_iteration(state, SilentBackend(), expert), expert

    def test_round_trip(self, tmp_path):
        state, _ = self._run_state()
        save_checkpoint(state, tmp_path / "it_001")
        loaded = load_checkpoint(tmp_path / "it_001")
        assert loaded.iteration == state.iteration
        assert loaded.selection_history == state.selection_history
        assert loaded.seed == state.seed
        assert loaded.exhausted == state.exhausted
        assert loaded.config == state.config
        assert loaded.ledger.total == state.ledger.total
        for got, want in ((loaded.d_p, state.d_p), (loaded.d_c, state.d_c), (loaded.d_a, state.d_a)):
            assert set(got.covered_ids) == set(want.covered_ids)
            assert sorted(l.label_id for l in got.all_labels()) == sorted(
                l.label_id for l in want.all_labels()
            )
            for mine, theirs in zip(
                sorted(got.all_labels(), key=lambda l: l.label_id),
                sorted(want.all_labels(), key=lambda l: l.label_id),
            ):
                assert mine.box == theirs.box and mine.source is theirs.source

    def test_serialization_is_byte_deterministic(self, tmp_path):
        state, _ = self._run_state()
        save_checkpoint(state, tmp_path / "a")
        save_checkpoint(state, tmp_path / "b")
        for name in ("state.json", "d_p.json", "d_c.json", "d_a.json", "ledger.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_and_corrupt_checkpoints(self, tmp_path):
        with pytest.raises(StateError, match="corrupt or unreadable"):
            load_checkpoint(tmp_path / "nope")
        state, _ = self._run_state()
        save_checkpoint(state, tmp_path / "it_001")
        (tmp_path / "it_001" / "state.json").write_text("{broken")
        with pytest.raises(StateError, match="corrupt or unreadable"):
            load_checkpoint(tmp_path / "it_001")

    def test_tampered_checkpoint_fails_invariants(self, tmp_path):
        state, _ = self._run_state()
        save_checkpoint(state, tmp_path / "it_001")
        meta_path = tmp_path / "it_001" / "state.json"
        meta = json.loads(meta_path.read_text())
        meta["selection_history"][0] = meta["selection_history"][0][:-1]
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(StateError, match="invariant"):
            load_checkpoint(tmp_path / "it_001")

    def test_latest_checkpoint_picks_highest_round(self, tmp_path):
        with pytest.raises(StateError, match="no checkpoints"):
            latest_checkpoint(tmp_path)
        for i in (0, 2, 1):
            (tmp_path / f"it_{i:03d}").mkdir()
        assert latest_checkpoint(tmp_path).name == "it_002"

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        truth, crowd, expert = small_world(n_images=14, seed=5)
        difficulty = assign_difficulty(truth, seed=5)
        backend = SimulatedDetectorBackend(truth, difficulty)
        cfg = LoopConfig(x0=4, k=3, g=3)

        full_dir = tmp_path / "full"
        state = initialize(crowd, expert, cfg, seed=99)
        final_full, _ = run_full(state, backend, expert, checkpoint_dir=full_dir)

        part_dir = tmp_path / "part"
        state = initialize(crowd, expert, cfg, seed=99)
        paused, _ = run_full(state, backend, expert, checkpoint_dir=part_dir, stop_after=1)
        assert paused.iteration == 1
        resumed = load_checkpoint(latest_checkpoint(part_dir))
        final_resumed, _ = run_full(resumed, backend, expert, checkpoint_dir=part_dir)

        assert final_resumed.selection_history == final_full.selection_history
        assert final_resumed.ledger.total == final_full.ledger.total
        for name in ("state.json", "d_p.json", "d_c.json", "d_a.json", "ledger.json"):
            assert (part_dir / "it_003" / name).read_bytes() == (
                full_dir / "it_003" / name
            ).read_bytes()
