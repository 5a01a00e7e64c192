"""Iterative selection of inconsistently labeled images for re-annotation.

Each round trains the two models on what the expert has produced so far,
compares their predictions with the remaining crowd labels, scores every
unvisited image by its red/green inconsistency sum, and hands the top-k
images to the expert. Re-annotated images leave the crowd set wholesale and
their expert labels (crowd-corroborated ones) grow the consensus set.

State checkpoints after every round, one subdirectory per iteration, and a
run can resume from any of them bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .budget import Action, Actor, BudgetLedger, CostModel
from .consensus import build_consensus_increment
from .data import AnnotationSet, Label, Source, load_coco, save_coco
from .errors import ConfigError, DataFormatError, StateError
from .matching import classify_single_model, image_score, partition_image

_SEED_TAGS = {
    "init-sample": 61,
    "select-random": 67,
    "loop-predict": 71,
    "step2-predict": 73,
    "eval-predict": 79,
}


def derive_seed(master: int, tag: str, *extra: int) -> int:
    """Well-mixed child seed for a named purpose; stable across platforms."""
    seq = np.random.SeedSequence((master, _SEED_TAGS[tag], *extra))
    return int(seq.generate_state(1, np.uint64)[0])


class DetectorBackend(Protocol):
    def fit(self, train: AnnotationSet, role: Source): ...

    def predict(self, model, image_ids, seed: int) -> dict[int, list[Label]]: ...


class ExpertOracle(Protocol):
    def annotate(self, image_ids) -> list[Label]: ...


@dataclass(frozen=True)
class LoopConfig:
    x0: int = 16
    k: int = 16
    g: int = 4
    delta: float = 0.5
    iou_threshold: float = 0.5
    mode: str = "dual"  # "dual" | "single"
    selection: str = "active"  # "active" | "random"
    budget_cap: float | None = None  # cost units; None disables the cap stop

    def __post_init__(self) -> None:
        if self.x0 < 0 or self.k < 0 or self.g < 0:
            raise ConfigError("loop config: x0, k, g must be non-negative")
        for name in ("delta", "iou_threshold"):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise ConfigError(f"loop config: {name} must be in (0, 1), got {value}")
        if self.mode not in ("dual", "single"):
            raise ConfigError(f"loop config: mode must be dual or single, got {self.mode!r}")
        if self.selection not in ("active", "random"):
            raise ConfigError(
                f"loop config: selection must be active or random, got {self.selection!r}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "LoopConfig":
        return cls(**dict(raw))


@dataclass
class PipelineState:
    iteration: int
    selection_history: list[list[int]]  # round 0 is the seed sample
    d_p: AnnotationSet
    d_c: AnnotationSet
    d_a: AnnotationSet
    ledger: BudgetLedger
    seed: int
    config: LoopConfig
    exhausted: bool = False

    @property
    def x_selected(self) -> set[int]:
        return {i for round_ids in self.selection_history for i in round_ids}

    def check_invariants(self) -> None:
        selected = self.x_selected
        if set(self.d_p.covered_ids) != selected:
            raise StateError("state invariant broken: expert set must cover exactly the selected images")
        if selected & set(self.d_c.covered_ids):
            raise StateError("state invariant broken: selected images still carry crowd labels")
        rounds = self.selection_history
        if len(rounds) != self.iteration + 1:
            raise StateError("state invariant broken: one selection round per iteration plus the seed round")
        flat = [i for r in rounds for i in r]
        if len(flat) != len(set(flat)):
            raise StateError("state invariant broken: an image was selected twice")
        if not self.exhausted:
            expected = self.config.x0 + self.iteration * self.config.k
            if len(flat) != expected:
                raise StateError(
                    f"state invariant broken: {len(flat)} selected, expected {expected}"
                )


def initialize(
    crowd_set: AnnotationSet,
    expert: ExpertOracle,
    config: LoopConfig,
    seed: int,
    cost_model: CostModel | None = None,
) -> PipelineState:
    """Seed round: uniform random images get expert labels; their crowd labels
    leave the working set; consensus starts from the corroborated subset."""
    all_images = sorted(crowd_set.covered_ids)
    if config.x0 == 0:
        raise ConfigError("x0 must be at least 1: the models need a first training set")
    if config.x0 > len(all_images):
        raise ConfigError(f"x0={config.x0} exceeds the {len(all_images)} available images")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SEED_TAGS["init-sample"])))
    x0_ids = sorted(int(i) for i in rng.choice(all_images, size=config.x0, replace=False))

    ledger = BudgetLedger(cost_model=cost_model or CostModel())
    ledger.charge(
        Actor.CROWD, Action.ANNOTATE_BOX, crowd_set.label_count, note="initial crowd pass"
    )
    expert_labels = expert.annotate(x0_ids)
    ledger.charge(Actor.EXPERT, Action.ANNOTATE_BOX, len(expert_labels), note="seed round")

    d_p = AnnotationSet(
        Source.EXPERT,
        crowd_set.images,
        expert_labels,
        covered_ids=x0_ids,
        categories=crowd_set.categories,
    )
    d_a_empty = AnnotationSet(
        Source.EXPERT, crowd_set.images, (), covered_ids=(), categories=crowd_set.categories
    )
    d_a = build_consensus_increment(d_p, crowd_set, d_a_empty, x0_ids, config.delta)
    d_c = crowd_set.without_images(x0_ids)
    state = PipelineState(
        iteration=0,
        selection_history=[x0_ids],
        d_p=d_p,
        d_c=d_c,
        d_a=d_a,
        ledger=ledger,
        seed=seed,
        config=config,
    )
    state.check_invariants()
    return state


def score_remaining(
    state: PipelineState,
    backend: DetectorBackend,
    iteration_seed: int,
) -> tuple[dict[int, float], dict[int, list[Label]], dict[int, list[Label]]]:
    """Inconsistency score per unvisited image, plus both prediction maps."""
    cfg = state.config
    remaining = sorted(state.d_c.covered_ids)
    model_p = backend.fit(state.d_p, Source.MODEL_P)
    preds_p = backend.predict(model_p, remaining, iteration_seed)
    if cfg.mode == "dual":
        model_a = backend.fit(state.d_a, Source.MODEL_A)
        preds_a = backend.predict(model_a, remaining, iteration_seed)
    else:
        preds_a = {i: [] for i in remaining}
    scores: dict[int, float] = {}
    for image_id in remaining:
        crowd = state.d_c.labels_for(image_id)
        if cfg.mode == "dual":
            part = partition_image(
                crowd, preds_p.get(image_id, ()), preds_a.get(image_id, ()), cfg.iou_threshold
            )
        else:
            part = classify_single_model(crowd, preds_p.get(image_id, ()), cfg.iou_threshold)
        scores[image_id] = image_score(part)
    return scores, preds_p, preds_a


def select_images(
    scores: Mapping[int, float], k: int, selection: str, seed: int, iteration: int
) -> list[int]:
    remaining = sorted(scores)
    k_eff = min(k, len(remaining))
    if selection == "active":
        ranked = sorted(remaining, key=lambda i: (-scores[i], i))
        return sorted(ranked[:k_eff])
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, _SEED_TAGS["select-random"], iteration))
    )
    return sorted(int(i) for i in rng.choice(remaining, size=k_eff, replace=False))


def run_iteration(
    state: PipelineState, backend: DetectorBackend, expert: ExpertOracle
) -> PipelineState:
    """One selection round; see the module docstring for the sequence."""
    cfg = state.config
    if state.iteration >= cfg.g:
        raise StateError(f"loop finished its {cfg.g} iterations")
    if state.exhausted:
        raise StateError("loop exhausted the image pool")
    if cfg.budget_cap is not None and state.ledger.total >= cfg.budget_cap:
        return replace(
            state,
            iteration=state.iteration + 1,
            selection_history=state.selection_history + [[]],
            exhausted=True,
        )

    iteration_seed = derive_seed(state.seed, "loop-predict", state.iteration)
    scores, _, _ = score_remaining(state, backend, iteration_seed)
    selected = select_images(scores, cfg.k, cfg.selection, state.seed, state.iteration)

    new_labels = expert.annotate(selected)
    ledger = state.ledger
    ledger.charge(
        Actor.EXPERT,
        Action.ANNOTATE_BOX,
        len(new_labels),
        note=f"iteration {state.iteration + 1}",
    )
    d_p = state.d_p.merged_with(new_labels, covered_ids=selected)
    # Consensus consumes the selected images' crowd labels before removal.
    d_a = build_consensus_increment(d_p, state.d_c, state.d_a, selected, cfg.delta)
    d_c = state.d_c.without_images(selected)
    new_state = PipelineState(
        iteration=state.iteration + 1,
        selection_history=state.selection_history + [selected],
        d_p=d_p,
        d_c=d_c,
        d_a=d_a,
        ledger=ledger,
        seed=state.seed,
        config=cfg,
        exhausted=len(selected) < cfg.k,
    )
    new_state.check_invariants()
    return new_state


def final_models(state: PipelineState, backend: DetectorBackend) -> dict[str, object]:
    models: dict[str, object] = {"model_p": backend.fit(state.d_p, Source.MODEL_P)}
    if state.config.mode == "dual":
        models["model_a"] = backend.fit(state.d_a, Source.MODEL_A)
    return models


def run_full(
    state: PipelineState,
    backend: DetectorBackend,
    expert: ExpertOracle,
    checkpoint_dir: str | Path | None = None,
    stop_after: int | None = None,
) -> tuple[PipelineState, dict[str, object]]:
    """Run the loop to its configured g iterations (or pool exhaustion),
    checkpointing each round. ``stop_after`` ends the run early after that
    many completed iterations — used to exercise resume."""
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / f"it_{state.iteration:03d}")
    while state.iteration < state.config.g and not state.exhausted:
        if stop_after is not None and state.iteration >= stop_after:
            return state, final_models(state, backend)
        state = run_iteration(state, backend, expert)
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"it_{state.iteration:03d}")
    return state, final_models(state, backend)


def save_checkpoint(state: PipelineState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "iteration": state.iteration,
        "selection_history": state.selection_history,
        "seed": state.seed,
        "exhausted": state.exhausted,
        "config": state.config.to_dict(),
    }
    (directory / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    save_coco(state.d_p.images, state.d_p, directory / "d_p.json")
    save_coco(state.d_c.images, state.d_c, directory / "d_c.json")
    save_coco(state.d_a.images, state.d_a, directory / "d_a.json")
    state.ledger.save(directory / "ledger.json")


def load_checkpoint(directory: str | Path) -> PipelineState:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "state.json").read_text())
        config = LoopConfig.from_dict(meta["config"])
        _, d_p = load_coco(directory / "d_p.json", Source.EXPERT)
        _, d_c = load_coco(directory / "d_c.json", Source.CROWD)
        _, d_a = load_coco(directory / "d_a.json", Source.EXPERT)
        ledger = BudgetLedger.load(directory / "ledger.json")
        state = PipelineState(
            iteration=int(meta["iteration"]),
            selection_history=[[int(i) for i in r] for r in meta["selection_history"]],
            d_p=d_p,
            d_c=d_c,
            d_a=d_a,
            ledger=ledger,
            seed=int(meta["seed"]),
            config=config,
            exhausted=bool(meta["exhausted"]),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, DataFormatError) as exc:
        raise StateError(f"corrupt or unreadable checkpoint at {directory}: {exc}") from None
    state.check_invariants()
    return state


def latest_checkpoint(checkpoint_dir: str | Path) -> Path:
    checkpoint_dir = Path(checkpoint_dir)
    candidates = sorted(checkpoint_dir.glob("it_*"))
    if not candidates:
        raise StateError(f"no checkpoints under {checkpoint_dir}")
    return candidates[-1]
