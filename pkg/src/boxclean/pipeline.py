"""End-to-end runs over a working directory.

A run directory is self-describing:

    workdir/
      config.json           frozen run configuration
      truth.json            ground truth (generated or copied reference)
      crowd.json            noisy crowd labels + noise_ledger.json
      checkpoints/it_NNN/   loop state after every iteration
      step2/                queue.jsonl, decisions.jsonl, corrected.json,
                            overlays.json, meta.json, report.json
      cleaned.json          final dataset (expert images + corrected rest)
      ledger.json           cost ledger
      report.json           evaluation rows + rendered table
      .lock                 present while a run owns the directory

Closed-loop mode resolves the review queue with the truth oracle and carries
straight through to evaluation; interactive mode stops once the queue is
written, to be finished by the review service and `finalize_run`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .budget import CostModel, budget_percent
from .correction import (
    CorrectionConfig,
    apply_decisions,
    load_decisions,
    load_queue,
    materialize_queue,
    prepare_correction,
    save_queue,
)
from .data import AnnotationSet, Source, label_to_dict, load_coco, save_coco
from .detector import (
    DetectorConfig,
    ExternalDetectorBackend,
    SimulatedDetectorBackend,
    fit_simulated,
    predict_simulated,
)
from .errors import ConfigError, StateError
from .evaluation import EvalReport, ap50, evaluate_labels, flatten_predictions, render_table
from .loop import (
    LoopConfig,
    PipelineState,
    derive_seed,
    final_models,
    initialize,
    latest_checkpoint,
    load_checkpoint,
    run_full,
)
from .noise import CorpusSpec, NoiseSpec, assign_difficulty, corrupt, make_corpus
from .oracles import TruthExpert, TruthReviewer


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 100
    seeds: tuple[int, ...] = (9001, 9002, 9003)

    def __post_init__(self) -> None:
        if self.n_images <= 0:
            raise ConfigError("eval config: n_images must be positive")
        if not self.seeds:
            raise ConfigError("eval config: need at least one prediction seed")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; `seed` drives every random stream."""

    seed: int
    corpus: CorpusSpec | None = None
    truth_json: str | None = None
    crowd_json: str | None = None
    noise: NoiseSpec | None = None
    loop: LoopConfig = field(default_factory=LoopConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    detector_backend: str = "sim"  # "sim" | "external:<command template>"
    cost: CostModel = field(default_factory=CostModel)
    eval: EvalConfig = field(default_factory=EvalConfig)
    reviewer: str = "oracle"  # "oracle" | "interactive"

    def __post_init__(self) -> None:
        if self.reviewer not in ("oracle", "interactive"):
            raise ConfigError(f"reviewer must be oracle or interactive, got {self.reviewer!r}")
        if self.detector_backend != "sim" and not self.detector_backend.startswith("external:"):
            raise ConfigError(
                f"detector_backend must be 'sim' or 'external:<command>', got {self.detector_backend!r}"
            )

    def resolved_corpus(self) -> CorpusSpec:
        return self.corpus if self.corpus is not None else CorpusSpec(seed=self.seed)

    def resolved_noise(self) -> NoiseSpec:
        return self.noise if self.noise is not None else NoiseSpec(seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus": self.resolved_corpus().__dict__,
            "truth_json": self.truth_json,
            "crowd_json": self.crowd_json,
            "noise": self.resolved_noise().__dict__,
            "loop": self.loop.to_dict(),
            "correction": self.correction.__dict__,
            "detector": self.detector.__dict__,
            "detector_backend": self.detector_backend,
            "cost": self.cost.__dict__,
            "eval": {"n_images": self.eval.n_images, "seeds": list(self.eval.seeds)},
            "reviewer": self.reviewer,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        raw = dict(raw)
        if "seed" not in raw or raw["seed"] is None:
            raise ConfigError("config: seed is required; runs without one are not reproducible")
        try:
            return cls(
                seed=int(raw["seed"]),
                corpus=CorpusSpec(**raw["corpus"]) if raw.get("corpus") else None,
                truth_json=raw.get("truth_json"),
                crowd_json=raw.get("crowd_json"),
                noise=NoiseSpec(**raw["noise"]) if raw.get("noise") else None,
                loop=LoopConfig(**raw.get("loop", {})),
                correction=CorrectionConfig(**raw.get("correction", {})),
                detector=DetectorConfig(**raw.get("detector", {})),
                detector_backend=raw.get("detector_backend", "sim"),
                cost=CostModel(**raw.get("cost", {})),
                eval=EvalConfig(
                    n_images=raw.get("eval", {}).get("n_images", 100),
                    seeds=tuple(raw.get("eval", {}).get("seeds", (9001, 9002, 9003))),
                ),
                reviewer=raw.get("reviewer", "oracle"),
            )
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None


class workdir_lock:
    """One pipeline run per directory, enforced by a lock file."""

    def __init__(self, workdir: Path) -> None:
        self.path = workdir / ".lock"

    def __enter__(self) -> "workdir_lock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StateError(
                f"{self.path} exists: another run owns this directory (remove it if stale)"
            ) from None
        with os.fdopen(fd, "w") as handle:
            handle.write(f"pid={os.getpid()}\n")
        return self

    def __exit__(self, *_exc) -> None:
        self.path.unlink(missing_ok=True)


def _load_or_make_data(
    config: RunConfig, workdir: Path
) -> tuple[AnnotationSet, AnnotationSet]:
    truth_path = workdir / "truth.json"
    crowd_path = workdir / "crowd.json"
    if truth_path.exists() and crowd_path.exists():
        _, truth = load_coco(truth_path, Source.EXPERT)
        _, crowd = load_coco(crowd_path, Source.CROWD)
        return truth, crowd
    if config.truth_json:
        _, truth = load_coco(config.truth_json, Source.EXPERT)
    else:
        _, truth = make_corpus(config.resolved_corpus())
    save_coco(truth.images, truth, truth_path)
    if config.crowd_json:
        _, crowd = load_coco(config.crowd_json, Source.CROWD)
    else:
        result = corrupt(truth, config.resolved_noise(), assign_difficulty(truth, config.seed))
        crowd = result.crowd
        sidecar = [
            {"label_id": label_id, "noise_type": result.noise_ledger[label_id]}
            for label_id in sorted(result.noise_ledger)
        ]
        (workdir / "noise_ledger.json").write_text(
            json.dumps({"entries": sidecar, "bkg_skipped": result.bkg_skipped}, sort_keys=True, indent=2)
            + "\n"
        )
    save_coco(crowd.images, crowd, crowd_path)
    return truth, crowd


def _make_backend(config: RunConfig, truth: AnnotationSet, workdir: Path):
    if config.detector_backend == "sim":
        difficulty = assign_difficulty(truth, config.seed)
        return SimulatedDetectorBackend(truth, difficulty, config.detector)
    command = config.detector_backend.split(":", 1)[1]
    return ExternalDetectorBackend(command, workdir / "external")


def _merge_cleaned(state: PipelineState, b_clean: AnnotationSet) -> AnnotationSet:
    labels = list(state.d_p.all_labels()) + list(b_clean.all_labels())
    return AnnotationSet(
        Source.CROWD,
        state.d_p.images,
        labels,
        covered_ids=state.d_p.covered_ids | b_clean.covered_ids,
        categories=state.d_p.categories,
    )


def _write_overlays(
    workdir: Path,
    d_c: AnnotationSet,
    preds_p: dict,
    preds_a: dict,
    image_ids: list[int],
    iou_threshold: float,
) -> None:
    from .matching import partition_image

    overlays = {}
    for image_id in image_ids:
        info = d_c.images[image_id]
        part = partition_image(
            d_c.labels_for(image_id),
            preds_p.get(image_id, ()),
            preds_a.get(image_id, ()),
            iou_threshold,
        )
        overlays[str(image_id)] = {
            "width": info.width,
            "height": info.height,
            "file_name": info.file_name,
            "crowd": [label_to_dict(l) for l in d_c.labels_for(image_id)],
            "model_p": [label_to_dict(l) for l in preds_p.get(image_id, ())],
            "model_a": [label_to_dict(l) for l in preds_a.get(image_id, ())],
            "regions": part.to_debug_dict(),
        }
    (workdir / "step2" / "overlays.json").write_text(
        json.dumps(overlays, sort_keys=True, indent=2) + "\n"
    )


def run_pipeline(
    config: RunConfig,
    workdir: str | Path,
    resume: bool = False,
    stop_after: int | None = None,
) -> dict:
    """Execute (or continue) a full run; returns the report dict."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "step2").mkdir(exist_ok=True)
    config_path = workdir / "config.json"
    with workdir_lock(workdir):
        if resume:
            if not config_path.exists():
                raise StateError(f"{workdir}: nothing to resume (no config.json)")
            stored = RunConfig.from_dict(json.loads(config_path.read_text()))
            if stored.seed != config.seed:
                raise StateError(
                    f"resume seed {config.seed} does not match the run's seed {stored.seed}"
                )
            config = stored
        else:
            config_path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")

        truth, crowd = _load_or_make_data(config, workdir)
        backend = _make_backend(config, truth, workdir)
        expert = TruthExpert(truth)

        checkpoints = workdir / "checkpoints"
        if resume and checkpoints.exists() and list(checkpoints.glob("it_*")):
            state = load_checkpoint(latest_checkpoint(checkpoints))
            if state.config != config.loop:
                raise StateError("resume: loop config in checkpoint differs from config.json")
        else:
            state = initialize(crowd, expert, config.loop, config.seed, config.cost)
        state, models = run_full(state, backend, expert, checkpoints, stop_after)
        if stop_after is not None and state.iteration < config.loop.g and not state.exhausted:
            return {"status": "interrupted", "iteration": state.iteration}

        remaining = sorted(state.d_c.covered_ids)
        step2_seed = derive_seed(config.seed, "step2-predict")
        preds_p = backend.predict(models["model_p"], remaining, step2_seed)
        preds_a = (
            backend.predict(models["model_a"], remaining, step2_seed)
            if "model_a" in models
            else {i: [] for i in remaining}
        )
        correction_cfg = replace(config.correction, iou_threshold=config.loop.iou_threshold)
        next_label_id = max(truth.max_label_id(), crowd.max_label_id()) + 1
        corrected, queue, step2_report, next_label_id = prepare_correction(
            state.d_c, preds_p, preds_a, remaining, correction_cfg, next_label_id
        )
        save_queue(queue, workdir / "step2" / "queue.jsonl")
        save_coco(corrected.images, corrected, workdir / "step2" / "corrected.json")
        (workdir / "step2" / "meta.json").write_text(
            json.dumps(
                {"next_label_id": next_label_id, "step2_seed": step2_seed},
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        _write_overlays(
            workdir, state.d_c, preds_p, preds_a, remaining, config.loop.iou_threshold
        )
        (workdir / "step2" / "report.json").write_text(
            json.dumps(step2_report.to_dict(), sort_keys=True, indent=2) + "\n"
        )

        if config.reviewer == "interactive":
            state.ledger.save(workdir / "ledger.json")
            return {
                "status": "awaiting-review",
                "pending_items": len(queue),
                "queue": str(workdir / "step2" / "queue.jsonl"),
            }

        reviewer = TruthReviewer(truth)
        decisions = reviewer.decide(queue, corrected)
        with (workdir / "step2" / "decisions.jsonl").open("w") as log:
            for decision in decisions:
                log.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")
        return finalize_run(workdir, config=config)


def finalize_run(workdir: str | Path, config: RunConfig | None = None) -> dict:
    """Apply logged review decisions and produce the final dataset + report.

    Separated from `run_pipeline` so an interactive review (through the HTTP
    service) can be finished later with the same code path the closed loop
    uses.
    """
    workdir = Path(workdir)
    if config is None:
        config_path = workdir / "config.json"
        if not config_path.exists():
            raise StateError(f"{workdir}: no config.json; run the pipeline first")
        config = RunConfig.from_dict(json.loads(config_path.read_text()))
    _, truth = load_coco(workdir / "truth.json", Source.EXPERT)
    _, crowd = load_coco(workdir / "crowd.json", Source.CROWD)
    _, corrected = load_coco(workdir / "step2" / "corrected.json", Source.CROWD)
    queue = load_queue(workdir / "step2" / "queue.jsonl")
    decisions = load_decisions(workdir / "step2" / "decisions.jsonl")
    resolved = materialize_queue(queue, decisions)
    meta = json.loads((workdir / "step2" / "meta.json").read_text())
    state = load_checkpoint(latest_checkpoint(workdir / "checkpoints"))

    b_clean = apply_decisions(corrected, resolved, int(meta["next_label_id"]), state.ledger)
    cleaned = _merge_cleaned(state, b_clean)
    save_coco(cleaned.images, cleaned, workdir / "cleaned.json")
    state.ledger.save(workdir / "ledger.json")

    step2_report = json.loads((workdir / "step2" / "report.json").read_text())
    step2_report["decision_counts"] = _decision_counts(resolved)
    (workdir / "step2" / "report.json").write_text(
        json.dumps(step2_report, sort_keys=True, indent=2) + "\n"
    )

    report = build_report(config, truth, crowd, cleaned, state)
    (workdir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def _decision_counts(resolved) -> dict[str, int]:
    counts: dict[str, int] = {}
    for item in resolved:
        counts[item.status.value] = counts.get(item.status.value, 0) + 1
    return dict(sorted(counts.items()))


def _detector_ap(
    train: AnnotationSet,
    truth: AnnotationSet,
    config: RunConfig,
) -> float:
    """Seed-averaged AP50 of a detector fitted on `train`, measured on a
    held-out synthetic corpus (same generator, different seed)."""
    corpus = config.resolved_corpus()
    eval_spec = replace(corpus, n_images=config.eval.n_images, seed=corpus.seed + 424243)
    _, eval_truth = make_corpus(eval_spec)
    eval_difficulty = assign_difficulty(eval_truth, eval_spec.seed)
    skill = fit_simulated(
        train,
        Source.MODEL_P,
        config.detector,
        reference=truth,
        difficulty=assign_difficulty(truth, config.seed),
    )
    values = []
    for seed in config.eval.seeds:
        preds = predict_simulated(
            skill, eval_truth.covered_ids, eval_truth, eval_difficulty, seed
        )
        values.append(ap50(flatten_predictions(preds), eval_truth))
    return float(sum(values) / len(values))


def build_report(
    config: RunConfig,
    truth: AnnotationSet,
    crowd: AnnotationSet,
    cleaned: AnnotationSet,
    state: PipelineState,
) -> dict:
    """Comparison rows: label quality of raw vs cleaned sets, and detectors
    trained on raw / cleaned / truth labels. Detector rows need the simulated
    backend; with an external detector only label rows are produced."""
    budget = budget_percent(state.ledger, truth.label_count, config.cost)
    rows = [
        evaluate_labels(crowd, truth, method="crowd-labels"),
        evaluate_labels(cleaned, truth, method="cleaned-labels"),
    ]
    rows[1].budget = budget
    if config.detector_backend == "sim":
        rows.append(
            EvalReport(method="detector-noisy", ap50=_detector_ap(crowd, truth, config))
        )
        rows.append(
            EvalReport(method="detector-cleaned", ap50=_detector_ap(cleaned, truth, config))
        )
        ceiling = EvalReport(
            method="detector-clean-ceiling", ap50=_detector_ap(truth, truth, config)
        )
        ceiling.budget = 100.0
        rows.append(ceiling)
    table = render_table(rows)
    return {
        "status": "complete",
        "rows": [r.to_dict() for r in rows],
        "budget_percent": budget,
        "ledger_total": state.ledger.total,
        "selected_images": sorted(state.x_selected),
        "iterations": state.iteration,
        "table": table,
    }
