"""Pluggable detectors: a parametric simulator and a file-based external adapter.

The simulator stands in for detector training at desk scale. A model's skill
is a saturating function of how many *correct* training labels it saw, so
cleaner training data yields a measurably better model. When a difficulty map
is supplied, each correct label is weighted by how much it teaches: a label on
a hard instance counts up to 1.5x, a trivial one 0.5x, so a training set
focused where models struggle buys more skill per label. Predictions are
oracle-backed (drawn around ground truth): detection probability rises with
skill and falls with instance difficulty, box jitter and false-positive rate
shrink as skill grows, and confidence correlates with correctness.

The two roles differ the way their training sets differ: the cleaning model
(model_p, trained on expert labels) is greedier and over-predicts early; the
consensus model (model_a, trained on crowd-corroborated labels) is starved
and under-predicts, deterministically suppressing instances well beyond its
skill.

Random streams are keyed by (seed, image, role, purpose), so two runs that
differ only in skill share every underlying draw: a strictly better model
detects a superset of instances with strictly less jitter. Directional
comparisons (cleaned vs noisy training) are therefore monotone rather than
drowned in sampling noise.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import AnnotationSet, Label, Source
from .errors import (
    ConfigError,
    DataFormatError,
    ExternalCommandError,
    ExternalOutputMissingError,
)
from .geometry import Box, iou
from .noise import DifficultyMap

_ROLE_TAG = {Source.MODEL_P: 1, Source.MODEL_A: 2}
_PURPOSE_TAG = {"detect": 31, "jitter": 37, "conf": 41, "fpsel": 43, "fp": 47}
_ID_BASE = {Source.MODEL_P: 10**12, Source.MODEL_A: 2 * 10**12}


def _rng(seed: int, image_id: int, role: Source, purpose: str, slot: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, image_id, _ROLE_TAG[role], _PURPOSE_TAG[purpose], slot))
    )


@dataclass(frozen=True)
class DetectorConfig:
    """All simulator constants in one place so sweeps are scriptable."""

    s_max: float = 0.95
    skill_floor: float = 0.05
    tau: float = 600.0
    slope: float = 4.0
    fp_base_p: float = 0.05
    fp_base_a: float = 0.03
    jitter_base: float = 0.15
    conf_sigma: float = 0.08
    fp_conf_mean: float = 0.2
    fp_conf_sigma: float = 0.1
    suppress_margin: float = 0.1
    quality_iou: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 <= self.skill_floor < self.s_max <= 1.0):
            raise ConfigError("detector config: need 0 <= skill_floor < s_max <= 1")
        if self.tau <= 0:
            raise ConfigError("detector config: tau must be positive")

    def fp_base(self, role: Source) -> float:
        return self.fp_base_p if role is Source.MODEL_P else self.fp_base_a


@dataclass(frozen=True)
class DetectorSkill:
    """A fitted simulated model: a skill level plus the role's biases.

    ``training_instance_count`` is the number of counted labels; with
    difficulty weighting ``effective_training_count`` is their informativeness
    sum, which is what the skill law consumed.
    """

    role: Source
    training_instance_count: int
    skill: float
    config: DetectorConfig
    effective_training_count: float

    @property
    def fp_rate(self) -> float:
        return self.config.fp_base(self.role) * (1.0 - self.skill)

    @property
    def jitter_sigma(self) -> float:
        return self.config.jitter_base * (1.0 - self.skill)


def _quality_matches(
    train: AnnotationSet, reference: AnnotationSet, iou_threshold: float
) -> list[int]:
    """Reference ids of training labels that correspond to a real instance.

    Greedy one-to-one matching per image at ``iou_threshold``; each reference
    label absorbs at most one training label.
    """
    matched: list[int] = []
    for image_id in sorted(train.covered_ids):
        cands = train.labels_for(image_id)
        refs = reference.labels_for(image_id)
        if not cands or not refs:
            continue
        pairs = []
        for c in cands:
            for r in refs:
                overlap = iou(c.box, r.box)
                if overlap >= iou_threshold:
                    pairs.append((-overlap, c.label_id, r.label_id))
        pairs.sort()
        used_c: set[int] = set()
        used_r: set[int] = set()
        for _, cid, rid in pairs:
            if cid in used_c or rid in used_r:
                continue
            used_c.add(cid)
            used_r.add(rid)
            matched.append(rid)
    return matched


def fit_simulated(
    train: AnnotationSet,
    role: Source,
    config: DetectorConfig = DetectorConfig(),
    reference: AnnotationSet | None = None,
    difficulty: DifficultyMap | None = None,
) -> DetectorSkill:
    """Skill from training-set size via a saturating law.

    With a ``reference`` set, only training labels that match a reference
    instance (IoU >= quality_iou, one-to-one) count — noisy labels buy no
    skill. Without one, the raw label count is used. A ``difficulty`` map
    (keyed by reference label id, requires ``reference``) weights each counted
    label by 0.5 + difficulty: hard examples teach more than trivial ones.
    """
    if role not in _ROLE_TAG:
        raise ConfigError(f"detector role must be model_p or model_a, got {role}")
    if difficulty is not None and reference is None:
        raise ConfigError("difficulty-weighted fitting needs a reference set")
    if reference is None:
        n = train.label_count
        effective = float(n)
    else:
        matched = _quality_matches(train, reference, config.quality_iou)
        n = len(matched)
        if difficulty is None:
            effective = float(n)
        else:
            effective = float(sum(0.5 + difficulty.get(rid, 0.5) for rid in matched))
    skill = config.skill_floor + (config.s_max - config.skill_floor) * (
        1.0 - float(np.exp(-effective / config.tau))
    )
    return DetectorSkill(
        role=role,
        training_instance_count=n,
        skill=skill,
        config=config,
        effective_training_count=effective,
    )


def _sigmoid(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def _predict_one_image(
    model: DetectorSkill,
    image_id: int,
    ground_truth: AnnotationSet,
    difficulty: DifficultyMap,
    seed: int,
) -> list[Label]:
    cfg = model.config
    truths = sorted(ground_truth.labels_for(image_id), key=lambda l: l.label_id)
    info = ground_truth.images[image_id]
    rng_detect = _rng(seed, image_id, model.role, "detect")
    rng_jitter = _rng(seed, image_id, model.role, "jitter")
    rng_conf = _rng(seed, image_id, model.role, "conf")
    rng_fpsel = _rng(seed, image_id, model.role, "fpsel")

    out: list[Label] = []
    seq = 0
    base = _ID_BASE[model.role] + image_id * 10**6
    for label in truths:
        # Draw every variate unconditionally so streams align across skills.
        u = float(rng_detect.uniform())
        zx, zy, zw, zh = rng_jitter.normal(0.0, 1.0, size=4)
        zc = float(rng_conf.normal(0.0, 1.0))
        d = difficulty[label.label_id]
        p_detect = _sigmoid(cfg.slope * (model.skill - d))
        if model.role is Source.MODEL_A and d > model.skill + cfg.suppress_margin:
            p_detect = 0.0  # consensus incompleteness: hard instances unseen
        if u >= p_detect:
            continue
        sigma = model.jitter_sigma
        w = label.box.w * max(0.2, 1.0 + sigma * zw)
        h = label.box.h * max(0.2, 1.0 + sigma * zh)
        box = Box(
            label.box.cx + sigma * label.box.w * zx - w / 2.0,
            label.box.cy + sigma * label.box.h * zy - h / 2.0,
            w,
            h,
        )
        conf = float(min(0.99, max(0.01, p_detect + cfg.conf_sigma * zc)))
        out.append(
            Label(
                label_id=base + seq,
                image_id=image_id,
                box=box,
                source=model.role,
                category_id=label.category_id,
                confidence=conf,
            )
        )
        seq += 1

    # One false-positive slot per true instance; slots fire independently and
    # are nested across skill levels (higher skill -> subset of slots).
    true_boxes = [l.box for l in truths]
    for slot in range(len(truths)):
        u = float(rng_fpsel.uniform())
        if u >= model.fp_rate:
            continue
        rng_fp = _rng(seed, image_id, model.role, "fp", slot + 1)
        placed = None
        for _ in range(100):
            w = float(rng_fp.uniform(0.05, 0.25)) * info.width
            h = float(rng_fp.uniform(0.05, 0.25)) * info.height
            x = float(rng_fp.uniform(0.0, info.width - w))
            y = float(rng_fp.uniform(0.0, info.height - h))
            cand = Box(x, y, w, h)
            if all(iou(cand, t) < 0.1 for t in true_boxes):
                placed = cand
                break
        if placed is None:
            continue
        conf = float(
            min(0.99, max(0.01, cfg.fp_conf_mean + cfg.fp_conf_sigma * rng_fp.normal()))
        )
        out.append(
            Label(
                label_id=base + seq,
                image_id=image_id,
                box=placed,
                source=model.role,
                category_id=1,
                confidence=conf,
            )
        )
        seq += 1
    return out


def predict_simulated(
    model: DetectorSkill,
    image_ids: Iterable[int],
    ground_truth: AnnotationSet,
    difficulty: DifficultyMap,
    seed: int,
) -> dict[int, list[Label]]:
    """Per-image predictions; deterministic in (model, image set, seed)."""
    out: dict[int, list[Label]] = {}
    for image_id in sorted(set(image_ids)):
        if image_id not in ground_truth.images:
            raise ConfigError(f"cannot predict on unknown image {image_id}")
        out[image_id] = _predict_one_image(model, image_id, ground_truth, difficulty, seed)
    return out


class SimulatedDetectorBackend:
    """Oracle-backed simulator satisfying the fit/predict backend contract."""

    def __init__(
        self,
        ground_truth: AnnotationSet,
        difficulty: DifficultyMap,
        config: DetectorConfig = DetectorConfig(),
    ) -> None:
        self.ground_truth = ground_truth
        self.difficulty = difficulty
        self.config = config

    def fit(self, train: AnnotationSet, role: Source) -> DetectorSkill:
        return fit_simulated(
            train, role, self.config, reference=self.ground_truth, difficulty=self.difficulty
        )

    def predict(
        self, model: DetectorSkill, image_ids: Iterable[int], seed: int
    ) -> dict[int, list[Label]]:
        return predict_simulated(model, image_ids, self.ground_truth, self.difficulty, seed)


@dataclass(frozen=True)
class ExternalModel:
    """Handle for a 'trained' external detector: the frozen training file."""

    role: Source
    train_json: Path


class ExternalDetectorBackend:
    """Adapter for a real detector driven by a shell command.

    The command template must contain the placeholders {train_json},
    {image_list} and {out_json}. It is invoked once per predict call and
    must write COCO-style predictions (annotations with a "score" field)
    to {out_json}.
    """

    def __init__(self, command_template: str, workdir: str | Path) -> None:
        for placeholder in ("{train_json}", "{image_list}", "{out_json}"):
            if placeholder not in command_template:
                raise ConfigError(f"external detector command lacks {placeholder}")
        self.command_template = command_template
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._calls = 0

    def fit(self, train: AnnotationSet, role: Source) -> ExternalModel:
        from .data import save_coco

        self._calls += 1
        train_json = self.workdir / f"train_{role.value}_{self._calls:03d}.json"
        save_coco(train.images, train, train_json)
        return ExternalModel(role=role, train_json=train_json)

    def predict(
        self, model: ExternalModel, image_ids: Iterable[int], seed: int
    ) -> dict[int, list[Label]]:
        image_ids = sorted(set(image_ids))
        tag = f"{model.role.value}_{self._calls:03d}_{seed}"
        image_list = self.workdir / f"images_{tag}.json"
        out_json = self.workdir / f"pred_{tag}.json"
        image_list.write_text(json.dumps(image_ids) + "\n")
        command = self.command_template.format(
            train_json=shlex.quote(str(model.train_json)),
            image_list=shlex.quote(str(image_list)),
            out_json=shlex.quote(str(out_json)),
        )
        proc = subprocess.run(command, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExternalCommandError(
                f"external detector exited {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        if not out_json.exists():
            raise ExternalOutputMissingError(f"external detector wrote no file at {out_json}")
        return _parse_external_predictions(out_json, model.role, image_ids)


def _parse_external_predictions(
    path: Path, role: Source, image_ids: Sequence[int]
) -> dict[int, list[Label]]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, Mapping) or "annotations" not in raw:
        raise DataFormatError(f"{path}: expected an object with an 'annotations' array")
    out: dict[int, list[Label]] = {i: [] for i in image_ids}
    entries = sorted(raw["annotations"], key=lambda a: (a.get("image_id", 0), a.get("id", 0)))
    base = _ID_BASE[role]
    for seq, entry in enumerate(entries):
        ann_id = entry.get("id", f"#{seq}")
        if "score" not in entry:
            raise DataFormatError(f"{path}: annotation {ann_id}: missing 'score'")
        score = float(entry["score"])
        if not (0.0 <= score <= 1.0):
            raise DataFormatError(f"{path}: annotation {ann_id}: score {score} outside [0, 1]")
        image_id = int(entry["image_id"])
        if image_id not in out:
            raise DataFormatError(f"{path}: annotation {ann_id}: unrequested image {image_id}")
        bbox = entry.get("bbox")
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise DataFormatError(f"{path}: annotation {ann_id}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise DataFormatError(f"{path}: annotation {ann_id}: non-positive size")
        out[image_id].append(
            Label(
                label_id=base + seq,
                image_id=image_id,
                box=Box(x, y, w, h),
                source=role,
                category_id=int(entry.get("category_id", 1)),
                confidence=min(0.99, max(0.01, score)),
            )
        )
    return out
