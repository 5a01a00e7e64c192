"""Annotation-cost accounting.

Every labeling action is charged to a ledger in abstract cost units. The
default rates make an expert box ten times a crowd box, and a review-only
look at an existing box half an expert box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ConfigError


class Actor(str, Enum):
    CROWD = "crowd"
    EXPERT = "expert"
    REVIEWER = "reviewer"


class Action(str, Enum):
    ANNOTATE_BOX = "annotate_box"
    REVIEW_ITEM = "review_item"


@dataclass(frozen=True)
class CostModel:
    """Per-action unit costs. Defaults encode a 1 : 10 : 5 crowd/expert/review ratio."""

    crowd_box: float = 1.0
    expert_box: float = 10.0
    review_item: float = 5.0

    def __post_init__(self) -> None:
        for name in ("crowd_box", "expert_box", "review_item"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost model: {name} must be non-negative")

    def rate(self, actor: Actor, action: Action) -> float:
        if action is Action.REVIEW_ITEM:
            return self.review_item
        if actor is Actor.CROWD:
            return self.crowd_box
        if actor is Actor.EXPERT:
            return self.expert_box
        raise ConfigError(f"no box-annotation rate for actor {actor.value}")


@dataclass(frozen=True)
class ChargeEntry:
    actor: str
    action: str
    count: int
    unit_cost: float
    cost: float
    note: str


@dataclass
class BudgetLedger:
    """Append-only record of charges; totals are derived, never stored."""

    cost_model: CostModel = field(default_factory=CostModel)
    entries: list[ChargeEntry] = field(default_factory=list)

    def charge(self, actor: Actor, action: Action, count: int, note: str = "") -> float:
        if count < 0:
            raise ConfigError(f"charge count must be non-negative, got {count}")
        unit = self.cost_model.rate(actor, action)
        entry = ChargeEntry(
            actor=actor.value,
            action=action.value,
            count=count,
            unit_cost=unit,
            cost=unit * count,
            note=note,
        )
        self.entries.append(entry)
        return entry.cost

    @property
    def total(self) -> float:
        return sum(e.cost for e in self.entries)

    def total_for(self, actor: Actor | None = None, action: Action | None = None) -> float:
        return sum(
            e.cost
            for e in self.entries
            if (actor is None or e.actor == actor.value)
            and (action is None or e.action == action.value)
        )

    def count_for(self, actor: Actor | None = None, action: Action | None = None) -> int:
        return sum(
            e.count
            for e in self.entries
            if (actor is None or e.actor == actor.value)
            and (action is None or e.action == action.value)
        )

    def to_dict(self) -> dict:
        return {
            "cost_model": {
                "crowd_box": self.cost_model.crowd_box,
                "expert_box": self.cost_model.expert_box,
                "review_item": self.cost_model.review_item,
            },
            "entries": [e.__dict__ for e in self.entries],
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BudgetLedger":
        model = CostModel(**raw.get("cost_model", {}))
        ledger = cls(cost_model=model)
        for entry in raw.get("entries", []):
            ledger.entries.append(ChargeEntry(**entry))
        return ledger

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BudgetLedger":
        return cls.from_dict(json.loads(Path(path).read_text()))


def budget_percent(ledger: BudgetLedger, truth_instance_count: int, cost_model: CostModel | None = None) -> float:
    """Ledger total as a percentage of expert-annotating every true instance.

    100.0 means "same cost as a full expert pass over the ground truth".
    """
    if truth_instance_count <= 0:
        raise ConfigError("truth_instance_count must be positive")
    model = cost_model if cost_model is not None else ledger.cost_model
    full_expert = model.expert_box * truth_instance_count
    return 100.0 * ledger.total / full_expert
