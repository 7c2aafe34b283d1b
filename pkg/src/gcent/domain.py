"""Core vocabulary: modes, actions, frames, task specs, episode scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np


class Mode(Enum):
    """Session operating mode; every logged frame carries exactly one."""

    INFERENCE = "Inference"
    INTERVENTION = "Intervention"
    REWIND = "Rewind"
    AWAITING_INTERVENTION = "AwaitingIntervention"


class Action(Enum):
    """Discrete gripper actions. Ordinals are total and stable; they are the
    deterministic tie-break order used by the cloner's majority vote."""

    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    GRASP = 4
    RELEASE = 5
    PRESS = 6
    NOOP = 7


MOVE_ACTIONS = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)

# (row delta, col delta) per movement action; row 0 is the top of the grid.
MOVE_DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


class Actor(Enum):
    POLICY = "Policy"
    HUMAN = "Human"


class Template(Enum):
    """Task families mirroring the four step-structured manipulation tasks."""

    STACKING = "stacking"
    INSERTION = "insertion"
    APPLIANCE = "appliance"
    TYPING = "typing"


# Step counts are part of the template contract.
TEMPLATE_STEP_COUNTS = {
    Template.STACKING: 8,
    Template.INSERTION: 2,
    Template.APPLIANCE: 5,
    Template.TYPING: 7,
}

FeatureVector = np.ndarray  # flat float32 vector, fixed length per task


@dataclass(frozen=True)
class StepSpec:
    """One atomic step: an instruction plus the id of its ground-truth predicate."""

    step_index: int
    instruction: str
    predicate_id: str


@dataclass(frozen=True)
class TaskSpec:
    template: Template
    steps: tuple[StepSpec, ...]
    name: str

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("task must have at least one step")
        want = TEMPLATE_STEP_COUNTS[self.template]
        if len(self.steps) != want:
            raise ValueError(
                f"{self.template.value} requires {want} steps, got {len(self.steps)}"
            )

    @property
    def n_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Score:
    """Episode score in [0, 1]; exact rational, proportional to steps completed."""

    value: Fraction

    def __post_init__(self) -> None:
        if not (0 <= self.value <= 1):
            raise ValueError(f"score out of range: {self.value}")

    @property
    def as_float(self) -> float:
        return float(self.value)


def score_episode(completed_steps: int, total_steps: int) -> Score:
    """Proportional credit: completed / total, exact."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= completed_steps <= total_steps):
        raise ValueError(f"completed_steps {completed_steps} not in 0..{total_steps}")
    return Score(Fraction(completed_steps, total_steps))


def mean_score(scores: Sequence[Score]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation of a trial batch."""
    if not scores:
        raise ValueError("mean_score of empty list")
    vals = [s.value for s in scores]
    mean = sum(vals, Fraction(0)) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return float(mean), math.sqrt(float(var))


@dataclass(frozen=True, eq=False)
class Frame:
    """One tick of logged experience; the unit of all metrics and trainsets."""

    tick: int
    episode_id: str
    robot_id: str
    step_index: int
    observation: FeatureVector
    action: Action
    actor: Actor
    mode: Mode
    sentinel_verdict: Optional[bool] = None

    def __post_init__(self) -> None:
        if self.tick < 0 or self.step_index < 0:
            raise ValueError("tick and step_index must be >= 0")
        if self.mode in (Mode.INTERVENTION, Mode.REWIND) and self.actor is not Actor.HUMAN:
            raise ValueError(f"{self.mode.value} frames must have a human actor")
        if (
            self.mode in (Mode.INFERENCE, Mode.AWAITING_INTERVENTION)
            and self.actor is not Actor.POLICY
        ):
            raise ValueError(f"{self.mode.value} frames must have a policy actor")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.tick == other.tick
            and self.episode_id == other.episode_id
            and self.robot_id == other.robot_id
            and self.step_index == other.step_index
            and np.array_equal(self.observation, other.observation)
            and self.action == other.action
            and self.actor == other.actor
            and self.mode == other.mode
            and self.sentinel_verdict == other.sentinel_verdict
        )

    def __hash__(self) -> int:  # frames are identified by position, not content
        return id(self)
