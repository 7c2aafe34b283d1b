"""Scripted operator behavior: when to respond, how to correct, at what cost.

A scripted operator stands in for the human at the console. It answers
intervention requests after a sampled reaction latency, picks a correction
strategy (take over directly, or rewind a few seconds first), demonstrates
the current step with the pure expert, and hands control back. The `human`
selection defers all of this to whoever is connected to the gateway.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .domain import Action, Mode, TaskSpec
from .gridworld import WorldState, step as world_step, step_complete
from .policies import expert_action
from .session import (
    BeginRewind,
    Command,
    HumanAction,
    RewindTo,
    Session,
    StartInference,
    Takeover,
)

CORRECTION_TICK_CAP = 600


class Strategy(Enum):
    DIRECT = "direct"
    REWIND = "rewind"


@dataclass(frozen=True)
class OperatorConfig:
    """Reaction latency is drawn uniformly from [latency_min, latency_max]
    ticks. rewind_depth None means rewind the whole buffer;
    rewind_within_step additionally caps the depth at the start of the
    current step attempt, so a rewind never undoes a completed step."""

    latency_min: int = 5
    latency_max: int = 20
    strategy: Strategy = Strategy.DIRECT
    rewind_depth: Optional[int] = None
    rewind_within_step: bool = False

    def __post_init__(self) -> None:
        if not (1 <= self.latency_min <= self.latency_max):
            raise ValueError("need 1 <= latency_min <= latency_max")
        if self.rewind_depth is not None and not (1 <= self.rewind_depth <= 30):
            raise ValueError("fixed rewind depth must be within 1..30")

    def sample_latency(self, rng: random.Random) -> int:
        return rng.randint(self.latency_min, self.latency_max)


@dataclass(frozen=True)
class InterventionRequest:
    robot_id: str
    request_tick: int
    step_index: int


class OperatorRejection(Exception):
    pass


def _expert_corrections(world: WorldState, task: TaskSpec, step_index: int) -> list[Action]:
    """The expert's action sequence from `world` until the step predicate
    holds. Empty when it already does."""
    out: list[Action] = []
    for _ in range(CORRECTION_TICK_CAP):
        if step_complete(world, task, step_index):
            return out
        a = expert_action(world, task, step_index)
        if a is Action.NOOP:
            break  # expert sees nothing left to do here
        out.append(a)
        world = world_step(world, a)
    if not step_complete(world, task, step_index):
        raise OperatorRejection(
            f"expert could not complete step {step_index} of {task.name} "
            f"within {CORRECTION_TICK_CAP} ticks"
        )
    return out


def respond(
    request: InterventionRequest,
    session: Session,
    config: OperatorConfig,
    rng: random.Random,
) -> list[Command]:
    """Plan the full command sequence answering one request.

    The session must be awaiting intervention (or still in Inference, for a
    monitor-driven preempt); its world is frozen while awaiting, so the plan
    computed here stays valid until the commands are issued.
    """
    if session.robot_id != request.robot_id:
        raise OperatorRejection(
            f"request for {request.robot_id} routed to {session.robot_id}"
        )
    if session.mode not in (Mode.AWAITING_INTERVENTION, Mode.INFERENCE):
        raise OperatorRejection(f"robot {session.robot_id} is in {session.mode.value}")

    strategy = config.strategy
    if strategy is Strategy.REWIND and not session.buffer:
        strategy = Strategy.DIRECT  # nothing buffered yet; fall back

    if strategy is Strategy.DIRECT:
        corrections = _expert_corrections(session.world, session.task, session.step_index)
        plan: list[Command] = [Takeover()]
    else:
        k = len(session.buffer) if config.rewind_depth is None else min(
            config.rewind_depth, len(session.buffer)
        )
        if config.rewind_within_step:
            # One snapshot per tick of the current attempt, so the
            # ticks_in_step-th newest is the state the attempt began from.
            k = min(k, max(1, session.ticks_in_step))
        snap = session.buffer[-k]
        corrections = _expert_corrections(snap.world, session.task, snap.step_index)
        plan = [BeginRewind(), RewindTo(k)]
    plan.extend(HumanAction(a) for a in corrections)
    plan.append(StartInference())
    return plan


# --- human-gated monitoring -------------------------------------------------

def expert_ticks_to_complete(
    world: WorldState, task: TaskSpec, step_index: int, cap: int = CORRECTION_TICK_CAP
) -> int:
    """How many expert actions this state is from completing the step; the
    monitor's notion of subgoal distance."""
    for t in range(cap):
        if step_complete(world, task, step_index):
            return t
        world = world_step(world, expert_action(world, task, step_index))
    return cap


class HumanGatedMonitor:
    """Stand-in for an operator watching one robot and preempting failure.

    Tracks subgoal distance over a sliding window; requests intervention
    when a full window of policy actions on one step has produced no net
    approach to the subgoal. An infinite lookahead never requests,
    degenerating to sentinel-only operation.
    """

    def __init__(self, session: Session, lookahead: float) -> None:
        if lookahead < 1:
            raise ValueError("lookahead must be >= 1 (or infinity to disable)")
        self.session = session
        self.lookahead = lookahead
        self._window: deque[int] = deque(
            maxlen=int(lookahead) + 1 if lookahead != float("inf") else 1
        )
        self._watched_step: Optional[int] = None

    def observe_tick(self) -> Optional[InterventionRequest]:
        s = self.session
        if s.mode is not Mode.INFERENCE or s.episode_complete:
            self._window.clear()
            return None
        if s.step_index != self._watched_step:
            self._watched_step = s.step_index
            self._window.clear()
        self._window.append(expert_ticks_to_complete(s.world, s.task, s.step_index))
        if self.lookahead == float("inf"):
            return None
        if len(self._window) < self._window.maxlen:
            return None
        if self._window[-1] >= self._window[0]:
            request = InterventionRequest(s.robot_id, s.tick_counter - 1, s.step_index)
            self._window.clear()
            return request
        return None


def human_gated_monitor(session: Session, lookahead: float) -> HumanGatedMonitor:
    """Attach a monitor to a session; callers poll observe_tick() per tick."""
    return HumanGatedMonitor(session, lookahead)


# --- selection strings ------------------------------------------------------

def parse_operator_spec(spec: str) -> Optional[OperatorConfig]:
    """Parse `scripted:direct`, `scripted:rewind:k=full`, `scripted:rewind:k=12`,
    `scripted:rewind:k=step` (full buffer but never past the current step
    attempt), or `human` (which returns None: commands come from the gateway)."""
    parts = [p.strip() for p in spec.strip().lower().split(":")]
    if parts == ["human"]:
        return None
    if not parts or parts[0] != "scripted" or len(parts) < 2:
        raise ValueError(f"bad operator spec {spec!r}")
    if parts[1] == "direct":
        if len(parts) > 2:
            raise ValueError(f"unexpected options in {spec!r}")
        return OperatorConfig(strategy=Strategy.DIRECT)
    if parts[1] == "rewind":
        depth: Optional[int] = None
        within = False
        if len(parts) == 3:
            key, _, val = parts[2].partition("=")
            if key != "k":
                raise ValueError(f"unknown rewind option {parts[2]!r}")
            if val == "step":
                within = True
            else:
                depth = None if val == "full" else int(val)
        elif len(parts) > 3:
            raise ValueError(f"bad operator spec {spec!r}")
        return OperatorConfig(
            strategy=Strategy.REWIND, rewind_depth=depth, rewind_within_step=within
        )
    raise ValueError(f"unknown scripted strategy {parts[1]!r}")
