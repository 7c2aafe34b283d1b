"""One operator, N robots: scheduling, paused-frame accounting, metrics.

The fleet advances every robot session on a shared logical clock. Sentinel
requests queue FIFO; the single operator answers one at a time, after a
sampled reaction latency, issuing one command per tick. Robots whose
requests have not been picked up sit frozen in AwaitingIntervention,
accruing the paused frames that the efficiency metric charges against.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .datastore import (
    EpisodeEnd,
    Header,
    StepBoundary,
    TrajectoryStore,
    config_digest,
)
from .domain import Frame, Mode, Score, TaskSpec, score_episode
from .gridworld import ProgressTracker
from .operators import HumanGatedMonitor, InterventionRequest, OperatorConfig, respond
from .policies import PolicyModel
from .sentinel import SentinelConfig
from .session import Command, Reset, Session

DEFAULT_EPISODE_TICK_CAP = 600

# Sentinel patience for the throughput benchmark. The standard timeout is
# sized for real-robot frame rates; at desk scale a calibrated policy
# finishes a typical step in well under 150 ticks, so only a tighter
# patience puts the slow tail of its step durations past the timeout and
# makes stall frequency track competence.
BENCHMARK_T_MAX = 80


@dataclass(frozen=True)
class FleetConfig:
    """operator None means no scripted operator: commands come from outside
    (the network gateway) and awaiting robots wait for a human."""

    n_robots: int
    task: TaskSpec
    policy: PolicyModel
    sentinel: SentinelConfig
    operator: Optional[OperatorConfig] = field(default_factory=OperatorConfig)
    max_ticks: int = 5000
    episode_tick_cap: int = DEFAULT_EPISODE_TICK_CAP
    episode_namespace: str = ""  # distinguishes episodes across rounds
    # When set, a human-gated monitor watches each robot and flags it for
    # help as soon as a full lookahead window shows no progress, instead of
    # waiting out the sentinel timeout.
    monitor_lookahead: Optional[float] = None

    def __post_init__(self) -> None:
        if self.n_robots < 1:
            raise ValueError("need at least one robot")
        if self.max_ticks < 1 or self.episode_tick_cap < 1:
            raise ValueError("tick budgets must be positive")

    def describe(self) -> dict:
        """Canonical summary for the log header digest."""
        sentinel_variant = self.sentinel.variant
        return {
            "n_robots": self.n_robots,
            "task": self.task.template.value,
            "policy": {
                "variant": self.policy.variant.value,
                "epsilon": self.policy.epsilon,
                "k": self.policy.k,
                "version": self.policy.version,
                "n_pairs": self.policy.n_pairs,
            },
            "sentinel": {
                "variant": type(sentinel_variant).__name__,
                "t_max": self.sentinel.t_max,
            },
            "operator": None
            if self.operator is None
            else {
                "strategy": self.operator.strategy.value,
                "latency": [self.operator.latency_min, self.operator.latency_max],
                "rewind_depth": self.operator.rewind_depth,
                "rewind_within_step": self.operator.rewind_within_step,
            },
            "max_ticks": self.max_ticks,
            "episode_tick_cap": self.episode_tick_cap,
            "monitor_lookahead": self.monitor_lookahead,
        }


@dataclass
class _Service:
    """One in-progress operator response."""

    request: InterventionRequest
    plan: list[Command]
    start_tick: int
    pos: int = 0


@dataclass
class FleetLog:
    store: TrajectoryStore
    n_robots: int
    collected_frames: int = 0
    paused_frames: int = 0
    intervention_frames: int = 0
    rewind_frames: int = 0
    inference_frames: int = 0
    episode_scores: list[tuple[str, str, Score]] = field(default_factory=list)
    requests: list[InterventionRequest] = field(default_factory=list)
    completed_episodes: int = 0

    def metrics(self) -> dict:
        return {
            "n_robots": self.n_robots,
            "collected_frames": self.collected_frames,
            "paused_frames": self.paused_frames,
            "intervention_rate": (
                (self.intervention_frames + self.rewind_frames) / self.collected_frames
                if self.collected_frames
                else 0.0
            ),
            "collection_efficiency": collection_efficiency(
                self.n_robots, self.collected_frames, self.paused_frames
            )
            if self.collected_frames
            else 0.0,
        }


class FleetRuntime:
    """Stepwise fleet simulation; run_fleet drives it to completion, the
    gateway drives it tick by tick."""

    def __init__(self, config: FleetConfig, seed: int) -> None:
        self.config = config
        self.seed = seed
        self.clock = 0
        robot_ids = [f"robot{i}" for i in range(config.n_robots)]
        self.sessions = {
            rid: Session(
                rid,
                config.task,
                config.policy,
                config.sentinel,
                seed=seed * 1000 + i,
                episode_namespace=config.episode_namespace,
            )
            for i, rid in enumerate(robot_ids)
        }
        self.trackers = {rid: ProgressTracker(config.task) for rid in robot_ids}
        self.monitors = {
            rid: HumanGatedMonitor(self.sessions[rid], config.monitor_lookahead)
            for rid in robot_ids
            if config.monitor_lookahead is not None
        }
        self.episode_ticks = {rid: 0 for rid in robot_ids}
        self.queue: deque[InterventionRequest] = deque()
        self.open_requests: set[str] = set()
        self.service: Optional[_Service] = None
        self.op_rng = random.Random(f"operator:{seed}")
        store = TrajectoryStore()
        store.append(
            Header(
                task_name=config.task.template.value,
                robot_ids=tuple(robot_ids),
                digest=config_digest(config.describe()),
            )
        )
        self.log = FleetLog(store=store, n_robots=config.n_robots)
        for rid in robot_ids:
            self.trackers[rid].update(self.sessions[rid].world)

    # --- logging helpers --------------------------------------------------

    def _record_frames(self, robot_id: str, frames: Sequence[Frame]) -> None:
        session = self.sessions[robot_id]
        tracker = self.trackers[robot_id]
        for frame in frames:
            self.log.store.append(frame)
            self.log.collected_frames += 1
            self.episode_ticks[robot_id] += 1
            if frame.mode is Mode.AWAITING_INTERVENTION:
                self.log.paused_frames += 1
            elif frame.mode is Mode.INTERVENTION:
                self.log.intervention_frames += 1
            elif frame.mode is Mode.REWIND:
                self.log.rewind_frames += 1
            else:
                self.log.inference_frames += 1
        if frames:
            for step in tracker.update(session.world):
                self.log.store.append(
                    StepBoundary(robot_id, session.episode_id, step, frames[-1].tick)
                )

    def _finish_episode(self, robot_id: str) -> None:
        session = self.sessions[robot_id]
        tracker = self.trackers[robot_id]
        score = score_episode(tracker.done, session.task.n_steps)
        self.log.store.append(EpisodeEnd(robot_id, session.episode_id, score))
        self.log.episode_scores.append((robot_id, session.episode_id, score))
        if tracker.complete:
            self.log.completed_episodes += 1
        if self.service is not None and self.service.request.robot_id == robot_id:
            self.service = None
        if robot_id in self.open_requests:
            self.open_requests.discard(robot_id)
            self.queue = deque(r for r in self.queue if r.robot_id != robot_id)

    # --- one tick ---------------------------------------------------------

    def tick_once(self) -> None:
        self._reset_finished_robots()
        if self.config.operator is not None:
            self._operator_step()
        self._session_ticks()
        self._monitor_step()
        self._collect_requests()
        if self.config.operator is not None:
            busy = [
                rid
                for rid, s in self.sessions.items()
                if s.mode in (Mode.INTERVENTION, Mode.REWIND)
            ]
            assert len(busy) <= 1, f"operator exclusivity violated: {busy}"
        self.clock += 1

    def _reset_finished_robots(self) -> None:
        for rid in self.sessions:
            session = self.sessions[rid]
            over_cap = self.episode_ticks[rid] >= self.config.episode_tick_cap
            if session.episode_complete or over_cap:
                self._finish_episode(rid)
                session.apply_command(Reset())
                self.trackers[rid] = ProgressTracker(self.config.task)
                self.trackers[rid].update(session.world)
                self.episode_ticks[rid] = 0
                if rid in self.monitors:
                    # fresh window; distances from the old episode mean nothing
                    self.monitors[rid] = HumanGatedMonitor(
                        session, self.config.monitor_lookahead
                    )

    def _operator_step(self) -> None:
        if self.service is None and self.queue:
            request = self.queue.popleft()
            session = self.sessions[request.robot_id]
            latency = self.config.operator.sample_latency(self.op_rng)
            plan = respond(request, session, self.config.operator, self.op_rng)
            self.service = _Service(
                request=request,
                plan=plan,
                start_tick=max(request.request_tick + latency, self.clock),
            )
        if self.service is not None and self.clock >= self.service.start_tick:
            svc = self.service
            robot_id = svc.request.robot_id
            frames = self.sessions[robot_id].apply_command(svc.plan[svc.pos])
            self._record_frames(robot_id, frames)
            svc.pos += 1
            if svc.pos == len(svc.plan):
                self.service = None
                self.open_requests.discard(robot_id)

    def _session_ticks(self) -> None:
        for rid in self.sessions:
            frame = self.sessions[rid].tick()
            if frame is not None:
                self._record_frames(rid, [frame])

    def _monitor_step(self) -> None:
        for rid, monitor in self.monitors.items():
            if monitor.observe_tick() is not None:
                # Freeze the robot; _collect_requests queues it like any
                # sentinel timeout, so the operator path stays uniform.
                self.sessions[rid].flag_for_help()

    def _collect_requests(self) -> None:
        for rid, session in self.sessions.items():
            if session.mode is Mode.AWAITING_INTERVENTION and rid not in self.open_requests:
                request = InterventionRequest(rid, self.clock, session.step_index)
                self.queue.append(request)
                self.open_requests.add(rid)
                self.log.requests.append(request)

    # --- external control (gateway) ---------------------------------------

    def inject_command(self, robot_id: str, command: Command) -> Sequence[Frame]:
        """Apply one externally supplied command right now, bypassing the
        scripted operator. Raises on unknown robots or illegal transitions so
        the caller can surface the failure to whoever sent the command."""
        if robot_id not in self.sessions:
            raise KeyError(f"unknown robot {robot_id!r}")
        session = self.sessions[robot_id]
        if isinstance(command, Reset):
            if self.episode_ticks[robot_id] > 0:
                self._finish_episode(robot_id)
            session.apply_command(Reset())
            self.trackers[robot_id] = ProgressTracker(self.config.task)
            self.trackers[robot_id].update(session.world)
            self.episode_ticks[robot_id] = 0
            return []
        was_awaiting = session.mode is Mode.AWAITING_INTERVENTION
        frames = session.apply_command(command)
        self._record_frames(robot_id, frames)
        if was_awaiting and session.mode is not Mode.AWAITING_INTERVENTION:
            # a human answered the request; retire it from the queue
            self.open_requests.discard(robot_id)
            self.queue = deque(r for r in self.queue if r.robot_id != robot_id)
        return frames

    def finalize(self) -> FleetLog:
        for rid in self.sessions:
            if self.episode_ticks[rid] > 0:
                self._finish_episode(rid)
        return self.log


def run_fleet(config: FleetConfig, seed: int) -> FleetLog:
    """Simulate the whole fleet for config.max_ticks logical ticks."""
    runtime = FleetRuntime(config, seed)
    while runtime.clock < config.max_ticks:
        runtime.tick_once()
    return runtime.finalize()


def collection_efficiency(n_robots: int, collected: int, paused: int) -> float:
    """Human yield-to-effort ratio: N x (collected - paused) / collected.
    Caps at N when nothing waited; one idle-free robot scores exactly 1."""
    if collected <= 0:
        raise ValueError("collected frame count must be positive")
    if not (0 <= paused <= collected):
        raise ValueError("paused frames must lie within 0..collected")
    return n_robots * (collected - paused) / collected


def intervention_rate(frames: Sequence[Frame]) -> float:
    """Fraction of frames that consumed operator effort (manual control or
    rewind); paused frames deliberately do not count here."""
    if not frames:
        raise ValueError("intervention_rate of zero frames")
    busy = sum(1 for f in frames if f.mode in (Mode.INTERVENTION, Mode.REWIND))
    return busy / len(frames)
