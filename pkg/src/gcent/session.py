"""Per-robot mode state machine: inference, takeover, rewind, reset.

A Session owns one robot's world, its mode, the 3-second snapshot ring
buffer, and the episode frame stream. Commands arrive from an operator (or
the network gateway); ticks arrive from the fleet clock. All mutation goes
through tick() and apply_command(), and every emitted Frame is returned to
the caller for logging.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

from .domain import Action, Actor, Frame, Mode, TaskSpec
from .gridworld import WorldState, init_world, observe, step as world_step
from .policies import PolicyModel, policy_action
from .sentinel import SentinelConfig, sentinel_verdict, should_request_intervention

BUFFER_CAPACITY = 30  # 3 seconds of snapshots at 10 ticks/s


# --- commands ---------------------------------------------------------------

@dataclass(frozen=True)
class StartInference:
    """Hand control back to the policy (the Y button)."""


@dataclass(frozen=True)
class BeginRewind:
    """Freeze and enter rewind scrubbing (the X button, pressed)."""


@dataclass(frozen=True)
class RewindTo:
    """Commit a rewind k snapshots back (the X button, released)."""

    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("RewindTo.k must be >= 1")


@dataclass(frozen=True)
class Takeover:
    """Seize manual control (the side grip)."""


@dataclass(frozen=True)
class HumanAction:
    """One teleoperated action while in manual control."""

    action: Action


@dataclass(frozen=True)
class Reset:
    """Abandon the episode and start a fresh one (the A button)."""


Command = Union[StartInference, BeginRewind, RewindTo, Takeover, HumanAction, Reset]

# Legal (mode, command type) pairs. Reset is legal everywhere.
_TRANSITIONS: dict[Mode, tuple[type, ...]] = {
    Mode.INFERENCE: (Takeover, BeginRewind, Reset),
    Mode.AWAITING_INTERVENTION: (Takeover, BeginRewind, Reset),
    Mode.INTERVENTION: (StartInference, BeginRewind, HumanAction, Reset),
    Mode.REWIND: (RewindTo, Reset),
}


class IllegalTransition(Exception):
    def __init__(self, mode: Mode, command: Command) -> None:
        self.mode = mode
        self.command = command
        super().__init__(f"command {type(command).__name__} not legal in mode {mode.value}")


class Snapshot(NamedTuple):
    tick: int
    world: WorldState
    step_index: int


class Session:
    """Single-threaded state machine for one robot."""

    def __init__(
        self,
        robot_id: str,
        task: TaskSpec,
        policy: PolicyModel,
        sentinel: SentinelConfig,
        seed: int,
        episode_namespace: str = "",
    ) -> None:
        self.robot_id = robot_id
        self.task = task
        self.policy = policy
        self.sentinel = sentinel
        self.episode_namespace = episode_namespace
        self._episode_seeds = random.Random(f"episodes:{robot_id}:{seed}")
        self._policy_rng = random.Random(f"policy:{robot_id}:{seed}")
        self._sentinel_rng = random.Random(f"sentinel:{robot_id}:{seed}")
        self.episode_index = -1
        self.frames_emitted = 0
        self._begin_episode()

    def _begin_episode(self) -> None:
        self.episode_index += 1
        self.episode_seed = self._episode_seeds.randrange(2**31)
        self.episode_id = f"{self.robot_id}-{self.episode_namespace}ep{self.episode_index:03d}"
        self.world = init_world(self.task, self.episode_seed)
        self.mode = Mode.INFERENCE
        self.step_index = 0
        self.ticks_in_step = 0
        self.tick_counter = 0
        self.buffer: deque[Snapshot] = deque(maxlen=BUFFER_CAPACITY)
        self.episode_complete = False
        self.last_verdict: Optional[bool] = None

    # --- clock ------------------------------------------------------------

    def tick(self) -> Optional[Frame]:
        """Advance one tick of simulated time; returns the emitted frame, if
        this mode emits on ticks."""
        if self.mode is Mode.INFERENCE:
            return None if self.episode_complete else self._inference_tick()
        if self.mode is Mode.AWAITING_INTERVENTION:
            return self._paused_tick()
        # Intervention advances only via HumanAction commands; Rewind frames
        # come from RewindTo. The clock alone does nothing in either.
        return None

    def _inference_tick(self) -> Frame:
        obs = observe(self.world)
        self.buffer.append(Snapshot(self.tick_counter, self.world, self.step_index))
        action = policy_action(self.policy, obs, self.task, self.step_index, self._policy_rng)
        self.world = world_step(self.world, action)
        z = sentinel_verdict(
            self.sentinel, self.world, self.task, self.step_index, self._sentinel_rng
        )
        self.last_verdict = z
        frame = self._emit(
            obs.features, action, Actor.POLICY, Mode.INFERENCE, sentinel_verdict=z
        )
        if z:
            self.step_index += 1
            self.ticks_in_step = 0
            if self.step_index == self.task.n_steps:
                self.episode_complete = True
        else:
            self.ticks_in_step += 1
            if should_request_intervention(z, self.ticks_in_step, self.sentinel.t_max):
                self.mode = Mode.AWAITING_INTERVENTION
        return frame

    def _paused_tick(self) -> Frame:
        return self._emit(
            observe(self.world).features,
            Action.NOOP,
            Actor.POLICY,
            Mode.AWAITING_INTERVENTION,
        )

    def flag_for_help(self) -> None:
        """Freeze and wait for an operator, exactly as a sentinel timeout
        would; the entry point for an external monitor watching this robot."""
        if self.mode is not Mode.INFERENCE or self.episode_complete:
            raise ValueError(f"can only flag a live inference robot, not {self.mode.value}")
        self.mode = Mode.AWAITING_INTERVENTION

    # --- commands ---------------------------------------------------------

    def apply_command(self, cmd: Command) -> list[Frame]:
        """Validate against the transition table, then apply. Rejection
        raises IllegalTransition and leaves the session untouched."""
        if not isinstance(cmd, _TRANSITIONS[self.mode]):
            raise IllegalTransition(self.mode, cmd)
        if isinstance(cmd, Reset):
            self._begin_episode()
            return []
        if isinstance(cmd, Takeover):
            self.mode = Mode.INTERVENTION
            return []
        if isinstance(cmd, BeginRewind):
            self.mode = Mode.REWIND
            return []
        if isinstance(cmd, StartInference):
            self.mode = Mode.INFERENCE
            self.ticks_in_step = 0
            return []
        if isinstance(cmd, HumanAction):
            return [self._human_action(cmd.action)]
        if isinstance(cmd, RewindTo):
            return self.rewind_to(cmd.k)
        raise AssertionError(f"unhandled command {cmd}")

    def _human_action(self, action: Action) -> Frame:
        obs = observe(self.world)
        self.buffer.append(Snapshot(self.tick_counter, self.world, self.step_index))
        self.world = world_step(self.world, action)
        return self._emit(obs.features, action, Actor.HUMAN, Mode.INTERVENTION)

    def rewind_to(self, k: int) -> list[Frame]:
        """Restore the world k snapshots back, logging one Rewind frame per
        dropped snapshot (newest first, so ticks decrease)."""
        if self.mode is not Mode.REWIND:
            raise IllegalTransition(self.mode, RewindTo(max(k, 1)))
        if k < 1 or k > len(self.buffer):
            raise ValueError(f"rewind depth {k} outside 1..{len(self.buffer)}")
        dropped = [self.buffer.pop() for _ in range(k)]  # newest first
        frames = [
            Frame(
                tick=snap.tick,
                episode_id=self.episode_id,
                robot_id=self.robot_id,
                step_index=snap.step_index,
                observation=observe(snap.world).features,
                action=Action.NOOP,
                actor=Actor.HUMAN,
                mode=Mode.REWIND,
                sentinel_verdict=None,
            )
            for snap in dropped
        ]
        self.frames_emitted += len(frames)
        destination = dropped[-1]
        self.world = destination.world
        self.step_index = destination.step_index
        self.ticks_in_step = 0
        # Resume numbering just past the restored snapshot; the original
        # ticks above it now exist only as Rewind frames in the log.
        self.tick_counter = destination.tick + 1
        self.episode_complete = False
        self.mode = Mode.INTERVENTION
        return frames

    def perturb_world(self, magnitude: int, rng: random.Random) -> None:
        """Manual disturbance affordance; only meaningful under human control."""
        from .gridworld import perturb

        if self.mode is not Mode.INTERVENTION:
            raise IllegalTransition(self.mode, HumanAction(Action.NOOP))
        self.world = perturb(self.world, magnitude, rng)

    # --- helpers ----------------------------------------------------------

    def _emit(
        self,
        features,
        action: Action,
        actor: Actor,
        mode: Mode,
        sentinel_verdict: Optional[bool] = None,
    ) -> Frame:
        frame = Frame(
            tick=self.tick_counter,
            episode_id=self.episode_id,
            robot_id=self.robot_id,
            step_index=self.step_index,
            observation=features,
            action=action,
            actor=actor,
            mode=mode,
            sentinel_verdict=sentinel_verdict,
        )
        self.tick_counter += 1
        self.frames_emitted += 1
        return frame
