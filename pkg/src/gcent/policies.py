"""Scripted experts (the teleoperator stand-in) and a k-NN behavior cloner.

The cloner is deliberately nonparametric: it memorizes (features, action)
pairs and answers queries by majority vote over the k nearest stored
features. Every tie is broken deterministically, so two runs over the same
log produce byte-identical behavior.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .domain import Action, TaskSpec, Template
from .gridworld import (
    DOOR_CLOSED,
    DOOR_OPEN,
    GRID_H,
    GRID_W,
    INSERT_APPROACH,
    INSERT_TARGET,
    OVEN_CELL,
    STACK_TARGET_A,
    STACK_TARGET_B,
    START_BUTTON,
    TYPING_GOAL,
    Observation,
    ProgressTracker,
    WorldState,
    _ingredients_stacked,
    init_world,
    make_task,
    next_plate,
    progress_watermark,
    step as world_step,
    step_complete,
)


def _go(src: tuple[int, int], dst: tuple[int, int], carry: bool = False) -> Optional[Action]:
    """One greedy Manhattan move toward dst.

    Empty-handed the expert moves vertical before horizontal; carrying, it
    moves horizontal before vertical. The asymmetry keeps outbound and
    return corridors mostly disjoint, so a state's position says which
    phase of a fetch it belongs to."""
    if carry:
        if src[1] < dst[1]:
            return Action.RIGHT
        if src[1] > dst[1]:
            return Action.LEFT
    if src[0] < dst[0]:
        return Action.DOWN
    if src[0] > dst[0]:
        return Action.UP
    if src[1] < dst[1]:
        return Action.RIGHT
    if src[1] > dst[1]:
        return Action.LEFT
    return None


def _fetch(world: WorldState, obj_id: int, grab: bool = True) -> Action:
    """Walk to an object's cell; optionally grasp it on arrival."""
    move = _go(world.gripper, world.objects[obj_id].pos)
    if move is not None:
        return move
    return Action.GRASP if grab else Action.NOOP


def _via_rim(src: tuple[int, int], dst: tuple[int, int]) -> Optional[Action]:
    """Empty-handed stacking route back to the pantry: east along the top
    row, down the east wall, west along the ingredient's row; from the
    south plate, west along the bottom row and north up the ingredient's
    column. Each rim cell is walked in one fixed direction while the hand
    is empty, so stored frames there never vote against each other."""
    if src == dst:
        return None
    if src[0] == dst[0]:
        return Action.RIGHT if src[1] < dst[1] else Action.LEFT
    if src[0] == GRID_H - 1 and src[1] != dst[1]:
        return Action.RIGHT if src[1] < dst[1] else Action.LEFT
    if src[1] == GRID_W - 1:
        return Action.DOWN if src[0] < dst[0] else Action.UP
    if src[0] == 0:
        return Action.RIGHT
    if src[1] == dst[1]:
        return Action.UP if src[0] > dst[0] else Action.DOWN
    return _go(src, dst)  # knocked off the corridor: plain recovery


def _stacking_action(world: WorldState, step_index: int) -> Action:
    if world.held_object is not None:
        # Vertical-first toward whichever plate is next: ascend (or descend)
        # the ingredient's column, then east along the wall row. Progress
        # then reads off the row number alone, and consecutive placements
        # finish at opposite corners; the east wall stays an empty-hand
        # corridor.
        move = _go(world.gripper, next_plate(world))
        return move if move is not None else Action.RELEASE
    if _ingredients_stacked(world) >= step_index + 1:
        return Action.NOOP
    loose = [
        (abs(o.pos[0] - world.gripper[0]) + abs(o.pos[1] - world.gripper[1]), i)
        for i, o in world.objects.items()
        if o.kind == "ingredient" and o.pos not in (STACK_TARGET_A, STACK_TARGET_B)
    ]
    if not loose:
        return Action.NOOP
    target = world.objects[min(loose)[1]].pos
    move = _via_rim(world.gripper, target)
    return move if move is not None else Action.GRASP


def _insertion_action(world: WorldState, step_index: int) -> Action:
    comp = world.objects[0]
    if step_index == 0:
        if world.held_object == 0:
            return Action.NOOP
        return _fetch(world, 0)
    # step 1: carry to the channel mouth, then feed straight down so the
    # part enters the fixture from the north
    if world.held_object != 0:
        if comp.pos == INSERT_TARGET and comp.arrival == "N":
            return Action.NOOP
        return _fetch(world, 0)
    if world.gripper == INSERT_TARGET:
        return Action.RELEASE if world.last_move == "N" else Action.UP
    if world.gripper[1] == INSERT_TARGET[1]:
        return Action.DOWN
    if world.gripper == INSERT_APPROACH:
        return Action.RIGHT
    move = _go(world.gripper, INSERT_APPROACH, carry=True)
    return move if move is not None else Action.RIGHT


def _appliance_action(world: WorldState, step_index: int) -> Action:
    door, food = world.objects[0], world.objects[1]
    door_open = door.pos == DOOR_OPEN
    food_held = world.held_object == 1
    food_in = food.pos == OVEN_CELL and not food_held

    def open_door() -> Action:
        if world.held_object == 0:
            move = _go(world.gripper, DOOR_OPEN, carry=True)
            return move if move is not None else Action.RELEASE
        if world.held_object is not None:
            return Action.RELEASE  # free the hand first
        return _fetch(world, 0)

    def place_food() -> Action:
        if not door_open:
            return open_door()
        if world.held_object == 0:
            return Action.RELEASE  # drop the door at the open spot first
        if food_held:
            move = _go(world.gripper, OVEN_CELL, carry=True)
            return move if move is not None else Action.RELEASE
        if food_in:
            return Action.NOOP
        return _fetch(world, 1)

    def close_door() -> Action:
        if not food_in:
            return place_food()
        if world.held_object == 0:
            move = _go(world.gripper, DOOR_CLOSED, carry=True)
            return move if move is not None else Action.RELEASE
        if world.held_object is not None:
            return Action.RELEASE
        return _fetch(world, 0)

    if step_index == 0:
        return Action.NOOP if door_open else open_door()
    if step_index == 1:
        if not door_open:
            return open_door()
        if world.held_object == 0:
            return Action.RELEASE
        if food_held or food_in:
            return Action.NOOP
        return _fetch(world, 1)
    if step_index == 2:
        return Action.NOOP if (food_in and door_open) else place_food()
    if step_index == 3:
        if not (door.pos == DOOR_CLOSED and food_in):
            return close_door()
        return Action.NOOP
    # step 4: press start, with the oven loaded and shut
    if not (door.pos == DOOR_CLOSED and food_in):
        return close_door()
    if world.held_object is not None:
        return Action.RELEASE
    if 2 in world.pressed:
        return Action.NOOP
    move = _go(world.gripper, START_BUTTON)
    return move if move is not None else Action.PRESS


def _typing_action(world: WorldState, step_index: int) -> Action:
    goal = TYPING_GOAL[: step_index + 1]
    typed = "".join(world.typed)
    if typed == goal:
        return Action.NOOP
    if goal.startswith(typed):
        want = goal[len(typed)]
    else:
        want = "\b"
    key_id = next(i for i, o in world.objects.items() if o.char == want)
    key = world.objects[key_id].pos
    # Travel between keys via the top row (carriage-return style). Each
    # keystroke then gets its own full column descent instead of a one-cell
    # shuffle along the key row.
    g = world.gripper
    if g == key:
        return Action.PRESS
    if g[1] == key[1]:
        return Action.DOWN if g[0] < key[0] else Action.UP
    if g[0] == 0:
        return Action.RIGHT if g[1] < key[1] else Action.LEFT
    return Action.UP


def expert_action(world: WorldState, task: TaskSpec, step_index: int) -> Action:
    """Greedy scripted demonstrator. Total: for any reachable state it either
    makes progress toward the step's predicate (repairing broken preconditions
    first) or no-ops when the step already holds."""
    if not (0 <= step_index <= task.n_steps):
        raise ValueError(f"step_index {step_index} out of range")
    if step_index == task.n_steps:
        return Action.NOOP
    dispatch = {
        Template.STACKING: _stacking_action,
        Template.INSERTION: _insertion_action,
        Template.APPLIANCE: _appliance_action,
        Template.TYPING: _typing_action,
    }
    return dispatch[task.template](world, step_index)


def noisy_expert_action(
    world: WorldState,
    task: TaskSpec,
    step_index: int,
    epsilon: float,
    rng: random.Random,
) -> Action:
    """Expert with probability 1-epsilon, uniform random action otherwise."""
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return rng.choice(list(Action))
    return expert_action(world, task, step_index)


class PolicyVariant(Enum):
    SCRIPTED_EXPERT = "scripted_expert"
    NOISY_EXPERT = "noisy_expert"
    CLONER = "cloner"


@dataclass(frozen=True)
class PolicyModel:
    variant: PolicyVariant
    epsilon: float = 0.0
    features: Optional[np.ndarray] = None  # (n, d) float32, cloner only
    actions: tuple[Action, ...] = ()
    feature_sq: Optional[np.ndarray] = None  # cached row norms
    k: int = 5
    version: int = 0

    @property
    def n_pairs(self) -> int:
        return 0 if self.features is None else self.features.shape[0]


def scripted_expert() -> PolicyModel:
    return PolicyModel(PolicyVariant.SCRIPTED_EXPERT)


def noisy_expert(epsilon: float) -> PolicyModel:
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must be in [0, 1]")
    return PolicyModel(PolicyVariant.NOISY_EXPERT, epsilon=epsilon)


def train_cloner(
    pairs: Sequence[tuple[np.ndarray, Action]], k: int = 5, version: int = 0
) -> PolicyModel:
    """Memorize training pairs verbatim, duplicates and conflicts included."""
    if not pairs:
        raise ValueError("cannot train a cloner on zero pairs")
    if k < 1:
        raise ValueError("k must be >= 1")
    feats = np.stack([np.asarray(f, dtype=np.float32) for f, _ in pairs])
    actions = tuple(a for _, a in pairs)
    return PolicyModel(
        PolicyVariant.CLONER,
        features=feats,
        actions=actions,
        feature_sq=(feats * feats).sum(axis=1),
        k=k,
        version=version,
    )


def cloner_predict(model: PolicyModel, features: np.ndarray) -> Action:
    q = np.asarray(features, dtype=np.float32)
    # Features are integer-valued, so these float32 sums are exact and ties
    # are real ties, resolved by insertion order via the stable sort.
    sq = model.feature_sq - 2.0 * (model.features @ q) + float(q @ q)
    order = np.argsort(sq, kind="stable")[: model.k]
    votes: dict[Action, int] = {}
    for idx in order:
        a = model.actions[int(idx)]
        votes[a] = votes.get(a, 0) + 1
    best = max(votes.values())
    return min((a for a, n in votes.items() if n == best), key=lambda a: a.value)


def policy_action(
    model: PolicyModel,
    obs: Observation,
    task: TaskSpec,
    step_index: int,
    rng: Optional[random.Random] = None,
) -> Action:
    """Dispatch one action from any policy variant, given the session's idea
    of the current step."""
    if model.variant is PolicyVariant.SCRIPTED_EXPERT:
        return expert_action(obs.symbolic, task, step_index)
    if model.variant is PolicyVariant.NOISY_EXPERT:
        if rng is None:
            raise ValueError("noisy expert needs an rng stream")
        return noisy_expert_action(obs.symbolic, task, step_index, model.epsilon, rng)
    if model.features is None:
        raise ValueError("cloner not trained")
    return cloner_predict(model, obs.features)


def predict(model: PolicyModel, obs: Observation) -> Action:
    """Step-free prediction. The cloner reads only the feature vector;
    scripted variants act at the current ground-truth watermark, without
    injected noise."""
    if model.variant is PolicyVariant.CLONER:
        if model.features is None:
            raise ValueError("cloner not trained")
        return cloner_predict(model, obs.features)
    world = obs.symbolic
    task = make_task(world.template)
    return expert_action(world, task, min(progress_watermark(world, task), task.n_steps - 1))


# --- success-rate calibration ----------------------------------------------

EPISODE_TICK_CAP = 600


def rollout_success(
    template: Template, epsilon: float, seed: int, tick_cap: int = EPISODE_TICK_CAP
) -> bool:
    """Whether a noisy expert finishes the whole task within the tick cap,
    steered by the ground-truth tracker (no sentinel, no logging)."""
    task = make_task(template)
    world = init_world(task, seed)
    rng = random.Random(f"rollout:{template.value}:{epsilon}:{seed}")
    tracker = ProgressTracker(task)
    tracker.update(world)
    for _ in range(tick_cap):
        a = noisy_expert_action(world, task, tracker.done, epsilon, rng)
        world = world_step(world, a)
        tracker.update(world)
        if tracker.complete:
            return True
    return False


def measured_success(
    template: Template, epsilon: float, trials: int, seed_base: int = 1000
) -> float:
    wins = sum(rollout_success(template, epsilon, seed_base + i) for i in range(trials))
    return wins / trials


def calibrate_epsilon(
    template: Template,
    target_success: float,
    trials: int = 200,
    tol: float = 0.02,
    seed_base: int = 1000,
) -> float:
    """Find the action-noise level whose measured full-task success rate on a
    fixed seed batch lands within tol of the target. Success is monotone
    (noisily) decreasing in epsilon, so a bisection suffices."""
    if not (0.0 < target_success < 1.0):
        raise ValueError("target_success must be strictly between 0 and 1")
    lo, hi = 0.0, 1.0  # success(lo) >= target >= success(hi), up to noise
    best_eps, best_gap = 0.0, abs(measured_success(template, 0.0, trials, seed_base) - target_success)
    for _ in range(12):
        mid = (lo + hi) / 2
        rate = measured_success(template, mid, trials, seed_base)
        gap = abs(rate - target_success)
        if gap < best_gap:
            best_eps, best_gap = mid, gap
        if gap <= tol / 2:
            return mid
        if rate > target_success:
            lo = mid
        else:
            hi = mid
    if best_gap <= tol:
        return best_eps
    raise RuntimeError(
        f"calibration failed for {template.value}: best epsilon {best_eps} "
        f"misses target {target_success} by {best_gap:.3f}"
    )
