"""Deterministic 12x12 manipulation gridworld with four step-structured tasks.

Everything here is a pure function over value types: step() and observe()
never mutate their inputs, and restoring a copied WorldState reproduces the
exact same future. That property is what makes rewind cheap and testable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .domain import (
    MOVE_ACTIONS,
    MOVE_DELTAS,
    Action,
    StepSpec,
    TaskSpec,
    Template,
)

GRID_W = 12
GRID_H = 12
GRIPPER_START = (0, 0)

# Weights for the gripper-position part of the feature vector. The cloner
# ranks neighbors by plain Euclidean distance, so where the gripper stands
# has to outweigh placement variation between episodes (up to ~2 cells of
# squared distance per relocated object); the plane gain makes an exact
# cell match decisive and the coordinate gain ranks near misses above far
# ones instead of falling back to layout similarity alone. A second, fainter
# copy of the coordinates occupies separate slots per hand state (see
# observe), which pushes same-cell frames from the opposite hand state far
# away: fetch traffic and carry traffic cross on shared corridor cells, and
# without the split the neighbor vote there mixes opposing directions. The
# channel gain stays well below the others so hand state never dominates
# the completion detector, whose centroids have to split each step by how
# close the gripper is to done, not by what the hand holds.
GRIPPER_GAIN = 6.0
COORD_GAIN = 2.0
CHANNEL_GAIN = 1.0

# Kinds the gripper can pick up; buttons and keys stay put.
GRABBABLE_KINDS = frozenset({"ingredient", "component", "food", "door"})
PRESSABLE_KINDS = frozenset({"button", "key"})

# Objects spawn in this block of cells ("the pantry"), away from the work
# area, so placement variation does not wander over the whole grid.
# Object placements are drawn from a small family of cluster layouts: an
# anchor picked from the tuples below positions the whole group. Placement
# entropy directly sets how many demonstrations the nearest-neighbor
# policy needs before a layout has been seen almost exactly, so a modest
# anchor set keeps early policies imperfect without making the tasks
# unlearnable from a few dozen episodes.
# Anchor = top-left of the 2x4 ingredient block. Only anchors where every
# block cell sits at least nine moves from both plates are allowed: a
# shorter carry would fit entirely inside the completion detector's
# ten-frame positive window and push the label back onto the grasp, which
# teaches the detector to fire the moment an ingredient is picked up.
STACK_ANCHORS = ((4, 2), (4, 3), (5, 2), (5, 3), (5, 4), (6, 2), (6, 3))
COMPONENT_CELLS = tuple((r, c) for r in (9, 10, 11) for c in (2, 4, 6, 8))
FOOD_CELLS = tuple((9, c) for c in range(4, 9))

# Work-area targets sit far from the pantry on purpose: every step's final
# approach is then longer than the detector's positive-label window, so
# "about to finish" frames occupy cells no other phase visits and a
# state-based classifier can actually learn the label.
#
# Stacking parks ingredients on two plates at opposite corners, alternating.
# A completion detector trained on final-second frames inevitably fires a
# frame or two before the step truly ends; with a single plate each step's
# trigger region would overlap the next step's and one early verdict would
# ratchet through every remaining step. Alternating plates puts consecutive
# trigger regions eleven rows apart, so an early verdict leaves the
# follow-on detector staring at states nowhere near its positives.
STACK_TARGET_A = (0, 11)
STACK_TARGET_B = (11, 11)
STACK_COUNT = 8

INSERT_TARGET = (11, 9)  # bottom of the feed channel
INSERT_APPROACH = (0, 8)  # channel mouth; the slide runs down column 9

DOOR_CLOSED = (0, 8)  # parked at the oven mouth
DOOR_OPEN = (3, 0)  # parked against the far wall
OVEN_CELL = (0, 9)
START_BUTTON = (11, 0)

KEY_ROW = 9
KEY_CHARS = ("A", "G", "I", "B", "O", "T", " ", "\b")  # \b is the delete key
TYPING_GOAL = "AGIBOT "

# Direction the gripper came from, per movement action.
CAME_FROM = {
    Action.DOWN: "N",
    Action.UP: "S",
    Action.RIGHT: "W",
    Action.LEFT: "E",
}

# Canonical object-kind order for the occupancy planes of each template.
TEMPLATE_KINDS = {
    Template.STACKING: ("ingredient",),
    Template.INSERTION: ("component",),
    Template.APPLIANCE: ("door", "food", "button"),
    Template.TYPING: ("key",),
}


@dataclass(frozen=True)
class ObjectState:
    pos: tuple[int, int]
    kind: str
    char: Optional[str] = None  # key/button label, None for plain objects
    arrival: Optional[str] = None  # compass direction recorded at release


@dataclass(frozen=True)
class WorldState:
    """Snapshot of the whole environment; a pure value."""

    width: int
    height: int
    gripper: tuple[int, int]
    held_object: Optional[int]
    objects: dict[int, ObjectState]
    pressed: frozenset[int]
    typed: tuple[str, ...]
    last_move: Optional[str]  # direction we came from on the last real move
    rng_seed: int
    template: Template

    def __post_init__(self) -> None:
        for pos in [self.gripper] + [o.pos for o in self.objects.values()]:
            if not (0 <= pos[0] < self.height and 0 <= pos[1] < self.width):
                raise ValueError(f"position {pos} out of bounds")
        if self.held_object is not None:
            held = self.objects[self.held_object]
            if held.pos != self.gripper:
                raise ValueError("held object must ride with the gripper")


@dataclass(frozen=True)
class Observation:
    """What a policy sees each tick: a flat feature vector for learning plus
    the raw symbolic state for scripted experts and renderers."""

    features: np.ndarray
    symbolic: WorldState


def make_task(template: Template) -> TaskSpec:
    """Build the canonical TaskSpec for a template, steps and predicates included."""
    if template is Template.STACKING:
        steps = tuple(
            StepSpec(i, f"Stack ingredient {i + 1} of {STACK_COUNT} on the plates", f"stacked:{i}")
            for i in range(STACK_COUNT)
        )
        return TaskSpec(template, steps, "stacking")
    if template is Template.INSERTION:
        steps = (
            StepSpec(0, "Pick up the component", "component_up"),
            StepSpec(1, "Insert the component into the fixture from the north", "inserted_north"),
        )
        return TaskSpec(template, steps, "insertion")
    if template is Template.APPLIANCE:
        steps = (
            StepSpec(0, "Open the oven door", "door_open"),
            StepSpec(1, "Pick up the food", "food_up"),
            StepSpec(2, "Put the food in the oven", "food_inside"),
            StepSpec(3, "Close the oven door", "door_closed"),
            StepSpec(4, "Press the start button", "started"),
        )
        return TaskSpec(template, steps, "appliance")
    if template is Template.TYPING:
        steps = tuple(
            StepSpec(i, f"Type {TYPING_GOAL[: i + 1]!r}", f"typed:{i}")
            for i in range(len(TYPING_GOAL))
        )
        return TaskSpec(template, steps, "typing")
    raise ValueError(f"unknown template {template}")


def init_world(task: TaskSpec, seed: int) -> WorldState:
    """Seeded initial state. Same (task, seed) gives an identical world."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    rng = random.Random(f"init:{task.template.value}:{seed}")
    objects: dict[int, ObjectState] = {}

    if task.template is Template.STACKING:
        top, left = rng.choice(STACK_ANCHORS)
        block = [(top + dr, left + dc) for dr in (0, 1) for dc in range(4)]
        for i, pos in enumerate(block):
            objects[i] = ObjectState(pos, "ingredient")
    elif task.template is Template.INSERTION:
        objects[0] = ObjectState(rng.choice(COMPONENT_CELLS), "component")
    elif task.template is Template.APPLIANCE:
        objects[0] = ObjectState(DOOR_CLOSED, "door")
        objects[1] = ObjectState(rng.choice(FOOD_CELLS), "food")
        objects[2] = ObjectState(START_BUTTON, "button", char="*")
    elif task.template is Template.TYPING:
        offset = rng.randrange(0, GRID_W - len(KEY_CHARS) + 1)
        for i, ch in enumerate(KEY_CHARS):
            objects[i] = ObjectState((KEY_ROW, offset + i), "key", char=ch)

    for obj in objects.values():
        assert obj.pos != GRIPPER_START
    return WorldState(
        width=GRID_W,
        height=GRID_H,
        gripper=GRIPPER_START,
        held_object=None,
        objects=objects,
        pressed=frozenset(),
        typed=(),
        last_move=None,
        rng_seed=seed,
        template=task.template,
    )


def _objects_at(world: WorldState, pos: tuple[int, int]) -> list[int]:
    return sorted(i for i, o in world.objects.items() if o.pos == pos)


def step(world: WorldState, action: Action) -> WorldState:
    """One deterministic transition. Illegal actions are no-ops, never errors."""
    if action is Action.NOOP:
        return world

    if action in MOVE_ACTIONS:
        dr, dc = MOVE_DELTAS[action]
        r = min(max(world.gripper[0] + dr, 0), world.height - 1)
        c = min(max(world.gripper[1] + dc, 0), world.width - 1)
        if (r, c) == world.gripper:
            return world  # clipped at the wall; came-from memory unchanged
        objects = world.objects
        if world.held_object is not None:
            held = objects[world.held_object]
            objects = {**objects, world.held_object: replace(held, pos=(r, c))}
        return replace(world, gripper=(r, c), objects=objects, last_move=CAME_FROM[action])

    if action is Action.GRASP:
        if world.held_object is not None:
            return world
        here = [
            i for i in _objects_at(world, world.gripper)
            if world.objects[i].kind in GRABBABLE_KINDS
        ]
        if not here:
            return world
        return replace(world, held_object=here[0])

    if action is Action.RELEASE:
        if world.held_object is None:
            return world
        obj = world.objects[world.held_object]
        objects = {**world.objects, world.held_object: replace(obj, arrival=world.last_move)}
        return replace(world, held_object=None, objects=objects)

    if action is Action.PRESS:
        here = [
            i for i in _objects_at(world, world.gripper)
            if world.objects[i].kind in PRESSABLE_KINDS
        ]
        if not here:
            return world
        target = world.objects[here[0]]
        typed = world.typed
        if target.kind == "key":
            if target.char == "\b":
                typed = typed[:-1]
            else:
                typed = typed + (target.char,)
        return replace(world, pressed=world.pressed | {here[0]}, typed=typed)

    raise AssertionError(f"unhandled action {action}")


def _ingredients_stacked(world: WorldState) -> int:
    return sum(
        1
        for i, o in world.objects.items()
        if o.kind == "ingredient"
        and o.pos in (STACK_TARGET_A, STACK_TARGET_B)
        and i != world.held_object
    )


def next_plate(world: WorldState) -> tuple[int, int]:
    """Which plate the next ingredient belongs on: they alternate, north
    plate first."""
    return STACK_TARGET_A if _ingredients_stacked(world) % 2 == 0 else STACK_TARGET_B


def step_complete(world: WorldState, task: TaskSpec, step_index: int) -> bool:
    """Ground-truth predicate for one step. Pure; the trainable detector
    only ever approximates this."""
    if not (0 <= step_index < task.n_steps):
        raise ValueError(f"step_index {step_index} out of range for {task.name}")
    pid = task.steps[step_index].predicate_id

    if pid.startswith("stacked:"):
        return _ingredients_stacked(world) >= int(pid.split(":")[1]) + 1

    if pid == "component_up":
        comp = world.objects[0]
        placed = comp.pos == INSERT_TARGET and comp.arrival == "N" and world.held_object != 0
        return world.held_object == 0 or placed
    if pid == "inserted_north":
        comp = world.objects[0]
        return comp.pos == INSERT_TARGET and comp.arrival == "N" and world.held_object != 0

    if pid == "door_open":
        return world.objects[0].pos == DOOR_OPEN
    if pid == "food_up":
        in_oven = world.objects[1].pos == OVEN_CELL and world.held_object != 1
        return (world.held_object == 1 or in_oven) and world.objects[0].pos == DOOR_OPEN
    if pid == "food_inside":
        return (
            world.objects[1].pos == OVEN_CELL
            and world.held_object != 1
            and world.objects[0].pos == DOOR_OPEN
        )
    if pid == "door_closed":
        return (
            world.objects[0].pos == DOOR_CLOSED
            and world.objects[1].pos == OVEN_CELL
            and world.held_object != 1
        )
    if pid == "started":
        return (
            2 in world.pressed
            and world.objects[0].pos == DOOR_CLOSED
            and world.objects[1].pos == OVEN_CELL
        )

    if pid.startswith("typed:"):
        upto = int(pid.split(":")[1]) + 1
        return "".join(world.typed) == TYPING_GOAL[:upto]

    raise ValueError(f"unknown predicate {pid!r}")


def perturb(world: WorldState, magnitude: int, rng: random.Random) -> WorldState:
    """Knock one uniformly chosen non-held object off its cell, by up to
    `magnitude` in each axis, clipped to the board."""
    if magnitude < 1:
        raise ValueError("magnitude must be >= 1")
    candidates = sorted(i for i in world.objects if i != world.held_object)
    if not candidates:
        return world
    victim = rng.choice(candidates)
    obj = world.objects[victim]
    dr = rng.randint(-magnitude, magnitude)
    dc = rng.randint(-magnitude, magnitude)
    r = min(max(obj.pos[0] + dr, 0), world.height - 1)
    c = min(max(obj.pos[1] + dc, 0), world.width - 1)
    objects = {**world.objects, victim: replace(obj, pos=(r, c))}
    return replace(world, objects=objects)


def progress_watermark(world: WorldState, task: TaskSpec) -> int:
    """Stateless progress estimate: one past the highest-index step whose
    predicate currently holds. Robust to earlier predicates going false again
    (a closed oven door un-satisfies "door open" without undoing progress)."""
    for i in reversed(range(task.n_steps)):
        if step_complete(world, task, i):
            return i + 1
    return 0


class ProgressTracker:
    """Monotone ground-truth step counter, the scoring annotator's stand-in.

    Steps are credited in order, at the first tick their predicate holds;
    credit is never taken back.
    """

    def __init__(self, task: TaskSpec) -> None:
        self.task = task
        self.done = 0

    def update(self, world: WorldState) -> list[int]:
        """Advance past newly satisfied steps; returns their indices."""
        newly = []
        while self.done < self.task.n_steps and step_complete(world, self.task, self.done):
            newly.append(self.done)
            self.done += 1
        return newly

    @property
    def complete(self) -> bool:
        return self.done == self.task.n_steps


# --- featurization ----------------------------------------------------------

def _pressable_ids(world: WorldState) -> list[int]:
    return sorted(i for i, o in world.objects.items() if o.kind in PRESSABLE_KINDS)


def feature_length(template: Template) -> int:
    kinds = TEMPLATE_KINDS[template]
    n_pressable = {
        Template.STACKING: 0,
        Template.INSERTION: 0,
        Template.APPLIANCE: 1,
        Template.TYPING: 8,
    }[template]
    return (len(kinds) + 1) * GRID_W * GRID_H + 6 + 1 + n_pressable


def observe(world: WorldState) -> Observation:
    """Featurize: one occupancy plane per object kind, then the gripper
    position (a weighted plane plus three weighted row/col coordinate
    pairs: one always active, one active while the hand is empty, one
    while carrying), a held flag, and one flag per button. All entries
    are small integers in float32, so distances between observations are
    exact. Coordinates are offset by one so row or column zero still
    produces a nonzero entry in whichever pair is active.

    The two gated coordinate pairs keep empty-hand and carrying frames
    apart in feature space even at the same cell. Without that, a frame
    from the wrong phase at the right cell is closer than a right-phase
    frame one cell over (the held flag alone is worth a single unit), and
    nearest-neighbor lookups blend outbound and return traffic. The
    always-active pair keeps plain positional nearness visible to
    centroid-style consumers, for which the gated zeros would otherwise
    drag unrelated phases together; the gated pairs carry the fainter
    channel gain so those same consumers are steered by position along
    the route rather than by hand state."""
    cells = world.width * world.height
    kinds = TEMPLATE_KINDS[world.template]
    planes = np.zeros((len(kinds) + 1, cells), dtype=np.float32)
    kind_row = {k: i for i, k in enumerate(kinds)}
    for obj in world.objects.values():
        planes[kind_row[obj.kind], obj.pos[0] * world.width + obj.pos[1]] += 1.0
    planes[len(kinds), world.gripper[0] * world.width + world.gripper[1]] = GRIPPER_GAIN

    coords = np.zeros(6, dtype=np.float32)
    coords[0] = COORD_GAIN * (world.gripper[0] + 1)
    coords[1] = COORD_GAIN * (world.gripper[1] + 1)
    pair = 2 if world.held_object is None else 4
    coords[pair] = CHANNEL_GAIN * (world.gripper[0] + 1)
    coords[pair + 1] = CHANNEL_GAIN * (world.gripper[1] + 1)
    held = np.array([0.0 if world.held_object is None else 1.0], dtype=np.float32)
    pressed = np.array(
        [1.0 if i in world.pressed else 0.0 for i in _pressable_ids(world)],
        dtype=np.float32,
    )
    features = np.concatenate([planes.ravel(), coords, held, pressed])
    return Observation(features=features, symbolic=world)


# --- rendering and serialization -------------------------------------------

def template_targets(template: Template) -> dict[str, tuple[int, int]]:
    """Named special cells for each template, for renderers and the console."""
    if template is Template.STACKING:
        return {"plate_a": STACK_TARGET_A, "plate_b": STACK_TARGET_B}
    if template is Template.INSERTION:
        return {"fixture": INSERT_TARGET, "approach": INSERT_APPROACH}
    if template is Template.APPLIANCE:
        return {"door_open": DOOR_OPEN, "door_closed": DOOR_CLOSED, "oven": OVEN_CELL}
    return {}


def render_ascii(world: WorldState) -> str:
    grid = [["." for _ in range(world.width)] for _ in range(world.height)]
    for name, (r, c) in template_targets(world.template).items():
        grid[r][c] = name[0].upper()
    for i, obj in world.objects.items():
        if obj.kind == "key":
            ch = {"\b": "<", " ": "_"}.get(obj.char, obj.char)
        elif obj.char is not None:
            ch = obj.char
        else:
            ch = obj.kind[0]
        grid[obj.pos[0]][obj.pos[1]] = ch
    gr, gc = world.gripper
    grid[gr][gc] = "@" if world.held_object is None else "&"
    lines = ["".join(row) for row in grid]
    lines.append(f"typed={''.join(world.typed)!r} pressed={sorted(world.pressed)}")
    return "\n".join(lines)


def world_to_dict(world: WorldState) -> dict:
    """Canonical JSON-friendly form; also the basis of exact-restore checks."""
    return {
        "width": world.width,
        "height": world.height,
        "gripper": list(world.gripper),
        "held_object": world.held_object,
        "objects": [
            {
                "id": i,
                "pos": list(o.pos),
                "kind": o.kind,
                "char": o.char,
                "arrival": o.arrival,
            }
            for i, o in sorted(world.objects.items())
        ],
        "pressed": sorted(world.pressed),
        "typed": "".join(world.typed),
        "last_move": world.last_move,
        "rng_seed": world.rng_seed,
        "template": world.template.value,
    }


def world_from_dict(data: dict) -> WorldState:
    return WorldState(
        width=data["width"],
        height=data["height"],
        gripper=tuple(data["gripper"]),
        held_object=data["held_object"],
        objects={
            o["id"]: ObjectState(tuple(o["pos"]), o["kind"], o["char"], o["arrival"])
            for o in data["objects"]
        },
        pressed=frozenset(data["pressed"]),
        typed=tuple(data["typed"]),
        last_move=data["last_move"],
        rng_seed=data["rng_seed"],
        template=Template(data["template"]),
    )


def scene_json(world: WorldState) -> dict:
    """Scene description for the operator console; superset of world_to_dict."""
    scene = world_to_dict(world)
    scene["targets"] = {k: list(v) for k, v in template_targets(world.template).items()}
    return scene
