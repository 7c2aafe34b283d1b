"""Append-only trajectory log: JSON Lines on disk, validation, extraction.

One log holds everything a collection run produced: a header, every frame
from every robot, ground-truth step boundaries, and episode outcomes. The
policy trainset (human intervention frames only) and the detector trainset
(all frames, final-second labeled) are both carved out of the same records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from . import TICK_RATE
from .domain import Action, Actor, Frame, Mode, Score, TaskSpec
from .sentinel import label_frames

LOG_FORMAT_VERSION = 1
LOG_SUFFIX = ".gcent.jsonl"


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_digest(config: dict) -> str:
    """Hex 64-bit FNV-1a over the canonical JSON form of a config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return f"{fnv1a_64(canonical.encode('utf-8')):016x}"


@dataclass(frozen=True)
class Header:
    task_name: str
    robot_ids: tuple[str, ...]
    digest: str
    tick_rate: int = TICK_RATE
    version: int = LOG_FORMAT_VERSION


@dataclass(frozen=True)
class StepBoundary:
    robot_id: str
    episode_id: str
    step_index: int
    end_tick: int


@dataclass(frozen=True)
class EpisodeEnd:
    robot_id: str
    episode_id: str
    score: Score


Record = Union[Header, Frame, StepBoundary, EpisodeEnd]


def record_to_obj(record: Record) -> dict:
    if isinstance(record, Header):
        return {
            "type": "header",
            "version": record.version,
            "task": record.task_name,
            "tick_rate": record.tick_rate,
            "robots": list(record.robot_ids),
            "digest": record.digest,
        }
    if isinstance(record, Frame):
        return {
            "type": "frame",
            "tick": record.tick,
            "episode_id": record.episode_id,
            "robot_id": record.robot_id,
            "step_index": record.step_index,
            "observation": [float(x) for x in record.observation],
            "action": record.action.name,
            "actor": record.actor.value,
            "mode": record.mode.value,
            "sentinel_verdict": record.sentinel_verdict,
        }
    if isinstance(record, StepBoundary):
        return {
            "type": "step_boundary",
            "robot_id": record.robot_id,
            "episode_id": record.episode_id,
            "step_index": record.step_index,
            "end_tick": record.end_tick,
        }
    if isinstance(record, EpisodeEnd):
        return {
            "type": "episode_end",
            "robot_id": record.robot_id,
            "episode_id": record.episode_id,
            "score": [record.score.value.numerator, record.score.value.denominator],
        }
    raise TypeError(f"not a log record: {record!r}")


def record_from_obj(obj: dict) -> Record:
    kind = obj.get("type")
    if kind == "header":
        return Header(
            task_name=obj["task"],
            robot_ids=tuple(obj["robots"]),
            digest=obj["digest"],
            tick_rate=obj["tick_rate"],
            version=obj["version"],
        )
    if kind == "frame":
        return Frame(
            tick=obj["tick"],
            episode_id=obj["episode_id"],
            robot_id=obj["robot_id"],
            step_index=obj["step_index"],
            observation=np.asarray(obj["observation"], dtype=np.float32),
            action=Action[obj["action"]],
            actor=Actor(obj["actor"]),
            mode=Mode(obj["mode"]),
            sentinel_verdict=obj["sentinel_verdict"],
        )
    if kind == "step_boundary":
        return StepBoundary(
            robot_id=obj["robot_id"],
            episode_id=obj["episode_id"],
            step_index=obj["step_index"],
            end_tick=obj["end_tick"],
        )
    if kind == "episode_end":
        num, den = obj["score"]
        return EpisodeEnd(
            robot_id=obj["robot_id"],
            episode_id=obj["episode_id"],
            score=Score(Fraction(num, den)),
        )
    raise ValueError(f"unknown record type {kind!r}")


class TrajectoryStore:
    """Ordered record list with append-only aggregation semantics.

    The version counts retraining rounds: version 0 holds the warmup data,
    and each aggregate() call stacks one round's records on top.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []
        self.version = 0
        self.round_starts: list[tuple[int, int]] = [(0, 0)]  # (version, first index)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def header(self) -> Optional[Header]:
        return self.records[0] if self.records and isinstance(self.records[0], Header) else None

    def append(self, record: Record) -> None:
        if isinstance(record, Header):
            if self.records:
                raise ValueError("Header must be the first record, exactly once")
        elif not self.records:
            raise ValueError("first record must be the Header")
        if not isinstance(record, (Header, Frame, StepBoundary, EpisodeEnd)):
            raise TypeError(f"not a log record: {record!r}")
        self.records.append(record)

    def extend(self, records: Iterable[Record]) -> None:
        for r in records:
            self.append(r)

    def aggregate(self, new_records: Sequence[Record]) -> "TrajectoryStore":
        """Next-round store: same records plus the new ones, version + 1."""
        for r in new_records:
            if isinstance(r, Header):
                raise ValueError("aggregated rounds must not carry a new Header")
        out = TrajectoryStore()
        out.records = list(self.records)
        out.version = self.version + 1
        out.round_starts = list(self.round_starts) + [(out.version, len(out.records))]
        out.records.extend(new_records)
        return out

    def copy(self) -> "TrajectoryStore":
        """Snapshot of the current records (records themselves are immutable)."""
        out = TrajectoryStore()
        out.records = list(self.records)
        out.version = self.version
        out.round_starts = list(self.round_starts)
        return out

    # --- views ------------------------------------------------------------

    def frames(self) -> Iterator[Frame]:
        return (r for r in self.records if isinstance(r, Frame))

    def episodes(self) -> dict[tuple[str, str], list[Frame]]:
        """Frames grouped per (robot, episode), in log order, episodes in
        order of first appearance."""
        out: dict[tuple[str, str], list[Frame]] = {}
        for f in self.frames():
            out.setdefault((f.robot_id, f.episode_id), []).append(f)
        return out

    def boundaries(self) -> dict[tuple[str, str], list[tuple[int, int]]]:
        out: dict[tuple[str, str], list[tuple[int, int]]] = {}
        for r in self.records:
            if isinstance(r, StepBoundary):
                out.setdefault((r.robot_id, r.episode_id), []).append(
                    (r.step_index, r.end_tick)
                )
        return out

    # --- persistence ------------------------------------------------------

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if not str(path).endswith(LOG_SUFFIX):
            path = path.with_name(path.name + LOG_SUFFIX)
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record_to_obj(record)) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrajectoryStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    store.append(record_from_obj(json.loads(line)))
        return store


def extract_policy_trainset(store: TrajectoryStore) -> list[tuple[np.ndarray, Action]]:
    """Human intervention frames, in log order. Warmup demonstrations are
    stored as interventions, so they come along without a special case;
    rewind and autonomous frames never do."""
    return [
        (f.observation, f.action)
        for f in store.frames()
        if f.mode is Mode.INTERVENTION and f.actor is Actor.HUMAN
    ]


def extract_sentinel_trainset(store: TrajectoryStore) -> list[tuple[np.ndarray, int, bool]]:
    """Final-second labeling applied per episode over the full log, every
    mode included."""
    episodes = store.episodes()
    for key in store.boundaries():
        if key not in episodes:
            raise ValueError(f"step boundary references unknown episode {key}")
    bounds = store.boundaries()
    out: list[tuple[np.ndarray, int, bool]] = []
    for key, frames in episodes.items():
        out.extend(label_frames(frames, bounds.get(key, [])))
    return out


# --- validation -------------------------------------------------------------

_NEXT_MODES = {
    Mode.INFERENCE: {Mode.INFERENCE, Mode.AWAITING_INTERVENTION, Mode.INTERVENTION, Mode.REWIND},
    Mode.AWAITING_INTERVENTION: {Mode.AWAITING_INTERVENTION, Mode.INTERVENTION, Mode.REWIND},
    Mode.INTERVENTION: {Mode.INTERVENTION, Mode.INFERENCE, Mode.REWIND},
    Mode.REWIND: {Mode.REWIND, Mode.INTERVENTION, Mode.INFERENCE},
}

_MODE_ACTOR = {
    Mode.INFERENCE: Actor.POLICY,
    Mode.AWAITING_INTERVENTION: Actor.POLICY,
    Mode.INTERVENTION: Actor.HUMAN,
    Mode.REWIND: Actor.HUMAN,
}


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def flag(self, index: int, message: str) -> None:
        self.violations.append(f"record {index}: {message}")


def _delta_matches_action(
    delta: np.ndarray, action: Action, template, width: int, height: int
) -> bool:
    """Whether an observed feature-vector change is explainable by one action.

    All legal transitions touch a small, action-specific set of entries; a
    mid-trajectory perturbation moves an object nobody is holding and breaks
    that shape."""
    from .gridworld import CHANNEL_GAIN, COORD_GAIN, GRIPPER_GAIN, TEMPLATE_KINDS

    cells = width * height
    n_kinds = len(TEMPLATE_KINDS[template])
    coord_base = (n_kinds + 1) * cells  # always/empty/carrying row-col pairs
    held_idx = coord_base + 6
    nz = np.nonzero(delta)[0]
    if len(nz) == 0:
        return True  # clipped move, failed grasp, idle hold: all no-ops
    if action is Action.NOOP:
        return False
    if action in (Action.GRASP, Action.RELEASE):
        # Position, object planes, and the ungated coordinates stay put;
        # the gated coordinates migrate between the empty-hand and the
        # carrying slot pair.
        if not set(nz) <= set(range(coord_base + 2, held_idx + 1)):
            return False
        sign = 1.0 if action is Action.GRASP else -1.0
        if delta[held_idx] != sign:
            return False
        for axis in (0, 1):
            gained = delta[coord_base + 4 + axis]
            if delta[coord_base + 2 + axis] != -gained:
                return False
            if sign * gained <= 0:  # offset coords are never zero
                return False
        return True
    if action is Action.PRESS:
        return len(nz) == 1 and nz[0] > held_idx and delta[nz[0]] == 1.0
    # movement: the gripper plane, the ungated coordinate, and its echo in
    # the active gated pair shift by one cell; exactly when carrying, one
    # object plane shifts identically (the held object riding along)
    vertical = action in (Action.UP, Action.DOWN)
    axis = 0 if vertical else 1
    sign = -1.0 if action in (Action.UP, Action.LEFT) else 1.0
    if delta[coord_base + axis] != sign * COORD_GAIN:
        return False
    pair = None
    for cand in (2, 4):
        if delta[coord_base + cand + axis] == sign * CHANNEL_GAIN:
            pair = cand
    if pair is None:
        return False
    coord_idxs = {coord_base + axis, coord_base + pair + axis}
    by_plane: dict[int, list[int]] = {}
    for idx in nz:
        if idx in coord_idxs:
            continue
        if idx >= coord_base:
            return False  # other coords, held, and pressed stay put on a move
        by_plane.setdefault(int(idx) // cells, []).append(int(idx))
    gripper_plane = n_kinds
    if gripper_plane not in by_plane or len(by_plane) > 2:
        return False
    if (len(by_plane) == 2) != (pair == 4):
        return False
    offset = {Action.UP: -width, Action.DOWN: width, Action.LEFT: -1, Action.RIGHT: 1}[action]
    pairs = {}
    for plane, idxs in by_plane.items():
        magnitude = GRIPPER_GAIN if plane == gripper_plane else 1.0
        if len(idxs) != 2:
            return False
        minus = [i for i in idxs if delta[i] == -magnitude]
        plus = [i for i in idxs if delta[i] == magnitude]
        if len(minus) != 1 or len(plus) != 1:
            return False
        src, dst = minus[0] % cells, plus[0] % cells
        if dst - src != offset:
            return False
        if action in (Action.LEFT, Action.RIGHT) and src // width != dst // width:
            return False
        pairs[plane] = (src, dst)
    for plane, (src, dst) in pairs.items():
        if plane != gripper_plane and pairs[gripper_plane] != (src, dst):
            return False
    return True


def continuity_violations(store: "TrajectoryStore") -> list[str]:
    """Optional deep check: consecutive frames of an episode must differ by
    exactly one action's worth of change. Rewind runs are exempt (they jump
    by construction); injected perturbations show up here."""
    header = store.header
    if header is None:
        return ["missing header"]
    from .domain import Template

    template = Template(header.task_name)
    from .gridworld import GRID_H, GRID_W

    out = []
    for (robot, episode), frames in store.episodes().items():
        for prev, cur in zip(frames, frames[1:]):
            if prev.mode is Mode.REWIND or cur.mode is Mode.REWIND:
                continue
            delta = cur.observation - prev.observation
            if not _delta_matches_action(delta, prev.action, template, GRID_W, GRID_H):
                out.append(
                    f"{robot}/{episode}: discontinuity after tick {prev.tick} "
                    f"(action {prev.action.name} cannot explain the state change)"
                )
    return out


def validate(store_or_records: Union[TrajectoryStore, Sequence[Record]], task: Optional[TaskSpec] = None) -> ValidationReport:
    """Structural hygiene check over a whole log.

    Covers header placement, per-episode tick ordering (strictly increasing,
    except rewind runs which enter at or below the previous tick and strictly
    decrease inside), the mode-adjacency table, actor/mode consistency,
    step_index discipline, and boundary/outcome cross-references.
    """
    records = (
        store_or_records.records
        if isinstance(store_or_records, TrajectoryStore)
        else list(store_or_records)
    )
    report = ValidationReport()
    if not records:
        report.violations.append("empty log: missing header")
        return report
    if not isinstance(records[0], Header):
        report.flag(0, "first record must be the header")
    n_steps: Optional[int] = None
    header = records[0] if isinstance(records[0], Header) else None
    if header is not None and task is not None:
        n_steps = task.n_steps
    if header is not None and task is None:
        from .gridworld import make_task
        from .domain import Template

        try:
            n_steps = make_task(Template(header.task_name)).n_steps
        except ValueError:
            report.flag(0, f"header names unknown task {header.task_name!r}")

    last_frame: dict[tuple[str, str], tuple[int, Frame]] = {}
    seen_ticks: dict[tuple[str, str], set[int]] = {}
    boundary_count: dict[tuple[str, str], int] = {}
    last_boundary_step: dict[tuple[str, str], int] = {}
    ended: dict[tuple[str, str], int] = {}

    for i, rec in enumerate(records):
        if isinstance(rec, Header):
            if i != 0:
                report.flag(i, "duplicate header")
            continue
        if isinstance(rec, Frame):
            key = (rec.robot_id, rec.episode_id)
            if header is not None and rec.robot_id not in header.robot_ids:
                report.flag(i, f"frame for unlisted robot {rec.robot_id!r}")
            if key in ended:
                report.flag(i, f"frame after episode_end (record {ended[key]})")
            if _MODE_ACTOR[rec.mode] is not rec.actor:
                report.flag(i, f"{rec.mode.value} frame with actor {rec.actor.value}")
            if n_steps is not None and rec.step_index >= n_steps:
                report.flag(i, f"step_index {rec.step_index} out of range")
            prev = last_frame.get(key)
            if prev is None:
                if rec.mode not in (Mode.INFERENCE, Mode.INTERVENTION):
                    report.flag(i, f"episode opens in mode {rec.mode.value}")
            else:
                _, pf = prev
                if rec.mode not in _NEXT_MODES[pf.mode]:
                    report.flag(i, f"illegal mode step {pf.mode.value} -> {rec.mode.value}")
                in_rewind = rec.mode is Mode.REWIND
                was_rewind = pf.mode is Mode.REWIND
                if in_rewind and was_rewind:
                    if rec.tick >= pf.tick:
                        report.flag(i, "ticks inside a rewind run must strictly decrease")
                elif in_rewind:
                    if rec.tick > pf.tick:
                        report.flag(
                            i,
                            "rewind run cannot start above the previous tick "
                            "(no rewind boundary reached this point)",
                        )
                elif was_rewind:
                    if rec.tick <= pf.tick:
                        report.flag(i, "tick after a rewind run must move forward again")
                    if rec.step_index != pf.step_index:
                        report.flag(i, "step_index must resume at the rewound value")
                else:
                    if rec.tick <= pf.tick:
                        report.flag(i, f"tick must increase ({pf.tick} -> {rec.tick})")
                if in_rewind and was_rewind and rec.step_index > pf.step_index:
                    report.flag(i, "step_index cannot grow inside a rewind run")
                if not in_rewind and not was_rewind and rec.step_index < pf.step_index:
                    # steps may jump by more than one in a frame (a shove can
                    # satisfy several predicates at once) but never backward
                    # outside a rewind run
                    report.flag(
                        i,
                        f"step_index fell {pf.step_index} -> {rec.step_index} outside rewind",
                    )
            last_frame[key] = (i, rec)
            seen_ticks.setdefault(key, set()).add(rec.tick)
            continue
        if isinstance(rec, StepBoundary):
            key = (rec.robot_id, rec.episode_id)
            if key not in seen_ticks:
                report.flag(i, f"boundary for unknown episode {key}")
            elif rec.end_tick not in seen_ticks[key]:
                report.flag(i, f"boundary end_tick {rec.end_tick} matches no frame")
            if n_steps is not None and rec.step_index >= n_steps:
                report.flag(i, f"boundary step_index {rec.step_index} out of range")
            prev_step = last_boundary_step.get(key)
            if prev_step is not None and rec.step_index != prev_step + 1:
                report.flag(i, f"boundaries out of order ({prev_step} then {rec.step_index})")
            elif prev_step is None and rec.step_index != 0:
                report.flag(i, f"first boundary must be step 0, got {rec.step_index}")
            last_boundary_step[key] = rec.step_index
            boundary_count[key] = boundary_count.get(key, 0) + 1
            continue
        if isinstance(rec, EpisodeEnd):
            key = (rec.robot_id, rec.episode_id)
            if key not in seen_ticks:
                report.flag(i, f"episode_end for unknown episode {key}")
            if key in ended:
                report.flag(i, "duplicate episode_end")
            ended[key] = i
            if n_steps is not None:
                expected = Fraction(boundary_count.get(key, 0), n_steps)
                if rec.score.value != expected:
                    report.flag(
                        i,
                        f"score {rec.score.value} disagrees with the "
                        f"{boundary_count.get(key, 0)} logged boundaries of {n_steps} steps",
                    )
            continue
        report.flag(i, f"unknown record {rec!r}")
    return report
