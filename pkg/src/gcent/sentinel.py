"""Step-completion detection and intervention-request triggering.

Two interchangeable detectors produce the per-tick boolean verdict z: an
oracle wrapping the ground-truth predicate with configurable confusion, and
a trainable nearest-centroid classifier fed by final-second labeling. The
request rule on top of either is a strict timeout: ask for help only when
the current step has not been seen complete for more than T_max ticks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import TICK_RATE
from .domain import Frame, TaskSpec
from .gridworld import Observation, WorldState, observe, step_complete

DEFAULT_T_MAX = 150  # ticks; 15 s of stall before requesting help
FINAL_SECOND_FRAMES = TICK_RATE  # positives per completed step, before clamping


def oracle_verdict(
    world: WorldState,
    task: TaskSpec,
    step_index: int,
    fpr: float,
    fnr: float,
    rng: random.Random,
) -> bool:
    """Ground-truth completion with injected confusion: flips a true verdict
    to 0 with probability fnr and a false one to 1 with probability fpr."""
    for name, p in (("fpr", fpr), ("fnr", fnr)):
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"{name} must be a probability, got {p}")
    truth = step_complete(world, task, step_index)
    if truth:
        return not (rng.random() < fnr)
    return rng.random() < fpr


def should_request_intervention(z: bool, ticks_in_step: int, t_max: int) -> bool:
    """Request help iff the step is judged incomplete and has dragged on
    strictly longer than t_max ticks."""
    if ticks_in_step < 0:
        raise ValueError("ticks_in_step must be >= 0")
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    return (not z) and ticks_in_step > t_max


def label_frames(
    episode: Sequence[Frame],
    step_boundaries: Sequence[tuple[int, int]],
) -> list[tuple[np.ndarray, int, bool]]:
    """Final-second labeling over one episode.

    Boundaries are (step_index, end_tick) pairs for completed steps, in
    order. Frames are carved into spans by boundary tick: a frame belongs to
    completed step s if its tick lies in (end of s-1, end of s]. The last
    min(10, span length) frames of each completed span are positive; every
    other frame in the episode is negative, attributed to the span it fell
    in (or to the first never-completed step after the last boundary).
    """
    out: list[tuple[np.ndarray, int, bool]] = []
    if not episode:
        return out
    ticks = [f.tick for f in episode]
    lo, hi = min(ticks), max(ticks)
    for s, end in step_boundaries:
        if not (lo <= end <= hi):
            raise ValueError(f"boundary tick {end} for step {s} outside episode [{lo}, {hi}]")

    prev_end = lo - 1
    claimed = [False] * len(episode)
    for s, end in step_boundaries:
        span = [i for i, f in enumerate(episode) if prev_end < f.tick <= end and not claimed[i]]
        n_pos = min(FINAL_SECOND_FRAMES, len(span))
        pos = set(span[len(span) - n_pos:])
        for i in span:
            claimed[i] = True
            out.append((episode[i].observation, s, i in pos))
        prev_end = end

    trailing_step = step_boundaries[-1][0] + 1 if step_boundaries else 0
    for i, f in enumerate(episode):
        if not claimed[i]:
            out.append((f.observation, trailing_step, False))
    return out


@dataclass(frozen=True)
class StepClassifier:
    pos_centroid: np.ndarray
    neg_centroid: np.ndarray
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class SentinelModel:
    """Per-step nearest-centroid classifiers; a step without both classes in
    its training data stays untrained and always answers 0."""

    per_step: dict[int, StepClassifier]
    version: int = 0

    def trained_steps(self) -> list[int]:
        return sorted(self.per_step)


def train_sentinel(
    labeled: Sequence[tuple[np.ndarray, int, bool]], version: int = 0
) -> SentinelModel:
    if not labeled:
        raise ValueError("cannot train a sentinel on zero labeled frames")
    by_step: dict[int, dict[bool, list[np.ndarray]]] = {}
    for features, s, label in labeled:
        by_step.setdefault(s, {True: [], False: []})[bool(label)].append(
            np.asarray(features, dtype=np.float32)
        )
    per_step = {}
    for s, classes in by_step.items():
        if classes[True] and classes[False]:
            per_step[s] = StepClassifier(
                pos_centroid=np.mean(classes[True], axis=0),
                neg_centroid=np.mean(classes[False], axis=0),
                n_pos=len(classes[True]),
                n_neg=len(classes[False]),
            )
    return SentinelModel(per_step=per_step, version=version)


def learned_verdict(
    model: SentinelModel,
    obs: Observation,
    step_index: int,
    threshold: float = 0.0,
) -> bool:
    """1 iff the step's classifier exists and the query sits strictly closer
    to the positive centroid than the negative one (margin past threshold)."""
    clf = model.per_step.get(step_index)
    if clf is None:
        return False
    q = obs.features.astype(np.float64)
    d_pos = float(((q - clf.pos_centroid.astype(np.float64)) ** 2).sum())
    d_neg = float(((q - clf.neg_centroid.astype(np.float64)) ** 2).sum())
    return (d_neg - d_pos) > threshold


@dataclass(frozen=True)
class OracleSentinel:
    fpr: float = 0.0
    fnr: float = 0.0


@dataclass(frozen=True)
class LearnedSentinel:
    model: SentinelModel
    threshold: float = 0.0


SentinelVariant = Union[OracleSentinel, LearnedSentinel]


@dataclass(frozen=True)
class SentinelConfig:
    variant: SentinelVariant = field(default_factory=OracleSentinel)
    t_max: int = DEFAULT_T_MAX

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def sentinel_verdict(
    config: SentinelConfig,
    world: WorldState,
    task: TaskSpec,
    step_index: int,
    rng: random.Random,
) -> bool:
    """Evaluate the configured detector on one state."""
    v = config.variant
    if isinstance(v, OracleSentinel):
        return oracle_verdict(world, task, step_index, v.fpr, v.fnr, rng)
    return learned_verdict(v.model, observe(world), step_index, v.threshold)


def parse_sentinel_spec(spec: str) -> tuple[str, dict[str, float]]:
    """Parse a selector like 'oracle:fpr=0.05,fnr=0.05' or 'learned:threshold=0'.

    Returns the variant name and its keyword arguments; binding a trained
    model to a learned variant is the caller's job.
    """
    name, _, rest = spec.partition(":")
    name = name.strip().lower()
    if name not in ("oracle", "learned"):
        raise ValueError(f"unknown sentinel variant {name!r}")
    kwargs: dict[str, float] = {}
    if rest.strip():
        for part in rest.split(","):
            key, _, val = part.partition("=")
            if not _:
                raise ValueError(f"malformed sentinel option {part!r}")
            kwargs[key.strip()] = float(val)
    allowed = {"oracle": {"fpr", "fnr", "t_max"}, "learned": {"threshold", "t_max"}}[name]
    unknown = set(kwargs) - allowed
    if unknown:
        raise ValueError(f"unknown sentinel option(s) {sorted(unknown)} for {name}")
    return name, kwargs


def build_sentinel(
    spec: str, model: Optional[SentinelModel] = None, t_max: int = DEFAULT_T_MAX
) -> SentinelConfig:
    name, kwargs = parse_sentinel_spec(spec)
    t_max = int(kwargs.pop("t_max", t_max))
    if name == "oracle":
        return SentinelConfig(OracleSentinel(**kwargs), t_max=t_max)
    if model is None:
        raise ValueError("learned sentinel requires a trained model")
    return SentinelConfig(LearnedSentinel(model, **kwargs), t_max=t_max)
