"""Vocabulary-level checks: scores, frames, enums."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcent.domain import (
    Action,
    Actor,
    Frame,
    Mode,
    Score,
    TEMPLATE_STEP_COUNTS,
    Template,
    mean_score,
    score_episode,
)


def test_score_bounds():
    Score(Fraction(0))
    Score(Fraction(1))
    with pytest.raises(ValueError):
        Score(Fraction(9, 8))
    with pytest.raises(ValueError):
        Score(Fraction(-1, 8))


def test_score_episode_exact():
    s = score_episode(3, 8)
    assert s.value == Fraction(3, 8)
    assert s.as_float == 0.375


def test_score_episode_rejects_bad_counts():
    with pytest.raises(ValueError):
        score_episode(9, 8)
    with pytest.raises(ValueError):
        score_episode(-1, 8)
    with pytest.raises(ValueError):
        score_episode(0, 0)


@given(st.lists(st.integers(0, 8), min_size=1, max_size=40))
def test_mean_score_matches_numpy(counts):
    scores = [score_episode(c, 8) for c in counts]
    mean, std = mean_score(scores)
    vals = [c / 8 for c in counts]
    assert mean == pytest.approx(np.mean(vals), abs=1e-12)
    assert std == pytest.approx(np.std(vals), abs=1e-12)


def test_action_ordinals_are_stable():
    # the cloner's tie-break depends on this exact order
    assert [a.value for a in Action] == list(range(8))
    assert Action.UP.value == 0 and Action.NOOP.value == 7


def test_template_step_counts():
    assert TEMPLATE_STEP_COUNTS[Template.STACKING] == 8
    assert TEMPLATE_STEP_COUNTS[Template.INSERTION] == 2
    assert TEMPLATE_STEP_COUNTS[Template.APPLIANCE] == 5
    assert TEMPLATE_STEP_COUNTS[Template.TYPING] == 7


def _frame(mode, actor):
    return Frame(
        tick=0,
        episode_id="e",
        robot_id="r",
        step_index=0,
        observation=np.zeros(3, dtype=np.float32),
        action=Action.NOOP,
        actor=actor,
        mode=mode,
    )


def test_frame_actor_mode_pairing():
    _frame(Mode.INFERENCE, Actor.POLICY)
    _frame(Mode.AWAITING_INTERVENTION, Actor.POLICY)
    _frame(Mode.INTERVENTION, Actor.HUMAN)
    _frame(Mode.REWIND, Actor.HUMAN)
    for mode, actor in [
        (Mode.INFERENCE, Actor.HUMAN),
        (Mode.AWAITING_INTERVENTION, Actor.HUMAN),
        (Mode.INTERVENTION, Actor.POLICY),
        (Mode.REWIND, Actor.POLICY),
    ]:
        with pytest.raises(ValueError):
            _frame(mode, actor)


def test_frame_equality_compares_observation_contents():
    a = _frame(Mode.INFERENCE, Actor.POLICY)
    b = _frame(Mode.INFERENCE, Actor.POLICY)
    assert a == b
    c = Frame(
        tick=0,
        episode_id="e",
        robot_id="r",
        step_index=0,
        observation=np.ones(3, dtype=np.float32),
        action=Action.NOOP,
        actor=Actor.POLICY,
        mode=Mode.INFERENCE,
    )
    assert a != c
