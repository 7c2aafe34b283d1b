"""Robot session state machine: mode transitions, the snapshot ring, and
rewind restoration."""

import random

import numpy as np
import pytest

from gcent.domain import Action, Actor, Mode, Template
from gcent.gridworld import make_task, observe, world_to_dict
from gcent.policies import scripted_expert, train_cloner
from gcent.sentinel import OracleSentinel, SentinelConfig
from gcent.session import (
    BUFFER_CAPACITY,
    BeginRewind,
    HumanAction,
    IllegalTransition,
    Reset,
    RewindTo,
    Session,
    StartInference,
    Takeover,
)

CLEAN = SentinelConfig(OracleSentinel(0.0, 0.0))


def make_session(policy=None, sentinel=CLEAN, seed=5, template=Template.STACKING, ns=""):
    task = make_task(template)
    return Session(
        "rob",
        task,
        policy if policy is not None else scripted_expert(),
        sentinel,
        seed=seed,
        episode_namespace=ns,
    )


def stuck_policy(template=Template.STACKING):
    """A cloner that always answers NOOP, whatever it sees."""
    task = make_task(template)
    from gcent.gridworld import init_world

    feats = observe(init_world(task, 0)).features
    return train_cloner([(feats, Action.NOOP)], k=1)


def fingerprint(s: Session):
    return (
        s.mode,
        s.step_index,
        s.ticks_in_step,
        s.tick_counter,
        s.episode_id,
        s.episode_complete,
        len(s.buffer),
        s.frames_emitted,
        world_to_dict(s.world),
    )


# --- inference --------------------------------------------------------------

def test_new_session_shape():
    s = make_session()
    assert s.mode is Mode.INFERENCE
    assert (s.step_index, s.ticks_in_step, s.tick_counter) == (0, 0, 0)
    assert len(s.buffer) == 0
    assert s.episode_id == "rob-ep000"
    assert not s.episode_complete


def test_inference_tick_logs_pre_action_observation():
    s = make_session()
    before = observe(s.world).features
    frame = s.tick()
    assert frame is not None
    np.testing.assert_array_equal(frame.observation, before)
    assert frame.tick == 0 and s.tick_counter == 1
    assert frame.actor is Actor.POLICY and frame.mode is Mode.INFERENCE
    assert frame.sentinel_verdict is not None


def test_buffer_caps_at_capacity():
    s = make_session()
    for _ in range(50):
        s.tick()
    assert len(s.buffer) == BUFFER_CAPACITY == 30
    assert [snap.tick for snap in s.buffer] == list(range(20, 50))


def test_verdict_advances_step_and_resets_patience():
    s = make_session()
    for _ in range(300):
        frame = s.tick()
        if frame.sentinel_verdict:
            break
    else:
        pytest.fail("expert never completed a step")
    assert s.step_index == 1
    assert s.ticks_in_step == 0


def test_expert_completes_episode_and_clock_stops():
    s = make_session()
    for _ in range(600):
        s.tick()
        if s.episode_complete:
            break
    assert s.episode_complete
    task = make_task(Template.STACKING)
    assert s.step_index == task.n_steps
    assert s.tick() is None  # completed episodes emit nothing


def test_timeout_freezes_into_awaiting():
    s = make_session(
        policy=stuck_policy(), sentinel=SentinelConfig(OracleSentinel(0.0, 0.0), t_max=5)
    )
    for _ in range(5):
        s.tick()
        assert s.mode is Mode.INFERENCE  # five stalled ticks: still patient
    s.tick()  # sixth pushes ticks_in_step to 6 > t_max
    assert s.mode is Mode.AWAITING_INTERVENTION


def test_paused_robot_is_frozen_but_clock_runs():
    s = make_session(
        policy=stuck_policy(), sentinel=SentinelConfig(OracleSentinel(0.0, 0.0), t_max=3)
    )
    while s.mode is Mode.INFERENCE:
        s.tick()
    world = world_to_dict(s.world)
    depth = len(s.buffer)
    t0 = s.tick_counter
    frames = [s.tick() for _ in range(4)]
    assert all(f.mode is Mode.AWAITING_INTERVENTION for f in frames)
    assert all(f.action is Action.NOOP and f.actor is Actor.POLICY for f in frames)
    assert [f.tick for f in frames] == [t0, t0 + 1, t0 + 2, t0 + 3]
    assert world_to_dict(s.world) == world
    assert len(s.buffer) == depth


# --- manual control ---------------------------------------------------------

def test_takeover_then_human_actions():
    s = make_session()
    s.tick()
    frames = s.apply_command(Takeover())
    assert frames == [] and s.mode is Mode.INTERVENTION
    assert s.tick() is None  # intervention advances only via commands
    before = observe(s.world).features
    row, col = s.world.gripper
    [frame] = s.apply_command(HumanAction(Action.DOWN))
    assert frame.actor is Actor.HUMAN and frame.mode is Mode.INTERVENTION
    np.testing.assert_array_equal(frame.observation, before)
    assert s.world.gripper == (min(row + 1, 11), col)


def test_start_inference_resets_patience():
    s = make_session()
    for _ in range(5):
        s.tick()
    s.apply_command(Takeover())
    s.apply_command(HumanAction(Action.NOOP))
    assert s.apply_command(StartInference()) == []
    assert s.mode is Mode.INFERENCE and s.ticks_in_step == 0


def test_flag_for_help_only_from_inference():
    s = make_session()
    s.tick()
    s.flag_for_help()
    assert s.mode is Mode.AWAITING_INTERVENTION
    with pytest.raises(ValueError):
        s.flag_for_help()
    s.apply_command(Takeover())
    with pytest.raises(ValueError):
        s.flag_for_help()


# --- rewind -----------------------------------------------------------------

def _shadow_run(s: Session, ticks: int):
    """Advance with the session's own policy, recording the pre-action state
    at every tick, exactly what each ring snapshot should hold."""
    shadow = {}
    for _ in range(ticks):
        shadow[s.tick_counter] = (world_to_dict(s.world), s.step_index)
        s.tick()
    return shadow


def test_rewind_restores_recorded_state():
    s = make_session()
    shadow = _shadow_run(s, 20)
    s.apply_command(BeginRewind())
    assert s.mode is Mode.REWIND
    frames = s.apply_command(RewindTo(7))
    assert len(frames) == 7
    assert [f.tick for f in frames] == list(range(19, 12, -1))
    assert all(f.mode is Mode.REWIND and f.actor is Actor.HUMAN for f in frames)
    dest_tick = 13
    world, step_index = shadow[dest_tick]
    assert world_to_dict(s.world) == world
    assert s.step_index == step_index
    assert s.tick_counter == dest_tick + 1
    assert s.mode is Mode.INTERVENTION
    assert len(s.buffer) == 13
    assert s.ticks_in_step == 0


def test_rewind_depth_fuzz_matches_shadow(rng):
    """Random run lengths and depths; restoration always equals the recorded
    pre-action state, and ticks resume just past the destination."""
    for trial in range(12):
        s = make_session(seed=trial)
        ticks = rng.randint(5, 45)
        shadow = _shadow_run(s, ticks)
        if s.episode_complete or s.mode is not Mode.INFERENCE:
            continue
        k = rng.randint(1, len(s.buffer))
        dest_tick = s.buffer[-k].tick
        s.apply_command(BeginRewind())
        frames = s.apply_command(RewindTo(k))
        world, step_index = shadow[dest_tick]
        assert world_to_dict(s.world) == world
        assert s.step_index == step_index
        assert s.tick_counter == dest_tick + 1
        assert len(frames) == k
        assert [f.tick for f in frames] == sorted((f.tick for f in frames), reverse=True)


def test_rewind_depth_validation():
    s = make_session()
    for _ in range(5):
        s.tick()
    s.apply_command(BeginRewind())
    with pytest.raises(ValueError):
        RewindTo(0)
    before = fingerprint(s)
    with pytest.raises(ValueError):
        s.apply_command(RewindTo(6))  # only 5 snapshots exist
    assert fingerprint(s) == before


def test_human_actions_also_feed_the_ring():
    s = make_session()
    s.tick()
    s.apply_command(Takeover())
    pre_human = world_to_dict(s.world)
    for a in (Action.DOWN, Action.DOWN, Action.RIGHT):
        s.apply_command(HumanAction(a))
    assert len(s.buffer) == 4
    s.apply_command(BeginRewind())
    s.apply_command(RewindTo(3))
    assert world_to_dict(s.world) == pre_human  # back before the human moved


# --- rejection and reset ----------------------------------------------------

ILLEGAL = {
    Mode.INFERENCE: [StartInference(), HumanAction(Action.UP), RewindTo(1)],
    Mode.AWAITING_INTERVENTION: [StartInference(), HumanAction(Action.UP), RewindTo(1)],
    Mode.INTERVENTION: [Takeover(), RewindTo(1)],
    Mode.REWIND: [Takeover(), BeginRewind(), StartInference(), HumanAction(Action.UP)],
}


def _session_in_mode(mode: Mode) -> Session:
    s = make_session()
    for _ in range(3):
        s.tick()
    if mode is Mode.INFERENCE:
        return s
    if mode is Mode.AWAITING_INTERVENTION:
        s.flag_for_help()
        return s
    s.apply_command(Takeover())
    if mode is Mode.INTERVENTION:
        return s
    s.apply_command(BeginRewind())
    return s


@pytest.mark.parametrize("mode", list(Mode))
def test_rejected_commands_leave_session_unchanged(mode):
    s = _session_in_mode(mode)
    assert s.mode is mode
    for cmd in ILLEGAL[mode]:
        before = fingerprint(s)
        with pytest.raises(IllegalTransition):
            s.apply_command(cmd)
        assert fingerprint(s) == before


def test_reset_starts_next_episode_deterministically():
    a = make_session(seed=9)
    for _ in range(7):
        a.tick()
    a.apply_command(Reset())
    b = make_session(seed=9)
    b.apply_command(Reset())
    assert a.episode_id == b.episode_id == "rob-ep001"
    assert a.mode is Mode.INFERENCE
    assert (a.tick_counter, a.step_index, len(a.buffer)) == (0, 0, 0)
    assert world_to_dict(a.world) == world_to_dict(b.world)


def test_reset_is_legal_everywhere():
    for mode in Mode:
        s = _session_in_mode(mode)
        s.apply_command(Reset())
        assert s.mode is Mode.INFERENCE


def test_episode_namespace_lands_in_ids():
    s = make_session(ns="r4-")
    assert s.episode_id == "rob-r4-ep000"
    s.apply_command(Reset())
    assert s.episode_id == "rob-r4-ep001"


def test_same_seed_same_stream():
    a, b = make_session(seed=31), make_session(seed=31)
    for _ in range(40):
        fa, fb = a.tick(), b.tick()
        assert fa == fb
    assert world_to_dict(a.world) == world_to_dict(b.world)
