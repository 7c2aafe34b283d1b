"""Completion detection: oracle confusion, final-second labeling, the
nearest-centroid detector, and the strict timeout rule."""

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcent import TICK_RATE
from gcent.domain import Action, Actor, Frame, Mode, Template
from gcent.gridworld import (
    Observation,
    ProgressTracker,
    init_world,
    make_task,
    observe,
    step,
    step_complete,
)
from gcent.policies import expert_action
from gcent.sentinel import (
    DEFAULT_T_MAX,
    FINAL_SECOND_FRAMES,
    LearnedSentinel,
    OracleSentinel,
    SentinelConfig,
    SentinelModel,
    StepClassifier,
    build_sentinel,
    label_frames,
    learned_verdict,
    oracle_verdict,
    parse_sentinel_spec,
    sentinel_verdict,
    should_request_intervention,
    train_sentinel,
)


def _frame(tick, obs=None, step_index=0):
    return Frame(
        tick=tick,
        episode_id="ep",
        robot_id="r0",
        step_index=step_index,
        observation=obs if obs is not None else np.array([float(tick)], dtype=np.float32),
        action=Action.NOOP,
        actor=Actor.HUMAN,
        mode=Mode.INTERVENTION,
    )


# --- timeout rule -----------------------------------------------------------

def test_request_rule_boundary():
    """The timeout is strict: exactly t_max stalled ticks is still patience."""
    assert should_request_intervention(False, 150, 150) is False
    assert should_request_intervention(False, 151, 150) is True
    assert should_request_intervention(True, 10_000, 150) is False


@given(
    z=st.booleans(),
    ticks=st.integers(0, 5000),
    t_max=st.integers(1, 2000),
)
def test_request_rule_is_strict_conjunction(z, ticks, t_max):
    assert should_request_intervention(z, ticks, t_max) == ((not z) and ticks > t_max)


def test_request_rule_validates_inputs():
    with pytest.raises(ValueError):
        should_request_intervention(False, -1, 150)
    with pytest.raises(ValueError):
        should_request_intervention(False, 0, 0)


def test_default_patience():
    assert DEFAULT_T_MAX == 150
    assert FINAL_SECOND_FRAMES == TICK_RATE == 10


# --- oracle -----------------------------------------------------------------

def test_clean_oracle_matches_ground_truth():
    """fpr=fnr=0 reproduces the completion predicate along a whole episode."""
    task = make_task(Template.APPLIANCE)
    world = init_world(task, 21)
    tracker = ProgressTracker(task)
    tracker.update(world)
    rng = random.Random(0)
    for _ in range(300):
        if tracker.complete:
            break
        world = step(world, expert_action(world, task, tracker.done))
        truth = step_complete(world, task, tracker.done)
        assert oracle_verdict(world, task, tracker.done, 0.0, 0.0, rng) == truth
        tracker.update(world)
    assert tracker.complete


def test_oracle_confusion_rates():
    """Verdicts flip at roughly the configured rates on fixed states."""
    task = make_task(Template.TYPING)
    incomplete = init_world(task, 3)  # nothing typed yet
    world = incomplete  # walk to the first key and press it so step 0 holds
    while not step_complete(world, task, 0):
        world = step(world, expert_action(world, task, 0))
    complete = world
    rng = random.Random(99)
    n = 4000
    fp = sum(oracle_verdict(incomplete, task, 0, 0.3, 0.0, rng) for _ in range(n)) / n
    fn = sum(not oracle_verdict(complete, task, 0, 0.0, 0.2, rng) for _ in range(n)) / n
    assert abs(fp - 0.3) < 0.03
    assert abs(fn - 0.2) < 0.03


def test_oracle_rejects_bad_rates():
    task = make_task(Template.TYPING)
    world = init_world(task, 0)
    rng = random.Random(0)
    with pytest.raises(ValueError):
        oracle_verdict(world, task, 0, -0.1, 0.0, rng)
    with pytest.raises(ValueError):
        oracle_verdict(world, task, 0, 0.0, 1.2, rng)


# --- final-second labeling --------------------------------------------------

def test_label_frames_marks_last_ten_of_each_span():
    episode = [_frame(t) for t in range(35)]
    boundaries = [(0, 14), (1, 19), (2, 34)]
    labeled = label_frames(episode, boundaries)
    assert len(labeled) == len(episode)
    by_tick = {int(obs[0]): (s, z) for obs, s, z in labeled}
    # step 0 spans ticks 0..14 (15 frames): positives are ticks 5..14
    for t in range(15):
        assert by_tick[t] == (0, t >= 5)
    # step 1 spans ticks 15..19 (5 frames, shorter than a second): all positive
    for t in range(15, 20):
        assert by_tick[t] == (1, True)
    # step 2 spans 20..34: last ten positive
    for t in range(20, 35):
        assert by_tick[t] == (2, t >= 25)


def test_label_frames_trailing_frames_are_negative():
    episode = [_frame(t) for t in range(20)]
    labeled = label_frames(episode, [(0, 7)])
    trailing = [(s, z) for obs, s, z in labeled if obs[0] > 7]
    assert trailing and all((s, z) == (1, False) for s, z in trailing)


def test_label_frames_no_boundaries_all_negative():
    episode = [_frame(t) for t in range(6)]
    labeled = label_frames(episode, [])
    assert [(s, z) for _, s, z in labeled] == [(0, False)] * 6


def test_label_frames_offset_ticks():
    """Episodes whose ticks do not start at zero still carve correctly."""
    episode = [_frame(t) for t in range(50, 70)]
    labeled = label_frames(episode, [(0, 61)])
    positives = sorted(int(obs[0]) for obs, s, z in labeled if z)
    assert positives == list(range(52, 62))


def test_label_frames_rejects_out_of_range_boundary():
    episode = [_frame(t) for t in range(5)]
    with pytest.raises(ValueError):
        label_frames(episode, [(0, 9)])


@settings(max_examples=120)
@given(st.data())
def test_label_frames_positive_counts(data):
    """Every completed step contributes exactly min(10, span) positives."""
    length = data.draw(st.integers(1, 60))
    ticks = list(range(length))
    n_bounds = data.draw(st.integers(0, min(4, length)))
    bound_ticks = sorted(data.draw(
        st.lists(st.sampled_from(ticks), min_size=n_bounds, max_size=n_bounds, unique=True)
    ))
    boundaries = [(s, t) for s, t in enumerate(bound_ticks)]
    episode = [_frame(t) for t in ticks]
    labeled = label_frames(episode, boundaries)
    assert len(labeled) == length
    prev = -1
    for s, end in boundaries:
        span = end - prev
        got = sum(1 for _, si, z in labeled if si == s and z)
        assert got == min(FINAL_SECOND_FRAMES, span)
        prev = end
    assert not any(z for _, si, z in labeled if si == len(boundaries))


# --- nearest-centroid detector ----------------------------------------------

def test_train_sentinel_centroids_are_class_means():
    rng = np.random.default_rng(7)
    labeled = []
    pos = rng.integers(0, 4, size=(6, 5)).astype(np.float32)
    neg = rng.integers(0, 4, size=(9, 5)).astype(np.float32)
    labeled += [(f, 2, True) for f in pos]
    labeled += [(f, 2, False) for f in neg]
    model = train_sentinel(labeled, version=3)
    clf = model.per_step[2]
    np.testing.assert_allclose(clf.pos_centroid, pos.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(clf.neg_centroid, neg.mean(axis=0), rtol=1e-6)
    assert (clf.n_pos, clf.n_neg) == (6, 9)
    assert model.version == 3


def test_train_sentinel_skips_one_class_steps():
    labeled = [
        (np.ones(3, dtype=np.float32), 0, True),
        (np.zeros(3, dtype=np.float32), 0, False),
        (np.ones(3, dtype=np.float32), 1, True),  # positives only
    ]
    model = train_sentinel(labeled)
    assert model.trained_steps() == [0]


def test_train_sentinel_rejects_empty():
    with pytest.raises(ValueError):
        train_sentinel([])


def test_learned_verdict_margin_rule():
    world = init_world(make_task(Template.TYPING), 0)
    clf = StepClassifier(
        pos_centroid=np.array([1.0], dtype=np.float32),
        neg_centroid=np.array([0.0], dtype=np.float32),
        n_pos=1,
        n_neg=1,
    )
    model = SentinelModel(per_step={0: clf})
    near_pos = Observation(np.array([0.9], dtype=np.float32), world)
    midpoint = Observation(np.array([0.5], dtype=np.float32), world)
    assert learned_verdict(model, near_pos, 0) is True
    assert learned_verdict(model, near_pos, 0, threshold=0.85) is False
    # equidistant is not "strictly closer"
    assert learned_verdict(model, midpoint, 0) is False


def test_learned_verdict_untrained_step_answers_no():
    model = SentinelModel(per_step={})
    world = init_world(make_task(Template.TYPING), 0)
    obs = Observation(np.full(3, 9.0, dtype=np.float32), world)
    assert learned_verdict(model, obs, 0) is False


def test_learned_sentinel_holdout_accuracy(warmup_store, stacking_task):
    """Trained on the warmup demonstrations, the detector reproduces the
    final-second labels of ten unseen expert episodes at >= 90%."""
    from gcent.datastore import extract_sentinel_trainset

    model = train_sentinel(extract_sentinel_trainset(warmup_store))
    assert model.trained_steps() == list(range(stacking_task.n_steps))
    hits = total = 0
    for seed in range(100, 110):
        world = init_world(stacking_task, seed)
        tracker = ProgressTracker(stacking_task)
        tracker.update(world)
        frames, bounds = [], []
        for tick in range(600):
            if tracker.complete:
                break
            obs = observe(world)
            a = expert_action(world, stacking_task, tracker.done)
            frames.append(
                Frame(
                    tick=tick,
                    episode_id="holdout",
                    robot_id="r0",
                    step_index=tracker.done,
                    observation=obs.features,
                    action=a,
                    actor=Actor.HUMAN,
                    mode=Mode.INTERVENTION,
                )
            )
            world = step(world, a)
            for s in tracker.update(world):
                bounds.append((s, tick))
        assert tracker.complete
        for feats, s, label in label_frames(frames, bounds):
            z = learned_verdict(model, Observation(feats, world), s)
            hits += int(z == label)
            total += 1
    assert hits / total >= 0.9


# --- configuration ----------------------------------------------------------

def test_sentinel_config_validates_t_max():
    with pytest.raises(ValueError):
        SentinelConfig(OracleSentinel(), t_max=0)


def test_sentinel_verdict_dispatches_both_variants():
    task = make_task(Template.TYPING)
    world = init_world(task, 1)
    rng = random.Random(5)
    clean = SentinelConfig(OracleSentinel(0.0, 0.0))
    assert sentinel_verdict(clean, world, task, 0, rng) == step_complete(world, task, 0)
    learned = SentinelConfig(LearnedSentinel(SentinelModel(per_step={})))
    assert sentinel_verdict(learned, world, task, 0, rng) is False


def test_parse_sentinel_spec():
    assert parse_sentinel_spec("oracle") == ("oracle", {})
    assert parse_sentinel_spec("oracle:fpr=0.05,fnr=0.1") == (
        "oracle",
        {"fpr": 0.05, "fnr": 0.1},
    )
    assert parse_sentinel_spec("learned:threshold=2.5") == ("learned", {"threshold": 2.5})
    with pytest.raises(ValueError):
        parse_sentinel_spec("psychic")
    with pytest.raises(ValueError):
        parse_sentinel_spec("oracle:threshold=1")  # learned-only option
    with pytest.raises(ValueError):
        parse_sentinel_spec("oracle:fpr")


def test_build_sentinel():
    cfg = build_sentinel("oracle:fpr=0.02,fnr=0.03,t_max=99")
    assert isinstance(cfg.variant, OracleSentinel)
    assert (cfg.variant.fpr, cfg.variant.fnr, cfg.t_max) == (0.02, 0.03, 99)
    with pytest.raises(ValueError):
        build_sentinel("learned")  # no model bound
    model = SentinelModel(per_step={})
    cfg = build_sentinel("learned:threshold=1.5", model=model)
    assert isinstance(cfg.variant, LearnedSentinel)
    assert cfg.variant.threshold == 1.5
