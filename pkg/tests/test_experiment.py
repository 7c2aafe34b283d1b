"""Round loops: warmup, the three collection methods, calibrated starts,
and the strategy arms."""

from dataclasses import replace

import pytest

from gcent.datastore import (
    EpisodeEnd,
    Header,
    config_digest,
    continuity_violations,
    extract_policy_trainset,
    record_to_obj,
    validate,
)
from gcent.domain import Actor, Frame, Mode, Template
from gcent.experiment import (
    ExperimentConfig,
    RoundReport,
    StartPolicy,
    calibrated_start,
    compare_methods,
    evaluate,
    run_method,
    run_round_adversarial,
    run_round_gcent,
    run_round_passive,
    run_strategy_arm,
    run_warmup,
    train_models,
)
from gcent.operators import Strategy
from gcent.policies import noisy_expert, scripted_expert, train_cloner
from gcent.sentinel import OracleSentinel, SentinelModel


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        template=Template.STACKING,
        seed=0,
        warmup_trajectories=4,
        trajectories_per_round=2,
        max_rounds=1,
        eval_trials=4,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# --- evaluation -------------------------------------------------------------

def test_evaluate_expert_is_perfect():
    result = evaluate(scripted_expert(), tiny_config().task, trials=6)
    assert result.mean == 1.0 and result.std == 0.0
    assert len(result.scores) == 6


def test_evaluate_random_policy_is_poor():
    result = evaluate(noisy_expert(1.0), tiny_config().task, trials=10)
    assert result.mean < 0.2


def test_evaluate_is_deterministic():
    policy = noisy_expert(0.5)
    a = evaluate(policy, tiny_config().task, trials=8, seed_base=77)
    b = evaluate(policy, tiny_config().task, trials=8, seed_base=77)
    assert a == b


def test_evaluate_rejects_zero_trials():
    with pytest.raises(ValueError):
        evaluate(scripted_expert(), tiny_config().task, trials=0)


# --- warmup -----------------------------------------------------------------

def test_warmup_shape_and_labels():
    config = tiny_config()
    store = run_warmup(config)
    assert isinstance(store.records[0], Header)
    ends = [r for r in store.records if isinstance(r, EpisodeEnd)]
    assert len(ends) == config.warmup_trajectories
    for frame in store.frames():
        assert frame.actor is Actor.HUMAN and frame.mode is Mode.INTERVENTION
    assert store.version == 0
    assert validate(store).ok


def test_warmup_is_seed_deterministic():
    a = run_warmup(tiny_config())
    b = run_warmup(tiny_config())
    assert [record_to_obj(r) for r in a.records] == [record_to_obj(r) for r in b.records]
    c = run_warmup(tiny_config(seed=1))
    assert [record_to_obj(r) for r in a.records] != [record_to_obj(r) for r in c.records]


def test_clean_warmup_scores_are_all_perfect():
    store = run_warmup(tiny_config(epsilon_passive=0.0))
    for record in store.records:
        if isinstance(record, EpisodeEnd):
            assert record.score.as_float == 1.0


def test_train_models_reads_only_human_intervention_frames():
    store = run_warmup(tiny_config())
    policy, detector = train_models(store, k=3, version=0)
    assert policy.n_pairs == len(extract_policy_trainset(store))
    assert policy.k == 3 and policy.version == 0
    assert detector.version == 0


# --- demo rounds ------------------------------------------------------------

def test_passive_round_grows_store_and_reports_delta():
    config = tiny_config()
    store = run_warmup(config)
    new_store, policy, detector, report = run_round_passive(store, config, 1)
    assert new_store.version == store.version + 1
    ends = [r for r in new_store.records if isinstance(r, EpisodeEnd)]
    assert len(ends) == config.warmup_trajectories + config.trajectories_per_round
    assert report.round_index == 1
    assert report.trajectories == config.trajectories_per_round
    # demonstrations are operator time end to end
    assert report.intervention_rate == 1.0
    assert report.cumulative_frames == report.frames + sum(
        1 for _ in store.frames()
    )
    assert len(store.records) < len(new_store.records)  # input untouched


def test_adversarial_round_with_no_perturbation_is_clean_expert():
    config = tiny_config(epsilon_passive=0.0, adversarial_probability=0.0)
    store = run_warmup(config)
    new_store, _, _, report = run_round_adversarial(store, config, 1)
    round_records = new_store.records[len(store.records):]
    for r in round_records:
        if isinstance(r, EpisodeEnd):
            assert r.score.as_float == 1.0
    assert not continuity_violations(new_store)


def test_adversarial_round_perturbations_are_detectable_but_valid():
    config = tiny_config(
        epsilon_passive=0.0,
        adversarial_probability=1.0,
        adversarial_magnitude=2,
        trajectories_per_round=3,
    )
    store = run_warmup(config)
    new_store, _, _, report = run_round_adversarial(store, config, 1)
    assert validate(new_store).ok
    # warmup episodes are clean, so any teleports come from this round
    assert continuity_violations(new_store)
    # the demonstrator recovers: knocked-about episodes still finish
    round_records = new_store.records[len(store.records):]
    scores = [r.score.as_float for r in round_records if isinstance(r, EpisodeEnd)]
    assert scores and all(s == 1.0 for s in scores)


# --- the request-driven round -----------------------------------------------

def test_gcent_round_with_perfect_policy_needs_no_help():
    config = tiny_config(oracle_sentinel=OracleSentinel(0.0, 0.0))
    store = run_warmup(config)
    new_store, new_policy, _, report = run_round_gcent(
        store, scripted_expert(), SentinelModel(per_step={}), config, 1, last_mean=1.0
    )
    assert report.intervention_rate == 0.0
    assert report.frames == 0  # nothing new worth training on
    # the refreshed cloner saw no new pairs either
    assert new_policy.n_pairs == len(extract_policy_trainset(store))
    assert validate(new_store).ok


def test_gcent_round_with_weak_cloner_collects_corrections():
    config = tiny_config(
        oracle_sentinel=OracleSentinel(0.0, 0.0), monitor_lookahead=12.0
    )
    store = run_warmup(replace(config, warmup_trajectories=2))
    policy, detector = train_models(store, config.cloner_k, 0)
    new_store, new_policy, _, report = run_round_gcent(
        store, policy, detector, config, 1, last_mean=0.1
    )
    assert report.frames > 0
    assert 0.0 < report.intervention_rate < 1.0
    assert new_policy.n_pairs > policy.n_pairs
    assert validate(new_store).ok


# --- multi-round drivers ----------------------------------------------------

def test_run_method_rejects_unknown_method():
    with pytest.raises(ValueError):
        run_method("osmosis", tiny_config())


def test_run_method_round_structure():
    config = tiny_config(max_rounds=2, stop_score=2.0)  # unreachable: run all
    outcome = run_method("passive", config, stop_early=False)
    assert [r.round_index for r in outcome.rounds] == [0, 1, 2]
    cumulative = [r.cumulative_frames for r in outcome.rounds]
    assert cumulative == sorted(cumulative)
    assert outcome.frames_to_threshold is None
    assert outcome.store is not None


def test_run_method_stops_at_threshold():
    config = tiny_config(epsilon_passive=0.0, stop_score=0.05, max_rounds=3)
    outcome = run_method("passive", config)
    assert outcome.frames_to_threshold is not None
    assert len(outcome.rounds) < config.max_rounds + 1  # budget not exhausted
    assert outcome.rounds[-1].mean_score >= config.stop_score
    for report in outcome.rounds[:-1]:
        assert report.mean_score < config.stop_score
    assert outcome.frames_to_threshold == outcome.rounds[-1].cumulative_frames


def test_compare_methods_report_schema():
    config = tiny_config(max_rounds=1, eval_trials=2)
    report = compare_methods(config, stop_early=True)
    assert report["task"] == "stacking" and report["seed"] == 0
    names = [m["method"] for m in report["methods"]]
    assert names == ["passive", "adversarial", "gcent"]
    for m in report["methods"]:
        for r in m["rounds"]:
            assert {"round", "trajectories", "frames", "mean_score", "std",
                    "intervention_rate"} <= set(r)


# --- calibrated starts and the strategy arms --------------------------------

def test_calibrated_start_target_validation():
    with pytest.raises(ValueError):
        calibrated_start(tiny_config(), 0.0)
    with pytest.raises(ValueError):
        calibrated_start(tiny_config(), 1.0)


@pytest.mark.slow
def test_calibrated_start_is_reproducible_and_scored_honestly():
    config = ExperimentConfig(template=Template.STACKING, seed=0)
    start = calibrated_start(config, 0.2, trials=8)
    ends = [r for r in start.store.records if isinstance(r, EpisodeEnd)]
    assert len(ends) == start.n_demos
    again = evaluate(start.policy, config.task, trials=8, seed_base=20_000)
    assert again.mean == start.mean_score
    assert calibrated_start(config, 0.2, trials=8).mean_score == start.mean_score


@pytest.mark.slow
def test_strategy_arm_reports_one_monitored_round():
    config = ExperimentConfig(
        template=Template.STACKING,
        seed=0,
        trajectories_per_round=3,
        eval_trials=4,
    )
    start = calibrated_start(config, 0.2, trials=4)
    direct = run_strategy_arm(config, start, Strategy.DIRECT)
    rewind = run_strategy_arm(config, start, Strategy.REWIND)
    for report in (direct, rewind):
        assert isinstance(report, RoundReport)
        assert report.round_index == 1
        assert report.trajectories == 3
        assert report.frames > 0  # a weak start always needs correcting
        assert 0.0 < report.intervention_rate <= 1.0
    # the strategies actually collect different data
    assert (direct.frames, direct.mean_score) != (rewind.frames, rewind.mean_score)


def test_config_digest_tracks_experiment_identity():
    a = config_digest(tiny_config().describe())
    b = config_digest(tiny_config(seed=3).describe())
    assert a != b and len(a) == 16
