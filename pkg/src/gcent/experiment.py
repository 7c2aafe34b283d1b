"""Round-based data collection experiments and their baselines.

One experiment = a warmup batch of teleoperated demonstrations, then
repeated rounds of collect / aggregate / retrain / evaluate. Three
collection methods share that skeleton: passive (scripted demos with fixed
action noise), adversarial (clean demos with injected perturbations the
demonstrator must recover from), and the request-driven fleet loop with a
human-correcting operator."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .datastore import (
    EpisodeEnd,
    Header,
    Record,
    StepBoundary,
    TrajectoryStore,
    config_digest,
    extract_policy_trainset,
    extract_sentinel_trainset,
)
from .domain import (
    Actor,
    Frame,
    Mode,
    Score,
    TaskSpec,
    Template,
    mean_score,
    score_episode,
)
from .fleet import DEFAULT_EPISODE_TICK_CAP, FleetConfig, FleetRuntime
from .gridworld import ProgressTracker, init_world, make_task, observe, perturb
from .gridworld import step as world_step
from .operators import OperatorConfig, Strategy
from .policies import (
    PolicyModel,
    noisy_expert_action,
    policy_action,
    train_cloner,
)
from .sentinel import (
    DEFAULT_T_MAX,
    LearnedSentinel,
    OracleSentinel,
    SentinelConfig,
    SentinelModel,
    train_sentinel,
)

WARMUP_ROBOT = "robot0"


@dataclass(frozen=True)
class ExperimentConfig:
    template: Template
    seed: int = 0
    warmup_trajectories: int = 20
    trajectories_per_round: int = 20
    max_rounds: int = 5
    eval_trials: int = 10
    stop_score: float = 0.9
    epsilon_passive: float = 0.1
    cloner_k: int = 5
    n_robots: int = 1
    t_max: int = DEFAULT_T_MAX
    episode_tick_cap: int = DEFAULT_EPISODE_TICK_CAP
    # None = learned detector, retrained every round; an oracle overrides it.
    oracle_sentinel: Optional[OracleSentinel] = None
    learned_threshold: float = 0.0
    # None = stage-dependent schedule (direct below 50% success, rewind above).
    strategy_override: Optional[Strategy] = None
    rewind_depth: Optional[int] = None
    rewind_within_step: bool = False
    operator_latency: tuple[int, int] = (5, 20)
    # Human-gated monitoring during fleet rounds: a watcher that flags a
    # robot after this many no-progress ticks, well before the timeout.
    monitor_lookahead: Optional[float] = None
    adversarial_probability: float = 0.15
    adversarial_magnitude: int = 2

    @property
    def task(self) -> TaskSpec:
        return make_task(self.template)

    def describe(self) -> dict:
        return {
            "template": self.template.value,
            "seed": self.seed,
            "warmup": self.warmup_trajectories,
            "per_round": self.trajectories_per_round,
            "epsilon_passive": self.epsilon_passive,
            "k": self.cloner_k,
        }


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    scores: tuple[Score, ...]


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    trajectories: int
    frames: int  # this round's newly retained training frames
    cumulative_frames: int
    mean_score: float
    std: float
    intervention_rate: float
    scores: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {
            "round": self.round_index,
            "trajectories": self.trajectories,
            "frames": self.cumulative_frames,
            "mean_score": self.mean_score,
            "std": self.std,
            "intervention_rate": self.intervention_rate,
        }


def evaluate(
    policy: PolicyModel,
    task: TaskSpec,
    trials: int = 10,
    seed_base: int = 10_000,
    tick_cap: int = DEFAULT_EPISODE_TICK_CAP,
) -> EvalResult:
    """Score a policy running alone: no sentinel, no operator, ground-truth
    step advancement, fixed per-trial seeds."""
    if trials < 1:
        raise ValueError("need at least one trial")
    scores = []
    for i in range(trials):
        world = init_world(task, seed_base + i)
        tracker = ProgressTracker(task)
        tracker.update(world)
        rng = random.Random(f"eval:{seed_base}:{i}")
        for _ in range(tick_cap):
            if tracker.complete:
                break
            action = policy_action(policy, observe(world), task, tracker.done, rng)
            world = world_step(world, action)
            tracker.update(world)
        scores.append(score_episode(tracker.done, task.n_steps))
    mean, std = mean_score(scores)
    return EvalResult(mean, std, tuple(scores))


# --- demonstration synthesis (warmup, passive, adversarial) -----------------

def _demo_episode(
    task: TaskSpec,
    episode_id: str,
    world_seed: int,
    epsilon: float,
    rng: random.Random,
    tick_cap: int,
    perturb_prob: float = 0.0,
    perturb_magnitude: int = 0,
    perturb_rng: Optional[random.Random] = None,
) -> tuple[list[Record], Score]:
    """One teleoperated demonstration, logged as an intervention episode.

    With a perturbation probability, each step start may see one object
    knocked aside before the demonstrator reacts; recovery actions are
    logged like any other human frames."""
    world = init_world(task, world_seed)
    tracker = ProgressTracker(task)
    tracker.update(world)
    records: list[Record] = []
    at_step_start = True
    for tick in range(tick_cap):
        if tracker.complete:
            break
        if at_step_start and perturb_prob > 0 and perturb_rng is not None:
            if perturb_rng.random() < perturb_prob:
                world = perturb(world, perturb_magnitude, perturb_rng)
                tracker.update(world)
                if tracker.complete:
                    break
        at_step_start = False
        action = noisy_expert_action(world, task, tracker.done, epsilon, rng)
        obs = observe(world)
        world = world_step(world, action)
        records.append(
            Frame(
                tick=tick,
                episode_id=episode_id,
                robot_id=WARMUP_ROBOT,
                step_index=tracker.done,
                observation=obs.features,
                action=action,
                actor=Actor.HUMAN,
                mode=Mode.INTERVENTION,
            )
        )
        newly = tracker.update(world)
        for s in newly:
            records.append(StepBoundary(WARMUP_ROBOT, episode_id, s, tick))
        if newly:
            at_step_start = True
    score = score_episode(tracker.done, task.n_steps)
    records.append(EpisodeEnd(WARMUP_ROBOT, episode_id, score))
    return records, score


def run_warmup(config: ExperimentConfig) -> TrajectoryStore:
    """The seed dataset: warmup_trajectories noisy-expert demonstrations."""
    store = TrajectoryStore()
    store.append(
        Header(
            task_name=config.template.value,
            robot_ids=(WARMUP_ROBOT,),
            digest=config_digest(config.describe()),
        )
    )
    seeds = random.Random(f"warmup:{config.seed}")
    noise = random.Random(f"warmup-noise:{config.seed}")
    for i in range(config.warmup_trajectories):
        records, _ = _demo_episode(
            config.task,
            episode_id=f"warmup-{i:02d}",
            world_seed=seeds.randrange(2**31),
            epsilon=config.epsilon_passive,
            rng=noise,
            tick_cap=config.episode_tick_cap,
        )
        store.extend(records)
    return store


def train_models(
    store: TrajectoryStore, k: int, version: int
) -> tuple[PolicyModel, SentinelModel]:
    """Retrain both learners from one aggregated store."""
    policy = train_cloner(extract_policy_trainset(store), k=k, version=version)
    detector = train_sentinel(extract_sentinel_trainset(store), version=version)
    return policy, detector


def _frame_count(store: TrajectoryStore) -> int:
    """Frames retained for policy training: the round-over-round budget the
    reports track. Autonomous rollout and waiting frames stay in the log
    but cost no demonstrator time and add nothing to the trainset, so
    counting them would overstate every deployment round."""
    return sum(
        1
        for f in store.frames()
        if f.mode is Mode.INTERVENTION and f.actor is Actor.HUMAN
    )


def _round_report(
    config: ExperimentConfig,
    round_index: int,
    new_frames: int,
    cumulative: int,
    result: EvalResult,
    intervention_rate: float,
) -> RoundReport:
    return RoundReport(
        round_index=round_index,
        trajectories=config.trajectories_per_round,
        frames=new_frames,
        cumulative_frames=cumulative,
        mean_score=result.mean,
        std=result.std,
        intervention_rate=intervention_rate,
        scores=tuple(s.as_float for s in result.scores),
    )


def _demo_round(
    store: TrajectoryStore,
    config: ExperimentConfig,
    round_index: int,
    prefix: str,
    epsilon: float,
    perturb_prob: float,
) -> tuple[TrajectoryStore, PolicyModel, SentinelModel, RoundReport]:
    seeds = random.Random(f"{prefix}:{config.seed}:{round_index}")
    noise = random.Random(f"{prefix}-noise:{config.seed}:{round_index}")
    adv = random.Random(f"{prefix}-adv:{config.seed}:{round_index}")
    records: list[Record] = []
    for i in range(config.trajectories_per_round):
        episode, _ = _demo_episode(
            config.task,
            episode_id=f"{prefix}-r{round_index}-{i:02d}",
            world_seed=seeds.randrange(2**31),
            epsilon=epsilon,
            rng=noise,
            tick_cap=config.episode_tick_cap,
            perturb_prob=perturb_prob,
            perturb_magnitude=config.adversarial_magnitude,
            perturb_rng=adv,
        )
        records.extend(episode)
    new_store = store.aggregate(records)
    policy, detector = train_models(new_store, config.cloner_k, new_store.version)
    result = evaluate(
        policy, config.task, config.eval_trials, seed_base=_eval_seed_base(config)
    )
    new_frames = sum(1 for r in records if isinstance(r, Frame))
    report = _round_report(
        config,
        round_index,
        new_frames,
        _frame_count(new_store),
        result,
        intervention_rate=1.0,  # demonstrations are operator time end to end
    )
    return new_store, policy, detector, report


def run_round_passive(
    store: TrajectoryStore, config: ExperimentConfig, round_index: int
) -> tuple[TrajectoryStore, PolicyModel, SentinelModel, RoundReport]:
    return _demo_round(
        store, config, round_index, "passive", config.epsilon_passive, perturb_prob=0.0
    )


def run_round_adversarial(
    store: TrajectoryStore, config: ExperimentConfig, round_index: int
) -> tuple[TrajectoryStore, PolicyModel, SentinelModel, RoundReport]:
    """Clean expert demos with objects knocked around at step starts."""
    return _demo_round(
        store,
        config,
        round_index,
        "adversarial",
        epsilon=0.0,
        perturb_prob=config.adversarial_probability,
    )


def _eval_seed_base(config: ExperimentConfig) -> int:
    return 10_000 + 100 * config.seed


def _pick_strategy(config: ExperimentConfig, last_mean: float) -> Strategy:
    if config.strategy_override is not None:
        return config.strategy_override
    return Strategy.DIRECT if last_mean < 0.5 else Strategy.REWIND


def run_round_gcent(
    store: TrajectoryStore,
    policy: PolicyModel,
    detector: SentinelModel,
    config: ExperimentConfig,
    round_index: int,
    last_mean: float,
) -> tuple[TrajectoryStore, PolicyModel, SentinelModel, RoundReport]:
    """One deployment round: run the fleet with the current policy until the
    round's episode budget completes, aggregate, retrain, evaluate."""
    sentinel_config = SentinelConfig(
        variant=(
            config.oracle_sentinel
            if config.oracle_sentinel is not None
            else LearnedSentinel(detector, threshold=config.learned_threshold)
        ),
        t_max=config.t_max,
    )
    operator = OperatorConfig(
        latency_min=config.operator_latency[0],
        latency_max=config.operator_latency[1],
        strategy=_pick_strategy(config, last_mean),
        rewind_depth=config.rewind_depth,
        rewind_within_step=config.rewind_within_step,
    )
    fleet_config = FleetConfig(
        n_robots=config.n_robots,
        task=config.task,
        policy=policy,
        sentinel=sentinel_config,
        operator=operator,
        max_ticks=config.trajectories_per_round * config.episode_tick_cap * 3,
        episode_tick_cap=config.episode_tick_cap,
        episode_namespace=f"r{round_index}-",
        monitor_lookahead=config.monitor_lookahead,
    )
    runtime = FleetRuntime(fleet_config, seed=config.seed * 101 + round_index)
    while (
        len(runtime.log.episode_scores) < config.trajectories_per_round
        and runtime.clock < fleet_config.max_ticks
    ):
        runtime.tick_once()
    log = runtime.finalize()

    new_records = log.store.records[1:]  # everything but the fleet's own header
    new_store = store.aggregate(new_records)
    new_policy, new_detector = train_models(new_store, config.cloner_k, new_store.version)
    result = evaluate(
        new_policy, config.task, config.eval_trials, seed_base=_eval_seed_base(config)
    )
    cumulative = _frame_count(new_store)
    report = _round_report(
        config,
        round_index,
        new_frames=cumulative - _frame_count(store),
        cumulative=cumulative,
        result=result,
        intervention_rate=log.metrics()["intervention_rate"],
    )
    return new_store, new_policy, new_detector, report


@dataclass
class MethodOutcome:
    method: str
    rounds: list[RoundReport] = field(default_factory=list)
    frames_to_threshold: Optional[int] = None
    store: Optional[TrajectoryStore] = None  # final aggregate, not serialized

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "rounds": [r.to_json() for r in self.rounds],
            "frames_to_threshold": self.frames_to_threshold,
        }


def run_method(
    method: str, config: ExperimentConfig, stop_early: bool = True
) -> MethodOutcome:
    """Warmup, then rounds of one collection method. Stops once the mean
    evaluation score reaches stop_score (unless told to run all rounds)."""
    if method not in ("passive", "adversarial", "gcent"):
        raise ValueError(f"unknown method {method!r}")
    store = run_warmup(config)
    policy, detector = train_models(store, config.cloner_k, version=0)
    warm_eval = evaluate(policy, config.task, config.eval_trials, _eval_seed_base(config))
    outcome = MethodOutcome(method=method)
    warmup_frames = _frame_count(store)
    outcome.rounds.append(
        RoundReport(
            round_index=0,
            trajectories=config.warmup_trajectories,
            frames=warmup_frames,
            cumulative_frames=warmup_frames,
            mean_score=warm_eval.mean,
            std=warm_eval.std,
            intervention_rate=1.0,
            scores=tuple(s.as_float for s in warm_eval.scores),
        )
    )
    if warm_eval.mean >= config.stop_score:
        outcome.frames_to_threshold = warmup_frames
        if stop_early:
            outcome.store = store
            return outcome
    last_mean = warm_eval.mean
    for round_index in range(1, config.max_rounds + 1):
        if method == "passive":
            store, policy, detector, report = run_round_passive(store, config, round_index)
        elif method == "adversarial":
            store, policy, detector, report = run_round_adversarial(
                store, config, round_index
            )
        else:
            store, policy, detector, report = run_round_gcent(
                store, policy, detector, config, round_index, last_mean
            )
        outcome.rounds.append(report)
        last_mean = report.mean_score
        if outcome.frames_to_threshold is None and report.mean_score >= config.stop_score:
            outcome.frames_to_threshold = report.cumulative_frames
            if stop_early:
                break
    outcome.store = store
    return outcome


@dataclass(frozen=True)
class StartPolicy:
    """A cloner of chosen competence plus the demonstrations it was trained
    on; the launching point for a correction-strategy comparison."""

    store: TrajectoryStore
    policy: PolicyModel
    mean_score: float
    n_demos: int


def calibrated_start(
    config: ExperimentConfig,
    target: float,
    candidates: Sequence[int] = (3, 4, 6, 8, 12, 16, 24, 32, 40, 50, 60),
    trials: int = 8,
) -> StartPolicy:
    """Grow a demonstration set until the cloner trained on it evaluates
    closest to the target success rate.

    Candidate sizes share one demonstration stream, so larger candidates
    extend smaller ones. The search stops at the first candidate that
    reaches the target; ties in distance go to the smaller set."""
    if not 0.0 < target < 1.0:
        raise ValueError("target success must be strictly between 0 and 1")
    seeds = random.Random(f"start:{config.seed}")
    noise = random.Random(f"start-noise:{config.seed}")
    header = Header(
        task_name=config.template.value,
        robot_ids=(WARMUP_ROBOT,),
        digest=config_digest({**config.describe(), "start_target": target}),
    )
    store = TrajectoryStore()
    store.append(header)
    produced = 0
    best: Optional[StartPolicy] = None
    for n in candidates:
        while produced < n:
            records, _ = _demo_episode(
                config.task,
                episode_id=f"start-{produced:02d}",
                world_seed=seeds.randrange(2**31),
                epsilon=config.epsilon_passive,
                rng=noise,
                tick_cap=config.episode_tick_cap,
            )
            store.extend(records)
            produced += 1
        policy = train_cloner(extract_policy_trainset(store), k=config.cloner_k, version=0)
        result = evaluate(
            policy, config.task, trials, seed_base=20_000 + 100 * config.seed
        )
        candidate = StartPolicy(
            store=store.copy(), policy=policy, mean_score=result.mean, n_demos=n
        )
        if best is None or abs(result.mean - target) < abs(best.mean_score - target):
            best = candidate
        if result.mean >= target:
            break
    assert best is not None
    return best


def run_strategy_arm(
    config: ExperimentConfig, start: StartPolicy, strategy: Strategy
) -> RoundReport:
    """One monitored collection round from a fixed-competence cloner under a
    forced correction strategy, with a clean oracle detector. Used to compare
    direct takeover against rewind-first correction at different starting
    success levels.

    Rewinds here are scoped to the current step attempt: the watching
    operator scrubs back to where the failing attempt began, not into
    already-completed steps."""
    cfg = replace(
        config,
        strategy_override=strategy,
        oracle_sentinel=OracleSentinel(0.0, 0.0),
        rewind_within_step=True,
        monitor_lookahead=(
            config.monitor_lookahead if config.monitor_lookahead is not None else 12.0
        ),
    )
    _, _, _, report = run_round_gcent(
        start.store,
        start.policy,
        SentinelModel(per_step={}),
        cfg,
        round_index=1,
        last_mean=start.mean_score,
    )
    return report


def compare_methods(config: ExperimentConfig, stop_early: bool = True) -> dict:
    """All three methods from one shared warmup budget; JSON-ready report."""
    methods = [
        run_method("passive", config, stop_early=stop_early),
        run_method("adversarial", config, stop_early=stop_early),
        run_method("gcent", config, stop_early=stop_early),
    ]
    return {
        "task": config.template.value,
        "seed": config.seed,
        "stop_score": config.stop_score,
        "methods": [m.to_json() for m in methods],
    }
