"""
Monte Carlo harnesses for the reporting game, reputation separation,
answer aggregation and anomaly detection.

These run the same engines the scenario loop uses, without a ledger, so they
are cheap enough to repeat over many seeds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

from config import AGGREGATION_MODES, N_FEATURES
from .forecasting import ForecastParams, Forecaster, ZScoreBaseline, calibrate_threshold
from .reputation import ReputationEngine, ReputationParams, TaskFeatures
from .simulation import (
    AgentPolicy,
    ScenarioConfig,
    aggregate_answers,
    confusion_metrics,
    run_scenario,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Reporting game
# ---------------------------------------------------------------------------

@dataclass
class ReportingGameResult:
    seed: int
    rounds: int
    honest_mean_payoff: float
    deviator_mean_payoff: float
    excluded: List[str]

    @property
    def margin(self) -> float:
        return self.honest_mean_payoff - self.deviator_mean_payoff


def _honest_report(truth: float, noise: float, rng: np.random.Generator) -> float:
    return float(np.clip(truth + rng.normal(0.0, noise), 0.0, 1.0))


def _deviant_report(truth: float, bias: float) -> float:
    return float(np.clip(truth + bias, 0.0, 1.0))


def simulate_reporting_game(
    seed: int = 0,
    rounds: int = 1000,
    n_honest: int = 3,
    n_deviators: int = 1,
    params: Optional[ReputationParams] = None,
    noise: float = 0.05,
    bias: float = 0.5,
) -> ReportingGameResult:
    """
    Fixed-role repeated reporting game. Every round all non-excluded players
    report on a fresh subject; deviators shade their report by `bias` and pocket
    the collusion side payment. An excluded player earns nothing afterwards.
    """
    params = params or ReputationParams()
    engine = ReputationEngine(params)
    rng = np.random.default_rng(seed)
    honest = [f"honest-{i}" for i in range(n_honest)]
    deviators = [f"deviator-{i}" for i in range(n_deviators)]
    totals: Dict[str, float] = {p: 0.0 for p in honest + deviators}

    for r in range(rounds):
        truth = float(rng.uniform(0.2, 0.5))
        reports = {p: _honest_report(truth, noise, rng) for p in honest if p not in engine.excluded}
        for p in deviators:
            if p not in engine.excluded:
                reports[p] = _deviant_report(truth, bias)
                totals[p] += params.collusion_gain
        if not reports:
            break
        result = engine.apply_payoffs(engine.collect(f"round-{r}", 'subject', reports))
        for p, delta in result.token_deltas.items():
            totals[p] += delta

    honest_mean = float(np.mean([totals[p] for p in honest])) / rounds
    deviator_mean = float(np.mean([totals[p] for p in deviators])) / rounds
    return ReportingGameResult(seed, rounds, honest_mean, deviator_mean, sorted(engine.excluded))


def _round_payoff(
    report: float,
    others: Sequence[float],
    deviating: bool,
    params: ReputationParams,
) -> float:
    """Payoff of one report against the others' reports, under the consensus rule."""
    values = np.array(list(others) + [report], dtype=np.float64)
    center = float(np.mean(values)) if params.consensus == 'mean' else float(np.median(values))
    flagged = len(values) >= params.quorum and abs(report - center) > params.tolerance
    payoff = -params.dishonest_slash if flagged else params.honest_reward
    return payoff + (params.collusion_gain if deviating else 0)


def best_response_dynamics(
    seed: int = 0,
    rounds: int = 500,
    n_players: int = 10,
    initial_honest_share: float = 0.6,
    revision_rate: float = 0.1,
    mutation_rate: float = 0.01,
    params: Optional[ReputationParams] = None,
    noise: float = 0.05,
    bias: float = 0.5,
) -> pd.DataFrame:
    """
    Population share of honest reporters when, each round, a fraction of
    players switch to whichever strategy would have paid more that round and
    a small fraction mutate at random. Exclusion is off so the population
    size stays fixed.
    """
    params = params or ReputationParams()
    rng = np.random.default_rng(seed)
    honest = np.zeros(n_players, dtype=bool)
    honest[: int(round(initial_honest_share * n_players))] = True
    rng.shuffle(honest)

    rows = [{'round': 0, 'honest_share': float(honest.mean())}]
    for r in range(1, rounds + 1):
        truth = float(rng.uniform(0.2, 0.5))
        truthful = np.array([_honest_report(truth, noise, rng) for _ in range(n_players)])
        reports = np.where(honest, truthful, _deviant_report(truth, bias))

        revising = rng.random(n_players) < revision_rate
        next_honest = honest.copy()
        for i in np.flatnonzero(revising):
            others = np.delete(reports, i)
            pay_honest = _round_payoff(truthful[i], others, False, params)
            pay_deviate = _round_payoff(_deviant_report(truth, bias), others, True, params)
            if pay_honest != pay_deviate:
                next_honest[i] = pay_honest > pay_deviate
        mutating = rng.random(n_players) < mutation_rate
        next_honest[mutating] = rng.random(int(mutating.sum())) < 0.5
        honest = next_honest
        rows.append({'round': r, 'honest_share': float(honest.mean())})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Reputation separation
# ---------------------------------------------------------------------------

def _task_features(policy: AgentPolicy, deadline: int, rng: np.random.Generator) -> TaskFeatures:
    completed = bool(rng.random() < policy.answer_accuracy)
    delay = policy.delay_ticks + int(rng.integers(0, 3))
    return TaskFeatures.from_delay(completed, delay, deadline, policy.resource_level, float(completed))


def reputation_gap_trial(
    seed: int = 0,
    n_tasks: int = 200,
    n_honest: int = 4,
    n_saboteurs: int = 4,
    decay: float = 0.95,
    deadline: int = 10,
) -> float:
    """Mean honest reputation minus mean saboteur reputation after `n_tasks` scored tasks each."""
    engine = ReputationEngine(replace(ReputationParams(), decay=decay))
    rng = np.random.default_rng(seed)
    honest = AgentPolicy.for_kind('honest')
    saboteur = AgentPolicy.for_kind('saboteur')
    agents = [(f"honest-{i}", honest) for i in range(n_honest)] + \
             [(f"saboteur-{i}", saboteur) for i in range(n_saboteurs)]
    for _ in range(n_tasks):
        for agent_id, policy in agents:
            engine.update(agent_id, engine.score(_task_features(policy, deadline, rng)))
    honest_rep = np.mean([engine.reputation(a) for a, p in agents if p is honest])
    saboteur_rep = np.mean([engine.reputation(a) for a, p in agents if p is saboteur])
    return float(honest_rep - saboteur_rep)


def reputation_gap_experiment(seeds: Sequence[int] = range(20), **kwargs) -> pd.DataFrame:
    return pd.DataFrame([{'seed': s, 'gap': reputation_gap_trial(s, **kwargs)} for s in seeds])


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregation_benchmark(
    seed: int = 0,
    n_tasks: int = 200,
    n_honest: int = 5,
    n_adversarial: int = 3,
    k_clusters: int = 2,
    deadline: int = 10,
) -> Dict[str, float]:
    """
    Accuracy of each aggregation mode on binary tasks answered by honest and
    saboteur agents. Reputations are learned online from each agent's task
    score, so weighted voting only uses what was known before the task.
    """
    rng = np.random.default_rng(seed)
    policies = {f"agent-{i:02d}": AgentPolicy.for_kind('honest') for i in range(n_honest)}
    policies.update({f"agent-{n_honest + i:02d}": AgentPolicy.for_kind('saboteur') for i in range(n_adversarial)})
    agent_ids = sorted(policies)
    order = rng.permutation(len(agent_ids))
    shuffled = [agent_ids[i] for i in order]
    clusters = [sorted(shuffled[k::k_clusters]) for k in range(k_clusters)]

    engine = ReputationEngine()
    correct = {mode: 0 for mode in AGGREGATION_MODES}
    for task in range(n_tasks):
        truth = int(rng.integers(2))
        features = {a: _task_features(policies[a], deadline, rng) for a in agent_ids}
        answers = {a: truth if features[a].completion else 1 - truth for a in agent_ids}
        reputations = {a: engine.reputation(a) for a in agent_ids}
        for mode in AGGREGATION_MODES:
            decision = aggregate_answers(answers, reputations, mode,
                                         rng=np.random.default_rng([seed, task]), clusters=clusters)
            correct[mode] += int(decision == truth)
        for a in agent_ids:
            engine.update(a, engine.score(features[a]))
    return {mode: correct[mode] / n_tasks for mode in AGGREGATION_MODES}


def aggregation_experiment(seeds: Sequence[int] = range(20), **kwargs) -> pd.DataFrame:
    rows = [{'seed': s, **aggregation_benchmark(s, **kwargs)} for s in seeds]
    return pd.DataFrame(rows, columns=['seed'] + AGGREGATION_MODES)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

@dataclass
class DetectionFixture:
    train: np.ndarray
    calibration: np.ndarray
    test: np.ndarray
    labels: np.ndarray  # 1 for shifted trajectories


def make_detection_fixture(
    seed: int = 0,
    window: int = 5,
    n_features: int = N_FEATURES,
    n_train: int = 256,
    n_calibration: int = 100,
    n_test_honest: int = 200,
    n_test_anomalous: int = 50,
    sigma: float = 0.05,
    shift: float = 3.0,
) -> DetectionFixture:
    """
    Honest windows scatter around per-feature means in [0.3, 0.7]; anomalous
    windows have every feature moved by `shift` standard deviations in a
    random direction.
    """
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.3, 0.7, size=n_features)

    def honest(n: int) -> np.ndarray:
        return means + rng.normal(0.0, sigma, size=(n, window, n_features))

    signs = rng.choice([-1.0, 1.0], size=(n_test_anomalous, 1, n_features))
    anomalous = honest(n_test_anomalous) + signs * shift * sigma
    test = np.concatenate([honest(n_test_honest), anomalous])
    labels = np.concatenate([np.zeros(n_test_honest, dtype=int), np.ones(n_test_anomalous, dtype=int)])
    return DetectionFixture(honest(n_train), honest(n_calibration), test, labels)


@dataclass
class DetectionBenchmark:
    seed: int
    roc_auc: float
    precision: float
    recall: float
    f1: float
    baseline_roc_auc: float
    baseline_f1: float
    threshold: float


DETECTION_FIXTURE_PARAMS = {'T': 100, 'schedule': 'cosine', 'epochs': 200, 'window': 5}


def detection_benchmark(
    seed: int = 0,
    params: Optional[ForecastParams] = None,
    fixture: Optional[DetectionFixture] = None,
) -> DetectionBenchmark:
    """Diffusion forecaster against the z-score baseline on one synthetic fixture."""
    if params is None:
        params = ForecastParams.from_dict({**DETECTION_FIXTURE_PARAMS, 'seed': seed})
    fixture = fixture or make_detection_fixture(seed, window=params.window)

    forecaster = Forecaster(params).fit(fixture.train, fixture.calibration)
    scores = forecaster.score(fixture.test, seed=seed)
    predicted = scores > forecaster.calibration.threshold
    metrics = confusion_metrics(fixture.labels.astype(bool), predicted)

    baseline = ZScoreBaseline().fit(fixture.train)
    baseline_threshold = calibrate_threshold(baseline.score(fixture.calibration), params.percentile).threshold
    baseline_scores = baseline.score(fixture.test)
    baseline_metrics = confusion_metrics(fixture.labels.astype(bool), baseline_scores > baseline_threshold)

    result = DetectionBenchmark(
        seed=seed,
        roc_auc=float(roc_auc_score(fixture.labels, scores)),
        precision=metrics.precision,
        recall=metrics.recall,
        f1=metrics.f1,
        baseline_roc_auc=float(roc_auc_score(fixture.labels, baseline_scores)),
        baseline_f1=baseline_metrics.f1,
        threshold=forecaster.calibration.threshold,
    )
    logger.info(f"[detection seed={seed}] auc={result.roc_auc:.3f} f1={result.f1:.3f} "
                f"baseline_f1={result.baseline_f1:.3f}")
    return result


def detection_sweep(
    population_sizes: Sequence[int] = (4, 8, 16),
    seed: int = 0,
    n_epochs: int = 40,
    overrides: Optional[Dict[str, object]] = None,
) -> pd.DataFrame:
    """Scenario-level detection metrics as the number of collaborating agents grows."""
    rows = []
    for n in population_sizes:
        saboteurs = max(1, n // 4)
        doc = {
            'seed': seed,
            'n_agents': n,
            'n_epochs': n_epochs,
            'coalition_size': min(4, n),
            'policy_mix': {'honest': n - saboteurs, 'saboteur': saboteurs},
            **(overrides or {}),
        }
        report = run_scenario(ScenarioConfig.from_dict(doc))
        rows.append({
            'n_agents': n,
            'precision': report.metrics.precision,
            'recall': report.metrics.recall,
            'f1': report.metrics.f1,
            'roc_auc': report.roc_auc,
        })
    return pd.DataFrame(rows, columns=['n_agents', 'precision', 'recall', 'f1', 'roc_auc'])
