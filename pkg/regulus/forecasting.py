"""
Behavior forecasting: ledger histories -> per-agent (W, 6) trajectories ->
diffusion anomaly scores -> calibrated deviation probabilities -> alerts that
the arbitration contract turns into countermeasures.

Every feature is derived from ledger records only:

- task_completion_rate: completed share of the agent's cooperation_outcome
  records (EMA-smoothed; epochs without outcomes carry the smoothed value).
- mean_response_latency_normalized: (completion - assigned) over
  latency_scale x (deadline - assigned), clamped to [0, 1] (EMA-smoothed).
- interaction_frequency_normalized: records signed by the agent over the
  busiest agent's count in the same epoch.
- stake_delta_normalized: 0.5 + net token transfer / (2 x stake_scale), clamped.
- report_deviation: mean |report - consensus| over report rounds the agent
  reported in.
- coalition_co_occurrence: share of the agent's coalitions in the epoch that
  include its modal partner over the window.
"""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from config import (
    ALERT_ACTIONS,
    CALIBRATION_SEED_BASE,
    CONTRACT_ID,
    FORECASTING_DEFAULTS,
    MIN_CALIBRATION_SCORES,
    N_FEATURES,
)
from .arbitration import RULES, SINK, POOL
from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    TrainingConfig,
    anomaly_scores,
    build_schedule,
    train_denoiser,
)
from .errors import EmptyWindow, InsufficientCalibrationData, InvalidRange, NotCalibrated, UnknownAgent
from .ledger import Ledger, RecordKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastParams:
    enabled: bool = FORECASTING_DEFAULTS['enabled']
    window: int = FORECASTING_DEFAULTS['window']
    schedule: str = FORECASTING_DEFAULTS['schedule']
    T: int = FORECASTING_DEFAULTS['T']
    beta_min: float = FORECASTING_DEFAULTS['beta_min']
    beta_max: float = FORECASTING_DEFAULTS['beta_max']
    ema_factor: float = FORECASTING_DEFAULTS['ema_factor']
    t_star: Optional[int] = FORECASTING_DEFAULTS['t_star']
    K: int = FORECASTING_DEFAULTS['K']
    percentile: float = FORECASTING_DEFAULTS['percentile']
    calibration_draws: int = FORECASTING_DEFAULTS['calibration_draws']
    cutpoints: tuple = tuple(FORECASTING_DEFAULTS['cutpoints'])
    stake_scale: float = FORECASTING_DEFAULTS['stake_scale']
    latency_scale: float = FORECASTING_DEFAULTS['latency_scale']
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @classmethod
    def from_dict(cls, block: Mapping[str, object]) -> "ForecastParams":
        merged = {**FORECASTING_DEFAULTS, **block}
        return cls(
            enabled=bool(merged['enabled']),
            window=int(merged['window']),
            schedule=str(merged['schedule']),
            T=int(merged['T']),
            beta_min=float(merged['beta_min']),
            beta_max=float(merged['beta_max']),
            ema_factor=float(merged['ema_factor']),
            t_star=None if merged['t_star'] is None else int(merged['t_star']),
            K=int(merged['K']),
            percentile=float(merged['percentile']),
            calibration_draws=int(merged['calibration_draws']),
            cutpoints=tuple(float(c) for c in merged['cutpoints']),
            stake_scale=float(merged['stake_scale']),
            latency_scale=float(merged['latency_scale']),
            training=TrainingConfig.from_dict(merged),
        )

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule, self.T, self.beta_min, self.beta_max)


@dataclass
class BehaviorTrajectory:
    agent_id: str
    window_start_epoch: int
    x: np.ndarray

    @property
    def end_epoch(self) -> int:
        return self.window_start_epoch + len(self.x) - 1


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


@dataclass
class _EpochStats:
    records: Dict[str, int] = field(default_factory=Counter)
    outcomes: Dict[str, List[float]] = field(default_factory=lambda: defaultdict(list))
    latencies: Dict[str, List[float]] = field(default_factory=lambda: defaultdict(list))
    token_net: Dict[str, int] = field(default_factory=Counter)
    deviations: Dict[str, List[float]] = field(default_factory=lambda: defaultdict(list))
    coalitions: List[List[str]] = field(default_factory=list)


def _collect_stats(ledger: Ledger, lo: int, hi: int, latency_scale: float) -> Dict[int, _EpochStats]:
    stats: Dict[int, _EpochStats] = defaultdict(_EpochStats)
    for record in ledger.query(epoch_range=(lo, hi)):
        s = stats[record.epoch]
        fields = record.fields
        if record.agent_id != CONTRACT_ID:
            s.records[record.agent_id] += 1
            if record.kind == RecordKind.COOPERATION_OUTCOME:
                s.outcomes[record.agent_id].append(1.0 if fields.get('completed') else 0.0)
                assigned = fields.get('assigned_tick', 0)
                allowed = fields.get('deadline_tick', assigned) - assigned
                elapsed = fields.get('completion_tick', assigned) - assigned
                latency = _clamp01(elapsed / (latency_scale * allowed)) if allowed > 0 else 1.0
                s.latencies[record.agent_id].append(latency)
            continue

        event = fields.get('event')
        if record.kind == RecordKind.COALITION_EVENT:
            s.coalitions.append(list(fields.get('members', [])))
        elif event == 'token_transfer':
            amount = int(fields['amount'])
            if fields['from'] not in (SINK, POOL):
                s.token_net[fields['from']] -= amount
            if fields['to'] not in (SINK, POOL):
                s.token_net[fields['to']] += amount
        elif event == 'report_round':
            consensus = float(fields['consensus'])
            for reporter, value in fields['reports'].items():
                s.deviations[reporter].append(abs(float(value) - consensus))
    return stats


def _modal_partner(agent_id: str, coalitions: Iterable[List[str]]) -> Optional[str]:
    counts: Counter = Counter()
    for members in coalitions:
        if agent_id in members:
            counts.update(m for m in members if m != agent_id)
    if not counts:
        return None
    best = max(counts.values())
    return min(m for m, c in counts.items() if c == best)


def _trajectory(
    agent_id: str,
    epochs: List[int],
    stats: Mapping[int, _EpochStats],
    params: ForecastParams,
) -> BehaviorTrajectory:
    window_coalitions = [m for e in epochs if e in stats for m in stats[e].coalitions]
    partner = _modal_partner(agent_id, window_coalitions)
    x = np.zeros((len(epochs), N_FEATURES), dtype=np.float64)
    smoothed: List[Optional[float]] = [None, None]
    lam = params.ema_factor

    for row, epoch in enumerate(epochs):
        s = stats.get(epoch)
        if s is None or s.records.get(agent_id, 0) == 0:
            smoothed = [lam * v if v is not None else None for v in smoothed]
            continue

        raw = [
            float(np.mean(s.outcomes[agent_id])) if s.outcomes.get(agent_id) else None,
            float(np.mean(s.latencies[agent_id])) if s.latencies.get(agent_id) else None,
        ]
        for i, value in enumerate(raw):
            if smoothed[i] is None:
                smoothed[i] = value if value is not None else 0.0
            elif value is not None:
                smoothed[i] = lam * smoothed[i] + (1.0 - lam) * value

        busiest = max(s.records.values())
        own = [m for m in s.coalitions if agent_id in m]
        shared = sum(1 for m in own if partner in m) if partner else 0
        x[row] = [
            smoothed[0],
            smoothed[1],
            s.records[agent_id] / busiest,
            _clamp01(0.5 + s.token_net.get(agent_id, 0) / (2.0 * params.stake_scale)),
            float(np.mean(s.deviations[agent_id])) if s.deviations.get(agent_id) else 0.0,
            shared / len(own) if own else 0.0,
        ]
    return BehaviorTrajectory(agent_id, epochs[0], x)


def featurize_population(
    ledger: Ledger,
    agent_ids: Sequence[str],
    window: int,
    epoch: int,
    params: Optional[ForecastParams] = None,
) -> Dict[str, BehaviorTrajectory]:
    """Trajectories ending at `epoch` for every agent with records in the window; one ledger pass."""
    params = params or ForecastParams()
    epochs = list(range(epoch - window + 1, epoch + 1))
    stats = _collect_stats(ledger, epochs[0], epoch, params.latency_scale)
    out: Dict[str, BehaviorTrajectory] = {}
    for agent_id in agent_ids:
        if any(stats[e].records.get(agent_id, 0) for e in epochs if e in stats):
            out[agent_id] = _trajectory(agent_id, epochs, stats, params)
    return out


def featurize(
    agent_id: str,
    ledger: Ledger,
    window: int,
    epoch: int,
    params: Optional[ForecastParams] = None,
) -> BehaviorTrajectory:
    if ledger.public_key(agent_id) is None:
        raise UnknownAgent(f"Agent {agent_id} has no identity on the ledger")
    trajectories = featurize_population(ledger, [agent_id], window, epoch, params)
    if agent_id not in trajectories:
        raise EmptyWindow(f"{agent_id} has no records in epochs [{epoch - window + 1}, {epoch}]")
    return trajectories[agent_id]


# ---------------------------------------------------------------------------
# Calibration and alerts
# ---------------------------------------------------------------------------

@dataclass
class Calibration:
    honest_scores: np.ndarray  # sorted
    percentile: float
    threshold: float

    def deviation_probability(self, score: float, population: int = 1) -> float:
        """
        Interpolated empirical CDF of score among the honest calibration scores.

        The CDF is 0 below the smallest score, i/n at the i-th order statistic,
        linear in between and 1 from the largest score up. With population > 1
        the value is raised to that power: the probability that score exceeds
        the largest of that many honest scores, which keeps the alert bands a
        per-epoch rate when a whole population is scored at once.
        """
        if population < 1:
            raise InvalidRange(f"population must be >= 1, got {population}")
        values, counts = np.unique(self.honest_scores, return_counts=True)
        cdf = np.cumsum(counts) / len(self.honest_scores)
        return float(np.interp(score, values, cdf, left=0.0, right=1.0)) ** population


def calibrate_threshold(honest_scores: Sequence[float], percentile: float = FORECASTING_DEFAULTS['percentile']) -> Calibration:
    scores = np.sort(np.asarray(honest_scores, dtype=np.float64))
    if len(scores) < MIN_CALIBRATION_SCORES:
        raise InsufficientCalibrationData(
            f"Need at least {MIN_CALIBRATION_SCORES} honest scores, got {len(scores)}")
    rank = max(1, math.ceil(percentile / 100.0 * len(scores)))
    return Calibration(scores, percentile, float(scores[rank - 1]))


@dataclass
class Alert:
    agent_id: str
    epoch: int
    anomaly_score: float
    deviation_probability: float
    action: str
    record_id: Optional[bytes] = None
    dispute_id: Optional[str] = None


def alert_action(probability: float, cutpoints: Sequence[float] = FORECASTING_DEFAULTS['cutpoints']) -> Optional[str]:
    raise_at, restrict_at, escalate_at = cutpoints
    raise_alert, restrict, escalate = ALERT_ACTIONS
    if probability >= escalate_at:
        return escalate
    if probability >= restrict_at:
        return restrict
    if probability >= raise_at:
        return raise_alert
    return None


def _infer_claim(contract, agent_id: str, evidence) -> str:
    account = contract.account(agent_id)
    for claim_kind, rule in RULES.items():
        if rule(account, evidence):
            return claim_kind
    return 'contradiction'


def forecast_alerts(
    scores: Mapping[str, float],
    calibration: Optional[Calibration],
    cutpoints: Sequence[float] = FORECASTING_DEFAULTS['cutpoints'],
    epoch: int = 0,
    contract=None,
    population: int = 1,
) -> List[Alert]:
    """
    Map per-agent scores onto alert bands; with a contract, apply the
    countermeasure and anchor the alert on the ledger.

    population is the number of agents scored together in this epoch; see
    Calibration.deviation_probability.
    """
    if calibration is None:
        raise NotCalibrated("forecast_alerts needs a calibrated threshold")

    alerts: List[Alert] = []
    for agent_id in sorted(scores):
        score = float(scores[agent_id])
        probability = calibration.deviation_probability(score, population)
        action = alert_action(probability, cutpoints)
        if action is None:
            continue
        alert = Alert(agent_id, epoch, score, probability, action)
        if contract is not None:
            if action == 'restrict_participation':
                contract.restrict(agent_id, 1, reason='forecast_alert')
            elif action == 'escalate_to_arbitration':
                evidence = contract.ledger.query(agent_id=agent_id, epoch_range=(epoch, epoch))
                claim = _infer_claim(contract, agent_id, evidence)
                dispute = contract.open_dispute(CONTRACT_ID, agent_id, claim, [r.record_id for r in evidence])
                alert.dispute_id = dispute.dispute_id
            alert.record_id = contract.record_event('forecast_alert', {
                'agent_id': agent_id,
                'epoch': epoch,
                'anomaly_score': score,
                'deviation_probability': probability,
                'action': action,
                'dispute_id': alert.dispute_id,
            })
        logger.info(f"[{agent_id}] {action} at epoch {epoch} (p={probability:.4f}, score={score:.6f})")
        alerts.append(alert)
    return alerts


# ---------------------------------------------------------------------------
# Detectors
# ---------------------------------------------------------------------------

class ZScoreBaseline:
    """Per-coordinate z-score detector; score is the mean squared z."""

    def __init__(self):
        self.mean: Optional[np.ndarray] = None
        self.std: Optional[np.ndarray] = None

    def fit(self, trajectories: np.ndarray) -> "ZScoreBaseline":
        data = np.asarray(trajectories, dtype=np.float64)
        self.mean = data.mean(axis=0)
        self.std = np.maximum(data.std(axis=0), 1e-6)
        return self

    def score(self, trajectories: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise NotCalibrated("ZScoreBaseline.fit must run before score")
        data = np.asarray(trajectories, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        z = (data - self.mean) / self.std
        return (z ** 2).mean(axis=(1, 2))


class Forecaster:
    """Trained denoiser plus its schedule and honest-score calibration."""

    def __init__(self, params: Optional[ForecastParams] = None):
        self.params = params or ForecastParams()
        self.schedule = self.params.build_schedule()
        self.model: Optional[DenoiserModel] = None
        self.calibration: Optional[Calibration] = None
        self.losses: List[float] = []

    @property
    def ready(self) -> bool:
        return self.model is not None and self.calibration is not None

    def fit(self, train: np.ndarray, calibration: np.ndarray, progress: bool = False) -> "Forecaster":
        result = train_denoiser(train, self.schedule, self.params.training, progress=progress)
        self.model, self.losses = result.model, result.losses
        self.calibrate(calibration)
        return self

    def calibrate(self, honest: np.ndarray) -> Calibration:
        """
        Calibrate on honest windows, keeping each window's largest score over
        calibration_draws independent noise seeds.
        """
        n_draws = max(1, self.params.calibration_draws)
        draws = [self.score(honest, seed=CALIBRATION_SEED_BASE + r) for r in range(n_draws)]
        envelope = np.max(np.stack(draws), axis=0)
        self.calibration = calibrate_threshold(envelope, self.params.percentile)
        logger.info(f"[forecast] calibrated on {len(honest)} windows x {len(draws)} draws, "
                    f"threshold {self.calibration.threshold:.6f}")
        return self.calibration

    def score(self, trajectories: np.ndarray, seed: int = 0) -> np.ndarray:
        if self.model is None:
            raise NotCalibrated("Forecaster has no trained model")
        return anomaly_scores(self.model, trajectories, self.schedule, self.params.t_star, self.params.K, seed)

    def alerts(self, scores: Mapping[str, float], epoch: int, contract=None) -> List[Alert]:
        return forecast_alerts(scores, self.calibration, self.params.cutpoints, epoch, contract,
                               population=len(scores))

