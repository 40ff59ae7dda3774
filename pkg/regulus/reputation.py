"""
Dynamic trust scoring: context-weighted task scores, Beta-posterior updating
with temporal decay, and the reporting game that rewards honest feedback.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Set

import numpy as np
import pandas as pd

from config import REPUTATION_DEFAULTS, TASK_FEATURE_NAMES, WEIGHT_TOLERANCE
from .errors import (
    DecayOutOfRange,
    FeatureOutOfRange,
    NoReports,
    ReportOutOfRange,
    ScoreOutOfRange,
    WeightsNotNormalized,
)

logger = logging.getLogger(__name__)


def _clamp01(value: float) -> float:
    return float(min(1.0, max(0.0, value)))


@dataclass(frozen=True)
class TaskFeatures:
    completion: float
    timeliness: float
    resource_contribution: float
    peer_feedback: float

    def __post_init__(self):
        if self.completion not in (0, 1):
            raise FeatureOutOfRange(f"completion must be 0 or 1, got {self.completion}")
        for name in TASK_FEATURE_NAMES[1:]:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise FeatureOutOfRange(f"{name}={value} outside [0, 1]")

    @classmethod
    def from_delay(
        cls,
        completed: bool,
        delay: float,
        deadline: float,
        resource_contribution: float,
        peer_feedback: float,
    ) -> "TaskFeatures":
        timeliness = _clamp01(1.0 - delay / deadline) if deadline > 0 else float(delay <= 0)
        return cls(float(bool(completed)), timeliness, _clamp01(resource_contribution), _clamp01(peer_feedback))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in TASK_FEATURE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class ContextWeights:
    context_id: str
    weights: tuple

    @classmethod
    def uniform(cls, context_id: str = 'default') -> "ContextWeights":
        return cls(context_id, (0.25, 0.25, 0.25, 0.25))

    def validate(self) -> "ContextWeights":
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(TASK_FEATURE_NAMES),) or np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise WeightsNotNormalized(
                f"Context {self.context_id!r} weights {list(self.weights)} must be 4 non-negative values summing to 1")
        return self


@dataclass(frozen=True)
class ReputationProfile:
    agent_id: str
    alpha: float = 1.0
    beta: float = 1.0
    last_update_epoch: int = -1

    @property
    def reputation(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def evidence_mass(self) -> float:
        return self.alpha + self.beta


@dataclass
class ReportRound:
    task_id: str
    subject_agent: str
    reports: Dict[str, float]
    flags: Set[str]
    consensus: float


@dataclass
class PayoffResult:
    token_deltas: Dict[str, int]
    profiles: Dict[str, ReputationProfile]
    excluded: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ReputationParams:
    decay: float = REPUTATION_DEFAULTS['decay']
    prior_alpha: float = REPUTATION_DEFAULTS['prior_alpha']
    prior_beta: float = REPUTATION_DEFAULTS['prior_beta']
    tolerance: float = REPUTATION_DEFAULTS['tolerance']
    quorum: int = REPUTATION_DEFAULTS['quorum']
    consensus: str = REPUTATION_DEFAULTS['consensus']
    honest_reward: int = REPUTATION_DEFAULTS['honest_reward']
    dishonest_slash: int = REPUTATION_DEFAULTS['dishonest_slash']
    strike_limit: int = REPUTATION_DEFAULTS['strike_limit']
    collusion_gain: int = REPUTATION_DEFAULTS['collusion_gain']
    contexts: Mapping[str, Sequence[float]] = field(
        default_factory=lambda: dict(REPUTATION_DEFAULTS['contexts']))

    @classmethod
    def from_dict(cls, block: Mapping[str, object]) -> "ReputationParams":
        merged = {**REPUTATION_DEFAULTS, **block}
        contexts = {**REPUTATION_DEFAULTS['contexts'], **dict(merged['contexts'])}
        params = cls(
            decay=float(merged['decay']),
            prior_alpha=float(merged['prior_alpha']),
            prior_beta=float(merged['prior_beta']),
            tolerance=float(merged['tolerance']),
            quorum=int(merged['quorum']),
            consensus=str(merged['consensus']),
            honest_reward=int(merged['honest_reward']),
            dishonest_slash=int(merged['dishonest_slash']),
            strike_limit=int(merged['strike_limit']),
            collusion_gain=int(merged['collusion_gain']),
            contexts={k: tuple(v) for k, v in contexts.items()},
        )
        for context_id, weights in params.contexts.items():
            ContextWeights(context_id, tuple(weights)).validate()
        return params


# ---------------------------------------------------------------------------
# Pure scoring core
# ---------------------------------------------------------------------------

def score_task(features: TaskFeatures, weights: ContextWeights) -> float:
    """Weighted sum of the four task features."""
    w = np.asarray(weights.validate().weights, dtype=np.float64)
    return _clamp01(float(np.dot(w, features.as_array())))


def update_posterior(
    profile: ReputationProfile,
    score: float,
    decay: float,
    epoch: Optional[int] = None,
) -> ReputationProfile:
    if not 0.0 <= score <= 1.0:
        raise ScoreOutOfRange(f"score {score} outside [0, 1]")
    if not 0.0 < decay <= 1.0:
        raise DecayOutOfRange(f"decay {decay} outside (0, 1]")
    return replace(
        profile,
        alpha=decay * profile.alpha + score,
        beta=decay * profile.beta + (1.0 - score),
        last_update_epoch=profile.last_update_epoch if epoch is None else epoch,
    )


def reputation(profile: ReputationProfile) -> float:
    return profile.reputation


def collect_reports(
    task_id: str,
    subject: str,
    reports: Mapping[str, float],
    tolerance: float = REPUTATION_DEFAULTS['tolerance'],
    quorum: int = REPUTATION_DEFAULTS['quorum'],
    consensus: str = REPUTATION_DEFAULTS['consensus'],
) -> ReportRound:
    """Consensus over peer reports; outliers are flagged only at or above quorum."""
    if not reports:
        raise NoReports(f"No reports for {subject} on task {task_id}")
    for reporter, value in reports.items():
        if not 0.0 <= value <= 1.0:
            raise ReportOutOfRange(f"{reporter} reported {value} outside [0, 1]")

    values = np.array(list(reports.values()), dtype=np.float64)
    center = float(np.mean(values)) if consensus == 'mean' else float(np.median(values))
    flags: Set[str] = set()
    if len(reports) >= quorum:
        flags = {r for r, v in reports.items() if abs(v - center) > tolerance}
    return ReportRound(task_id, subject, dict(reports), flags, _clamp01(center))


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

class ReputationEngine:
    """
    Holds every agent's profile and runs report rounds.

    With a contract attached, posterior updates and report rounds are anchored
    on the ledger and token payoffs move real balances; without one the engine
    only tracks nominal payoffs, which is what the Monte Carlo experiments use.
    """

    def __init__(self, params: Optional[ReputationParams] = None, contract=None):
        self.params = params or ReputationParams()
        self.contract = contract
        self.profiles: Dict[str, ReputationProfile] = {}
        self.strikes: Dict[str, int] = {}
        self.excluded: Set[str] = set()
        self.exclusion_records: Dict[str, bytes] = {}
        self.earnings: Dict[str, int] = {}
        self.history: List[dict] = []

    def profile(self, agent_id: str) -> ReputationProfile:
        if agent_id not in self.profiles:
            self.profiles[agent_id] = ReputationProfile(agent_id, self.params.prior_alpha, self.params.prior_beta)
        return self.profiles[agent_id]

    def reputation(self, agent_id: str) -> float:
        return self.profile(agent_id).reputation

    def weights(self, context_id: str = 'default') -> ContextWeights:
        contexts = self.params.contexts
        weights = contexts.get(context_id, contexts['default'])
        return ContextWeights(context_id, tuple(weights))

    def score(self, features: TaskFeatures, context_id: str = 'default') -> float:
        return score_task(features, self.weights(context_id))

    def update(self, agent_id: str, score: float, epoch: Optional[int] = None, reason: str = 'task') -> ReputationProfile:
        profile = update_posterior(self.profile(agent_id), score, self.params.decay, epoch)
        self.profiles[agent_id] = profile
        if self.contract is not None:
            self.contract.record_event('reputation_update', {
                'agent_id': agent_id,
                'score': score,
                'alpha': profile.alpha,
                'beta': profile.beta,
                'reputation': profile.reputation,
                'reason': reason,
            })
        return profile

    def collect(self, task_id: str, subject: str, reports: Mapping[str, float]) -> ReportRound:
        return collect_reports(
            task_id, subject, reports,
            tolerance=self.params.tolerance,
            quorum=self.params.quorum,
            consensus=self.params.consensus,
        )

    def _pay(self, agent_id: str, amount: int) -> int:
        if self.contract is None:
            return amount
        if amount > 0:
            return self.contract.reward(agent_id, amount)
        return -self.contract.slash(agent_id, -amount)

    def _strike(self, agent_id: str) -> bool:
        """Record a reporting strike; True when this strike triggers exclusion."""
        self.strikes[agent_id] = self.strikes.get(agent_id, 0) + 1
        if self.contract is not None:
            self.contract.account(agent_id).report_strikes = self.strikes[agent_id]
        if self.strikes[agent_id] >= self.params.strike_limit and agent_id not in self.excluded:
            self.excluded.add(agent_id)
            if self.contract is not None:
                self.exclusion_records[agent_id] = self.contract.exclude(agent_id)
            return True
        return False

    def apply_payoffs(self, report_round: ReportRound, epoch: Optional[int] = None) -> PayoffResult:
        """Reward agreeing reporters, slash and strike outliers, update the subject."""
        if self.contract is not None:
            self.contract.record_event('report_round', {
                'task_id': report_round.task_id,
                'subject': report_round.subject_agent,
                'reports': report_round.reports,
                'flags': sorted(report_round.flags),
                'consensus': report_round.consensus,
            })

        deltas: Dict[str, int] = {}
        excluded: List[str] = []
        for reporter in sorted(report_round.reports):
            if reporter in report_round.flags:
                deltas[reporter] = self._pay(reporter, -self.params.dishonest_slash)
                self.update(reporter, 0.0, epoch, reason='dishonest_report')
                if self._strike(reporter):
                    excluded.append(reporter)
            else:
                deltas[reporter] = self._pay(reporter, self.params.honest_reward)
                self.update(reporter, 1.0, epoch, reason='honest_report')
            self.earnings[reporter] = self.earnings.get(reporter, 0) + deltas[reporter]
        self.update(report_round.subject_agent, report_round.consensus, epoch, reason='consensus')

        touched = set(report_round.reports) | {report_round.subject_agent}
        if report_round.flags:
            logger.debug(f"[{report_round.task_id}] flagged reporters on {report_round.subject_agent}: {sorted(report_round.flags)}")
        return PayoffResult(deltas, {a: self.profiles[a] for a in sorted(touched)}, excluded)

    # --- history ---

    def snapshot(self, epoch: int, agent_ids: Optional[Sequence[str]] = None) -> List[dict]:
        rows = []
        for agent_id in sorted(agent_ids if agent_ids is not None else self.profiles):
            p = self.profile(agent_id)
            rows.append({
                'epoch': epoch,
                'agent_id': agent_id,
                'alpha': p.alpha,
                'beta': p.beta,
                'reputation': p.reputation,
            })
        self.history.extend(rows)
        return rows

    def trajectories(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['epoch', 'agent_id', 'alpha', 'beta', 'reputation'])
