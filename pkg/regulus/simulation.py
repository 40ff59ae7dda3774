"""
Scenario harness: synthesizes an agent population and task stream, then drives
ledger -> arbitration -> reputation -> forecasting once per epoch and measures
what happened against the injected ground truth.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix, roc_auc_score
from tqdm import tqdm

from config import (
    AGGREGATION_MODES,
    BEHAVIORAL_ADVERSARIES,
    CONTRACT_ID,
    FEATURE_NAMES,
    POLICY_DEFAULTS,
    POLICY_KINDS,
    SIMULATION_DEFAULTS,
    validate_aggregation_mode,
    validate_policy_kind,
)
from .arbitration import RULES, ArbitrationContract, ArbitrationParams, Privilege, audit_from_ledger
from .errors import (
    EmptyDataset,
    InsufficientCalibrationData,
    InvalidConfig,
    LabelMismatch,
    NoAnswers,
    RegulusError,
)
from .forecasting import BehaviorTrajectory, ForecastParams, Forecaster, featurize_population
from .ledger import BehaviorRecord, Ledger, LedgerSigner, RecordKind
from .reputation import ReputationEngine, ReputationParams, TaskFeatures

logger = logging.getLogger(__name__)

# rng stream purposes
_SETUP, _TASKS, _AGENT, _AGGREGATE = range(4)

REPORT_NOISE = 0.02


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentPolicy:
    kind: str
    answer_accuracy: float
    submission_probability: float
    report_bias: float
    capability_overclaim: bool
    resource_level: float
    delay_ticks: int
    misinformation_rate: float

    @classmethod
    def for_kind(cls, kind: str, overrides: Optional[Mapping[str, object]] = None) -> "AgentPolicy":
        if not validate_policy_kind(kind):
            raise InvalidConfig(f"Unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
        params = {**POLICY_DEFAULTS[kind], **(overrides or {})}
        unknown = set(params) - set(POLICY_DEFAULTS[kind])
        if unknown:
            raise InvalidConfig(f"Unknown parameters for policy {kind}: {sorted(unknown)}")
        policy = cls(
            kind=kind,
            answer_accuracy=float(params['answer_accuracy']),
            submission_probability=float(params['submission_probability']),
            report_bias=float(params['report_bias']),
            capability_overclaim=bool(params['capability_overclaim']),
            resource_level=float(params['resource_level']),
            delay_ticks=int(params['delay_ticks']),
            misinformation_rate=float(params['misinformation_rate']),
        )
        for name in ('answer_accuracy', 'submission_probability', 'resource_level', 'misinformation_rate'):
            if not 0.0 <= getattr(policy, name) <= 1.0:
                raise InvalidConfig(f"{kind}.{name}={getattr(policy, name)} outside [0, 1]")
        if not -1.0 <= policy.report_bias <= 1.0 or policy.delay_ticks < 0:
            raise InvalidConfig(f"{kind} has an out-of-range report_bias or delay_ticks")
        return policy

    @property
    def adversarial(self) -> bool:
        return self.kind in BEHAVIORAL_ADVERSARIES


@dataclass
class ScenarioConfig:
    seed: int = SIMULATION_DEFAULTS['seed']
    n_agents: int = SIMULATION_DEFAULTS['n_agents']
    n_epochs: int = SIMULATION_DEFAULTS['n_epochs']
    tasks_per_epoch: int = SIMULATION_DEFAULTS['tasks_per_epoch']
    coalition_size: int = SIMULATION_DEFAULTS['coalition_size']
    capabilities_per_agent: int = SIMULATION_DEFAULTS['capabilities_per_agent']
    task_types: List[str] = field(default_factory=lambda: list(SIMULATION_DEFAULTS['task_types']))
    ticks_per_epoch: int = SIMULATION_DEFAULTS['ticks_per_epoch']
    task_deadline_ticks: int = SIMULATION_DEFAULTS['task_deadline_ticks']
    warmup_fraction: float = SIMULATION_DEFAULTS['warmup_fraction']
    k_clusters: int = SIMULATION_DEFAULTS['k_clusters']
    aggregation_mode: str = SIMULATION_DEFAULTS['aggregation_mode']
    policy_mix: Dict[str, int] = field(default_factory=lambda: dict(SIMULATION_DEFAULTS['policy_mix']))
    policies: Dict[str, AgentPolicy] = field(default_factory=dict)
    arbitration: ArbitrationParams = field(default_factory=ArbitrationParams)
    reputation: ReputationParams = field(default_factory=ReputationParams)
    forecasting: ForecastParams = field(default_factory=ForecastParams)

    @classmethod
    def from_dict(cls, doc: Mapping[str, object]) -> "ScenarioConfig":
        """Build and validate a scenario from a merged config document."""
        merged = {**SIMULATION_DEFAULTS, **doc}
        try:
            policy_overrides = dict(merged.get('policies') or {})
            policies = {kind: AgentPolicy.for_kind(kind, policy_overrides.get(kind)) for kind in POLICY_KINDS}
            for kind in policy_overrides:
                if kind not in policies:
                    raise InvalidConfig(f"Unknown policy kind {kind!r} under 'policies'")
            config = cls(
                seed=int(merged['seed']),
                n_agents=int(merged['n_agents']),
                n_epochs=int(merged['n_epochs']),
                tasks_per_epoch=int(merged['tasks_per_epoch']),
                coalition_size=int(merged['coalition_size']),
                capabilities_per_agent=int(merged['capabilities_per_agent']),
                task_types=[str(t) for t in merged['task_types']],
                ticks_per_epoch=int(merged['ticks_per_epoch']),
                task_deadline_ticks=int(merged['task_deadline_ticks']),
                warmup_fraction=float(merged['warmup_fraction']),
                k_clusters=int(merged['k_clusters']),
                aggregation_mode=str(merged['aggregation_mode']),
                policy_mix={str(k): int(v) for k, v in dict(merged['policy_mix']).items()},
                policies=policies,
                arbitration=ArbitrationParams.from_dict(merged.get('arbitration') or {}),
                reputation=ReputationParams.from_dict(merged.get('reputation') or {}),
                forecasting=ForecastParams.from_dict(merged.get('forecasting') or {}),
            )
            config.validate()
        except InvalidConfig:
            raise
        except (RegulusError, ValueError, TypeError, KeyError) as e:
            raise InvalidConfig(f"Invalid scenario config: {e}") from e
        return config

    def validate(self) -> None:
        problems = []
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if self.n_agents < 1 or self.n_epochs < 1 or self.tasks_per_epoch < 0:
            problems.append("n_agents and n_epochs must be >= 1, tasks_per_epoch >= 0")
        if self.coalition_size < 1 or self.k_clusters < 1:
            problems.append("coalition_size and k_clusters must be >= 1")
        if not self.task_types or not 1 <= self.capabilities_per_agent <= len(self.task_types):
            problems.append("capabilities_per_agent must be within [1, len(task_types)]")
        if self.ticks_per_epoch < 1 or self.task_deadline_ticks < 1:
            problems.append("ticks_per_epoch and task_deadline_ticks must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            problems.append("warmup_fraction must be within [0, 1]")
        if not validate_aggregation_mode(self.aggregation_mode):
            problems.append(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        for kind, count in self.policy_mix.items():
            if not validate_policy_kind(kind) or count < 0:
                problems.append(f"policy_mix entry {kind}={count} is invalid")
        if sum(self.policy_mix.values()) != self.n_agents:
            problems.append(f"policy_mix counts sum to {sum(self.policy_mix.values())}, not n_agents={self.n_agents}")
        a = self.arbitration
        if a.min_stake < 0 or a.initial_stake < a.min_stake or not 0.0 <= a.slash_rate <= 1.0:
            problems.append("arbitration stakes or slash_rate out of range")
        if a.verdict_penalty < 0 or a.frivolous_fee < 0 or a.base_suspension_epochs < 0 or a.reward_pool < 0:
            problems.append("arbitration penalties, fees and pool must be non-negative")
        r = self.reputation
        if not 0.0 < r.decay <= 1.0 or r.prior_alpha <= 0 or r.prior_beta <= 0 or r.quorum < 1:
            problems.append("reputation decay, priors or quorum out of range")
        if r.consensus not in ('median', 'mean'):
            problems.append("reputation consensus must be 'median' or 'mean'")
        f = self.forecasting
        if f.window < 1 or f.K < 1 or f.calibration_draws < 1 or not 0.0 < f.percentile <= 100.0 or not 0.0 < f.ema_factor < 1.0:
            problems.append("forecasting window, K, calibration_draws, percentile or ema_factor out of range")
        if len(f.cutpoints) != 3 or list(f.cutpoints) != sorted(f.cutpoints):
            problems.append("forecasting cutpoints must be three ascending values")
        if problems:
            raise InvalidConfig("; ".join(problems))
        f.build_schedule()

    @property
    def warmup_epochs(self) -> int:
        return math.ceil(self.warmup_fraction * self.n_epochs)

    def to_dict(self) -> Dict[str, object]:
        doc = asdict(self)
        doc['policies'] = {k: {n: v for n, v in p.items() if n != 'kind'} for k, p in doc['policies'].items()}
        doc['forecasting']['cutpoints'] = list(self.forecasting.cutpoints)
        return doc


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    task_id: str
    epoch: int
    task_type: str
    truth: int
    assigned_tick: int
    deadline_tick: int


@dataclass
class AgentState:
    agent_id: str
    capabilities: frozenset
    all_task_types: Tuple[str, ...] = ()
    partner: Optional[str] = None
    adversarial_phase: bool = False


@dataclass
class PolicyActions:
    submits: bool
    answer: Optional[int] = None
    delay: int = 0
    claimed_capabilities: frozenset = frozenset()
    contradicts: bool = False
    reports: Dict[str, float] = field(default_factory=dict)


def _effective(policy: AgentPolicy, state: AgentState) -> AgentPolicy:
    """Behavioral adversaries behave honestly until their phase starts."""
    if policy.adversarial and not state.adversarial_phase:
        return AgentPolicy.for_kind('honest')
    return policy


def peer_reports(
    policy: AgentPolicy,
    state: AgentState,
    peer_scores: Mapping[str, float],
    rng: np.random.Generator,
) -> Dict[str, float]:
    acting = _effective(policy, state)
    reports = {}
    for subject in sorted(peer_scores):
        value = peer_scores[subject] + rng.normal(0.0, REPORT_NOISE)
        if acting.kind == 'colluder' and subject == state.partner:
            value += acting.report_bias
        reports[subject] = float(min(1.0, max(0.0, value)))
    return reports


def policy_step(
    policy: AgentPolicy,
    task: Optional[Task],
    state: AgentState,
    rng: np.random.Generator,
    peer_scores: Optional[Mapping[str, float]] = None,
) -> PolicyActions:
    """
    One agent's behavior for one task. With task=None only the epoch-level
    decisions (submission, claimed capabilities) are meaningful.
    """
    acting = _effective(policy, state)
    submits = bool(rng.random() < acting.submission_probability)
    claimed = state.capabilities
    if acting.capability_overclaim:
        claimed = frozenset(state.all_task_types) | state.capabilities
    actions = PolicyActions(submits=submits, claimed_capabilities=claimed)
    if task is None:
        return actions

    correct = rng.random() < acting.answer_accuracy
    actions.answer = task.truth if correct else 1 - task.truth
    actions.delay = acting.delay_ticks + int(rng.integers(0, 3))
    actions.contradicts = bool(rng.random() < acting.misinformation_rate)
    if peer_scores:
        actions.reports = peer_reports(policy, state, peer_scores, rng)
    return actions


# ---------------------------------------------------------------------------
# Aggregation and metrics
# ---------------------------------------------------------------------------

def _vote(answers: Mapping[str, int], weights: Mapping[str, float]) -> int:
    totals: Dict[int, float] = {}
    for agent_id, answer in answers.items():
        totals[answer] = totals.get(answer, 0.0) + weights.get(agent_id, 0.0)
    best = max(totals.values())
    tied = {a for a, total in totals.items() if math.isclose(total, best, rel_tol=1e-12, abs_tol=1e-15)}
    return answers[min(a for a, ans in answers.items() if ans in tied)]


def aggregate_answers(
    answers: Mapping[str, int],
    reputations: Mapping[str, float],
    mode: str,
    rng: Optional[np.random.Generator] = None,
    clusters: Optional[Sequence[Sequence[str]]] = None,
) -> int:
    if not answers:
        raise NoAnswers("aggregate_answers needs at least one answer")
    if mode == 'non_cooperative':
        rng = rng or np.random.default_rng(0)
        agents = sorted(answers)
        return answers[agents[int(rng.integers(len(agents)))]]
    if mode == 'k_cluster':
        clusters = clusters or [sorted(answers)]
        outputs: Dict[str, int] = {}
        for cluster in clusters:
            members = {a: answers[a] for a in cluster if a in answers}
            if members:
                outputs[min(members)] = _vote(members, {a: 1.0 for a in members})
        return _vote(outputs, {a: 1.0 for a in outputs})
    if mode == 'reputation_weighted':
        return _vote(answers, reputations)
    raise InvalidConfig(f"Unknown aggregation mode {mode!r}")


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def confusion_metrics(y_true: Sequence[bool], y_pred: Sequence[bool]) -> DetectionMetrics:
    """Precision/recall/F1 with the degenerate cases (no positives, no predictions) defined as 1.0."""
    if len(y_true):
        tn, fp, fn, tp = (int(v) for v in confusion_matrix(
            np.asarray(y_true, dtype=bool), np.asarray(y_pred, dtype=bool), labels=[False, True]).ravel())
    else:
        tn = fp = fn = tp = 0
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionMetrics(precision, recall, f1, tp, fp, fn, tn)


def evaluate_detection(
    alerts: Iterable,
    ground_truth_labels: Mapping[Tuple[str, int], bool],
) -> DetectionMetrics:
    """An alert is a positive prediction for its (agent_id, epoch)."""
    predicted = set()
    for alert in alerts:
        key = (alert.agent_id, alert.epoch) if hasattr(alert, 'agent_id') else tuple(alert)
        if key not in ground_truth_labels:
            raise LabelMismatch(f"Alert for {key} has no ground-truth label")
        predicted.add(key)
    keys = sorted(ground_truth_labels)
    return confusion_metrics([bool(ground_truth_labels[k]) for k in keys], [k in predicted for k in keys])


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

EVENT_COLUMNS = ['epoch', 'event', 'agent_id', 'amount', 'detail', 'record_id']
DETECTION_COLUMNS = ['epoch', 'agent_id', 'label', 'anomaly_score', 'deviation_probability', 'alerted', 'action']
AGGREGATION_COLUMNS = ['epoch', 'task_id', 'task_type', 'truth', 'n_answers'] + AGGREGATION_MODES
TRAJECTORY_COLUMNS = ['agent_id', 'end_epoch', 'step', 'label', 'phase']


@dataclass
class SimulationReport:
    config: ScenarioConfig
    reputations: pd.DataFrame
    events: pd.DataFrame
    detection: pd.DataFrame
    aggregation: pd.DataFrame
    trajectories: pd.DataFrame
    metrics: DetectionMetrics
    roc_auc: Optional[float]
    aggregation_accuracy: Dict[str, Dict[str, float]]
    token_audit: Dict[str, object]
    ledger: Ledger
    contract: ArbitrationContract
    losses: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, object]:
        violations = self.ledger.verify_chain()
        return {
            'seed': self.config.seed,
            'n_agents': self.config.n_agents,
            'n_epochs': self.config.n_epochs,
            'warmup_epochs': self.config.warmup_epochs,
            'policy_mix': dict(sorted(self.config.policy_mix.items())),
            'detection': {**asdict(self.metrics), 'roc_auc': self.roc_auc},
            'aggregation': self.aggregation_accuracy,
            'token_audit': self.token_audit,
            'counts': {
                'slashes': int((self.events['event'] == 'slash').sum()),
                'revocations': int((self.events['event'] == 'revocation').sum()),
                'resolutions': int((self.events['event'] == 'resolution').sum()),
                'alerts': int((self.events['event'] == 'alert').sum()),
            },
            'ledger': {
                'blocks': self.ledger.height,
                'records': len(self.ledger),
                'violations': [str(v) for v in violations],
            },
            'forecaster_final_loss': self.losses[-1] if self.losses else None,
        }


def verify_accountability(report: SimulationReport, ledger: Optional[Ledger] = None) -> List[str]:
    """Event rows whose anchoring record is missing or lacks a valid inclusion proof."""
    ledger = ledger or report.ledger
    failures = []
    for row in report.events.itertuples(index=False):
        if not row.record_id or not ledger.has_valid_proof(bytes.fromhex(row.record_id)):
            failures.append(f"{row.event} for {row.agent_id} at epoch {row.epoch}")
    return failures


# ---------------------------------------------------------------------------
# Scenario loop
# ---------------------------------------------------------------------------

class Simulation:
    """Owns the ledger, contract, reputation engine and forecaster for one scenario."""

    def __init__(self, config: ScenarioConfig, progress: bool = False):
        self.config = config
        self.progress = progress
        self.ledger = Ledger()
        self.contract = ArbitrationContract(self.ledger, config.arbitration, config.seed)
        self.engine = ReputationEngine(config.reputation, self.contract)
        self.forecaster: Optional[Forecaster] = Forecaster(config.forecasting) if config.forecasting.enabled else None

        self.agent_ids = [f"agent-{i:02d}" for i in range(config.n_agents)]
        self.signers: Dict[str, LedgerSigner] = {}
        self.policies: Dict[str, AgentPolicy] = {}
        self.capabilities: Dict[str, frozenset] = {}
        self.partners: Dict[str, str] = {}
        self.clusters: List[List[str]] = []

        self.events: List[dict] = []
        self.detection_rows: List[dict] = []
        self.aggregation_rows: List[dict] = []
        self.windows: List[BehaviorTrajectory] = []
        self.coalitions: Dict[int, List[List[str]]] = {}
        self._setup()

    # --- setup ---

    def _setup(self) -> None:
        config = self.config
        rng = _rng(config.seed, _SETUP)
        kinds = [k for k in POLICY_KINDS for _ in range(config.policy_mix.get(k, 0))]
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        for agent_id, kind in zip(self.agent_ids, kinds):
            self.policies[agent_id] = config.policies.get(kind) or AgentPolicy.for_kind(kind)
            caps = rng.choice(config.task_types, size=config.capabilities_per_agent, replace=False)
            self.capabilities[agent_id] = frozenset(str(c) for c in caps)

        colluders = [a for a in self.agent_ids if self.policies[a].kind == 'colluder']
        colluders = [colluders[i] for i in rng.permutation(len(colluders))]
        for a, b in zip(colluders[0::2], colluders[1::2]):
            self.partners[a], self.partners[b] = b, a

        shuffled = [self.agent_ids[i] for i in rng.permutation(len(self.agent_ids))]
        self.clusters = [sorted(shuffled[k::config.k_clusters]) for k in range(config.k_clusters)]

        for agent_id in self.agent_ids:
            signer = LedgerSigner.derive(config.seed, agent_id)
            self.signers[agent_id] = signer
            self.contract.register_agent(
                agent_id, signer.public_key_bytes(), config.arbitration.initial_stake, self.capabilities[agent_id])
        logger.info(f"[setup] {config.n_agents} agents: "
                    f"{', '.join(f'{a}={self.policies[a].kind}' for a in self.agent_ids)}")

    def _state(self, agent_id: str, epoch: int) -> AgentState:
        return AgentState(
            agent_id=agent_id,
            capabilities=self.capabilities[agent_id],
            all_task_types=tuple(self.config.task_types),
            partner=self.partners.get(agent_id),
            adversarial_phase=epoch >= self.config.warmup_epochs,
        )

    def is_adversary(self, agent_id: str, epoch: int) -> bool:
        return self.policies[agent_id].adversarial and epoch >= self.config.warmup_epochs

    # --- helpers ---

    def _submit(self, agent_id: str, epoch: int, kind: RecordKind, fields: Mapping[str, object], tick: int) -> bytes:
        record = BehaviorRecord.create(self.signers[agent_id], epoch, kind, fields, tick)
        return self.contract.submit_behavior(agent_id, epoch, record).record_id

    def _event(self, epoch: int, event: str, agent_id: str, amount: int, detail: str, record_id: Optional[bytes]) -> None:
        self.events.append({
            'epoch': epoch,
            'event': event,
            'agent_id': agent_id,
            'amount': amount,
            'detail': detail,
            'record_id': record_id.hex() if record_id else '',
        })

    def _generate_tasks(self, epoch: int) -> List[Task]:
        config = self.config
        rng = _rng(config.seed, _TASKS, epoch)
        tasks = []
        for i in range(config.tasks_per_epoch):
            assigned = epoch * config.ticks_per_epoch + i * (config.ticks_per_epoch // max(1, config.tasks_per_epoch))
            tasks.append(Task(
                task_id=f"e{epoch:03d}-t{i:02d}",
                epoch=epoch,
                task_type=str(config.task_types[int(rng.integers(len(config.task_types)))]),
                truth=int(rng.integers(2)),
                assigned_tick=assigned,
                deadline_tick=assigned + config.task_deadline_ticks,
            ))
        return tasks

    def _form_coalition(
        self,
        task: Task,
        candidates: Sequence[str],
        claimed: Mapping[str, frozenset],
        rng: np.random.Generator,
    ) -> List[str]:
        """Sample members with probability proportional to reputation; colluders pull in their partner."""
        pool = [a for a in candidates if task.task_type in claimed[a]]
        chosen: List[str] = []
        while pool and len(chosen) < self.config.coalition_size:
            weights = np.array([self.engine.reputation(a) for a in pool], dtype=np.float64)
            pick = pool[int(rng.choice(len(pool), p=weights / weights.sum()))]
            chosen.append(pick)
            pool.remove(pick)
            partner = self.partners.get(pick)
            if (partner in pool and self.is_adversary(pick, task.epoch)
                    and len(chosen) < self.config.coalition_size):
                chosen.append(partner)
                pool.remove(partner)
        return sorted(chosen)

    # --- epoch phases ---

    def _run_task(self, epoch: int, index: int, task: Task, claimed: Mapping[str, frozenset]) -> None:
        config = self.config
        eligible = [a for a in sorted(claimed) if self.contract.eligible_for_coalition(a)]
        actions = {
            a: policy_step(self.policies[a], task, self._state(a, epoch),
                           _rng(config.seed, _AGENT, epoch, self.agent_ids.index(a), index + 1))
            for a in eligible
        }
        answers = {a: actions[a].answer for a in eligible}
        reputations = {a: self.engine.reputation(a) for a in eligible}
        self._aggregate(epoch, index, task, answers, reputations)

        coalition = self._form_coalition(task, eligible, claimed, _rng(config.seed, _TASKS, epoch, index + 1))
        if coalition:
            self.contract.record_coalition(task.task_id, coalition, task.task_type)
            self.coalitions.setdefault(epoch, []).append(coalition)

        for a in eligible:
            self._submit(a, epoch, RecordKind.ACTION_LOG,
                         {'task_id': task.task_id, 'answer': answers[a]}, task.assigned_tick + 1)

        true_scores: Dict[str, float] = {}
        for m in coalition:
            act = actions[m]
            completion_tick = task.assigned_tick + act.delay
            completed = act.answer == task.truth
            self._submit(m, epoch, RecordKind.TASK_ASSIGNMENT, {
                'task_id': task.task_id,
                'task_type': task.task_type,
                'assignee': m,
                'assigned_tick': task.assigned_tick,
                'deadline_tick': task.deadline_tick,
            }, task.assigned_tick)
            plan = 'A' if act.answer == 1 else 'B'
            self._submit(m, epoch, RecordKind.DECISION_INPUT,
                         {'task_id': task.task_id, 'plan': plan}, task.assigned_tick + 1)
            if act.contradicts:
                self._submit(m, epoch, RecordKind.DECISION_INPUT,
                             {'task_id': task.task_id, 'plan': 'B' if plan == 'A' else 'A'}, task.assigned_tick + 2)
            self._submit(m, epoch, RecordKind.COOPERATION_OUTCOME, {
                'task_id': task.task_id,
                'completed': completed,
                'assigned_tick': task.assigned_tick,
                'completion_tick': completion_tick,
                'deadline_tick': task.deadline_tick,
            }, completion_tick)
            features = TaskFeatures.from_delay(
                completed, act.delay, config.task_deadline_ticks,
                self.policies[m].resource_level, 1.0 if completed else 0.0)
            true_scores[m] = self.engine.score(features, task.task_type)

        if len(coalition) == 1:
            self.engine.update(coalition[0], true_scores[coalition[0]], epoch, reason='solo_task')
            return
        for subject in coalition:
            by_reporter = {}
            for reporter in coalition:
                if reporter == subject:
                    continue
                rng = _rng(config.seed, _AGENT, epoch, self.agent_ids.index(reporter), index + 1,
                           self.agent_ids.index(subject) + 1)
                by_reporter[reporter] = peer_reports(self.policies[reporter], self._state(reporter, epoch),
                                                     {subject: true_scores[subject]}, rng)[subject]
            result = self.engine.apply_payoffs(self.engine.collect(task.task_id, subject, by_reporter), epoch)
            for excluded in result.excluded:
                self._event(epoch, 'exclusion', excluded, 0, 'report_strikes',
                            self.engine.exclusion_records.get(excluded))

    def _aggregate(self, epoch: int, index: int, task: Task, answers: Mapping[str, int], reputations: Mapping[str, float]) -> None:
        row = {
            'epoch': epoch,
            'task_id': task.task_id,
            'task_type': task.task_type,
            'truth': task.truth,
            'n_answers': len(answers),
        }
        for mode in AGGREGATION_MODES:
            if answers:
                rng = _rng(self.config.seed, _AGGREGATE, epoch, index)
                row[mode] = aggregate_answers(answers, reputations, mode, rng=rng, clusters=self.clusters)
            else:
                row[mode] = -1
        self.aggregation_rows.append(row)

    def _scan_disputes(self, epoch: int) -> None:
        """Open, evaluate and resolve a dispute for every agent whose sealed records break a rule."""
        for agent_id in self.agent_ids:
            evidence = self.ledger.query(agent_id=agent_id, epoch_range=(epoch, epoch))
            if not evidence:
                continue
            account = self.contract.account(agent_id)
            hits = [claim for claim, rule in RULES.items() if rule(account, evidence)]
            if not hits:
                continue
            peers = sorted({m for c in self.coalitions.get(epoch, []) if agent_id in c for m in c} - {agent_id})
            claimant = peers[0] if peers else CONTRACT_ID
            dispute = self.contract.open_dispute(claimant, agent_id, hits[0], [r.record_id for r in evidence])
            self._settle(epoch, dispute)

    def _settle(self, epoch: int, dispute) -> None:
        self.contract.evaluate_evidence(dispute)
        resolution = self.contract.resolve_dispute(dispute)
        self._event(epoch, 'resolution', dispute.respondent, resolution.penalty_tokens,
                    f"{dispute.dispute_id}:{dispute.claim_kind}:suspend={resolution.suspension_epochs}",
                    resolution.record_id)

    def _collect_windows(self, epoch: int) -> List[BehaviorTrajectory]:
        window = self.config.forecasting.window
        if epoch < window - 1:
            return []
        trajectories = featurize_population(self.ledger, self.agent_ids, window, epoch, self.config.forecasting)
        found = [trajectories[a] for a in self.agent_ids if a in trajectories]
        self.windows.extend(found)
        return found

    def _train_forecaster(self) -> None:
        warm = [w for w in self.windows if w.end_epoch < self.config.warmup_epochs]
        # checkerboard over (agent, epoch) so every agent appears in both sets
        held_out = [(w.end_epoch + self.agent_ids.index(w.agent_id)) % 2 == 1 for w in warm]
        train = [w.x for w, h in zip(warm, held_out) if not h]
        calibration = [w.x for w, h in zip(warm, held_out) if h]
        try:
            self.forecaster.fit(np.array(train), np.array(calibration), progress=self.progress)
        except (EmptyDataset, InsufficientCalibrationData) as e:
            logger.warning(f"[forecast] disabled: {e}")
            self.forecaster = None

    def _forecast(self, epoch: int, current: List[BehaviorTrajectory]) -> None:
        scored: Dict[str, float] = {}
        if current and self.forecaster is not None and self.forecaster.ready:
            scores = self.forecaster.score(np.stack([w.x for w in current]), seed=epoch)
            scored = {w.agent_id: float(s) for w, s in zip(current, scores)}
        alerts = {}
        if scored:
            for alert in self.forecaster.alerts(scored, epoch, self.contract):
                alerts[alert.agent_id] = alert
                self._event(epoch, 'alert', alert.agent_id, 0, alert.action, alert.record_id)
                if alert.dispute_id:
                    self._settle(epoch, self.contract.disputes[alert.dispute_id])

        for agent_id in self.agent_ids:
            alert = alerts.get(agent_id)
            calibration = self.forecaster.calibration if self.forecaster is not None else None
            score = scored.get(agent_id, float('nan'))
            self.detection_rows.append({
                'epoch': epoch,
                'agent_id': agent_id,
                'label': self.is_adversary(agent_id, epoch),
                'anomaly_score': score,
                'deviation_probability': (calibration.deviation_probability(score, len(scored))
                                          if calibration is not None and agent_id in scored else float('nan')),
                'alerted': alert is not None,
                'action': alert.action if alert else '',
            })

    def run_epoch(self, epoch: int) -> None:
        config = self.config
        claimed: Dict[str, frozenset] = {}
        for idx, agent_id in enumerate(self.agent_ids):
            if self.contract.account(agent_id).privileges == Privilege.SUSPENDED:
                continue
            actions = policy_step(self.policies[agent_id], None, self._state(agent_id, epoch),
                                  _rng(config.seed, _AGENT, epoch, idx, 0))
            if not actions.submits:
                continue
            self._submit(agent_id, epoch, RecordKind.SENSOR_READING, {
                'tick': epoch * config.ticks_per_epoch,
                'resource_level': self.policies[agent_id].resource_level,
                'claimed_capabilities': sorted(actions.claimed_capabilities),
            }, epoch * config.ticks_per_epoch)
            claimed[agent_id] = actions.claimed_capabilities

        for index, task in enumerate(self._generate_tasks(epoch)):
            self._run_task(epoch, index, task, claimed)

        report = self.contract.close_epoch(epoch)
        for agent_id in sorted(report.missing):
            self._event(epoch, 'slash', agent_id, report.slashes[agent_id], 'missing_submission', report.record_id)
            self._event(epoch, 'revocation', agent_id, 0, f"restricted_until={epoch + 1}", report.record_id)

        self._scan_disputes(epoch)
        current = self._collect_windows(epoch)
        if self.forecaster is not None:
            if epoch >= config.warmup_epochs:
                self._forecast(epoch, current)
            elif epoch == config.warmup_epochs - 1:
                self._train_forecaster()
        self.engine.snapshot(epoch, self.agent_ids)

    def run(self) -> SimulationReport:
        config = self.config
        for epoch in tqdm(range(config.n_epochs), desc='epochs', disable=not self.progress):
            self.run_epoch(epoch)
        if self.forecaster is not None and config.warmup_epochs == 0:
            logger.warning("[forecast] warm-up is empty; forecaster never trained")
        self.contract.finalize()
        return self._report()

    def _report(self) -> SimulationReport:
        detection = pd.DataFrame(self.detection_rows, columns=DETECTION_COLUMNS)
        metrics = confusion_metrics(detection['label'].tolist(), detection['alerted'].tolist())
        scored = detection.dropna(subset=['anomaly_score'])
        roc_auc = None
        if scored['label'].nunique() == 2:
            roc_auc = float(roc_auc_score(scored['label'].astype(bool), scored['anomaly_score']))

        aggregation = pd.DataFrame(self.aggregation_rows, columns=AGGREGATION_COLUMNS)
        accuracy = {}
        for mode in AGGREGATION_MODES:
            m = confusion_metrics((aggregation['truth'] == 1).tolist(), (aggregation[mode] == 1).tolist())
            accuracy[mode] = {
                'accuracy': float((aggregation[mode] == aggregation['truth']).mean()) if len(aggregation) else 1.0,
                'f1': m.f1,
            }

        audit = self.contract.token_audit()
        replay = audit_from_ledger(self.ledger)
        token_audit = {
            **asdict(audit),
            'balanced': audit.balanced,
            'ledger_replay_matches': asdict(replay) == asdict(audit),
        }

        rows = []
        for w in self.windows:
            for step, values in enumerate(w.x):
                rows.append({
                    'agent_id': w.agent_id,
                    'end_epoch': w.end_epoch,
                    'step': step,
                    'label': int(self.is_adversary(w.agent_id, w.end_epoch)),
                    'phase': 'warmup' if w.end_epoch < self.config.warmup_epochs else 'live',
                    **{name: float(v) for name, v in zip(FEATURE_NAMES, values)},
                })
        trajectories = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS + FEATURE_NAMES)

        return SimulationReport(
            config=self.config,
            reputations=self.engine.trajectories(),
            events=pd.DataFrame(self.events, columns=EVENT_COLUMNS),
            detection=detection,
            aggregation=aggregation,
            trajectories=trajectories,
            metrics=metrics,
            roc_auc=roc_auc,
            aggregation_accuracy=accuracy,
            token_audit=token_audit,
            ledger=self.ledger,
            contract=self.contract,
            losses=list(self.forecaster.losses) if self.forecaster is not None else [],
        )


def run_scenario(config: ScenarioConfig, progress: bool = False) -> SimulationReport:
    """Run one scenario end to end; deterministic for a fixed config and seed."""
    logger.info(f"[scenario] seed={config.seed} agents={config.n_agents} epochs={config.n_epochs} "
                f"mix={dict(sorted(config.policy_mix.items()))}")
    return Simulation(config, progress=progress).run()
