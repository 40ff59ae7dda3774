"""
Arbitration contract: staking, submission obligations, slashing, privilege
revocation, and the dispute lifecycle.

Every state transition that moves tokens or changes privileges is also signed
by the contract identity and appended to the ledger, so the full token flow can
be replayed from chain state alone (see `audit_from_ledger`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set

from config import ARBITRATION_DEFAULTS, CLAIM_KINDS, CONTRACT_ID
from .errors import (
    ArbitrationError,
    DisputeNotEvaluated,
    DisputeNotOpen,
    DuplicateAgent,
    EpochAlreadyClosed,
    EvidenceProofInvalid,
    InsufficientStake,
    InvalidSignature,
    SuspendedAgent,
    UnknownAgent,
    UnknownEvidence,
    WrongEpoch,
)
from .ledger import BehaviorRecord, Ledger, LedgerSigner, RecordKind

logger = logging.getLogger(__name__)

# Pseudo-accounts used in token_transfer events.
SINK = f"{CONTRACT_ID}:sink"
POOL = f"{CONTRACT_ID}:pool"


class Privilege(str, Enum):
    ACTIVE = 'active'
    RESTRICTED = 'restricted'
    SUSPENDED = 'suspended'


class DisputeStatus(str, Enum):
    OPEN = 'open'
    EVALUATED = 'evaluated'
    RESOLVED = 'resolved'


@dataclass(frozen=True)
class ArbitrationParams:
    min_stake: int = ARBITRATION_DEFAULTS['min_stake']
    initial_stake: int = ARBITRATION_DEFAULTS['initial_stake']
    slash_rate: float = ARBITRATION_DEFAULTS['slash_rate']
    verdict_penalty: int = ARBITRATION_DEFAULTS['verdict_penalty']
    frivolous_fee: int = ARBITRATION_DEFAULTS['frivolous_fee']
    base_suspension_epochs: int = ARBITRATION_DEFAULTS['base_suspension_epochs']
    reward_pool: int = ARBITRATION_DEFAULTS['reward_pool']

    @classmethod
    def from_dict(cls, block: Mapping[str, object]) -> "ArbitrationParams":
        merged = {**ARBITRATION_DEFAULTS, **block}
        return cls(
            min_stake=int(merged['min_stake']),
            initial_stake=int(merged['initial_stake']),
            slash_rate=float(merged['slash_rate']),
            verdict_penalty=int(merged['verdict_penalty']),
            frivolous_fee=int(merged['frivolous_fee']),
            base_suspension_epochs=int(merged['base_suspension_epochs']),
            reward_pool=int(merged['reward_pool']),
        )


@dataclass
class AgentAccount:
    agent_id: str
    public_key: bytes
    stake: int
    privileges: Privilege = Privilege.ACTIVE
    strikes: int = 0
    declared_capabilities: frozenset = frozenset()
    monitored: bool = False
    restricted_until: int = -1
    suspended_until: int = -1
    report_strikes: int = 0
    excluded: bool = False


@dataclass(frozen=True)
class SubmissionReceipt:
    record_id: bytes
    agent_id: str
    epoch: int


@dataclass
class EpochReport:
    epoch: int
    submitted: Set[str]
    missing: Set[str]
    slashes: Dict[str, int]
    revocations: Set[str]
    record_id: Optional[bytes] = None


@dataclass
class Dispute:
    dispute_id: str
    claimant: str
    respondent: str
    claim_kind: str
    evidence_record_ids: List[bytes]
    status: DisputeStatus = DisputeStatus.OPEN
    opened_epoch: int = 0
    verdicts: Optional[List[bool]] = None
    record_id: Optional[bytes] = None


@dataclass
class Resolution:
    dispute_id: str
    verdicts: List[bool]
    penalty_tokens: int
    suspension_epochs: int
    redistribution: Dict[str, int]
    flagged: bool
    frivolous_fee: int = 0
    record_id: Optional[bytes] = None


@dataclass
class TokenAudit:
    stakes: Dict[str, int]
    sink: int
    reward_pool: int
    deposits: int
    initial_pool: int

    @property
    def total(self) -> int:
        return sum(self.stakes.values()) + self.sink + self.reward_pool

    @property
    def balanced(self) -> bool:
        return self.total == self.deposits + self.initial_pool


# ---------------------------------------------------------------------------
# Rule registry
# ---------------------------------------------------------------------------

Rule = Callable[[AgentAccount, Sequence[BehaviorRecord]], bool]


def _concerns(record: BehaviorRecord, agent_id: str) -> bool:
    return record.agent_id == agent_id or record.fields.get('assignee') == agent_id


def capability_violation(account: AgentAccount, evidence: Sequence[BehaviorRecord]) -> bool:
    for record in evidence:
        if record.kind != RecordKind.TASK_ASSIGNMENT or not _concerns(record, account.agent_id):
            continue
        task_type = record.fields.get('task_type')
        if task_type is not None and task_type not in account.declared_capabilities:
            return True
    return False


def deadline_violation(account: AgentAccount, evidence: Sequence[BehaviorRecord]) -> bool:
    for record in evidence:
        if record.kind != RecordKind.COOPERATION_OUTCOME or not _concerns(record, account.agent_id):
            continue
        fields = record.fields
        completion, deadline = fields.get('completion_tick'), fields.get('deadline_tick')
        if completion is not None and deadline is not None and completion > deadline:
            return True
    return False


def contradiction(account: AgentAccount, evidence: Sequence[BehaviorRecord]) -> bool:
    """
    The respondent signed two different values for one payload key in one
    epoch, across every record kind. Records carrying a task_id only conflict
    with records about the same task.
    """
    seen: Dict[tuple, object] = {}
    for record in evidence:
        if record.agent_id != account.agent_id:
            continue
        scope = record.fields.get('task_id')
        for key, value in record.fields.items():
            if key == 'task_id':
                continue
            claim = (record.epoch, scope, key)
            if claim in seen and seen[claim] != value:
                return True
            seen.setdefault(claim, value)
    return False


RULES: Dict[str, Rule] = {
    'capability_violation': capability_violation,
    'deadline_violation': deadline_violation,
    'contradiction': contradiction,
}


# ---------------------------------------------------------------------------
# Contract
# ---------------------------------------------------------------------------

class ArbitrationContract:
    """
    In-process arbitration contract bound to one ledger.

    The contract signs its own event records with the `asc` identity. Token
    balances live in three places: agent stakes, the sink (missing-submission
    slashes, reporter slashes, frivolous fees) and the reward pool.
    """

    def __init__(self, ledger: Ledger, params: Optional[ArbitrationParams] = None, seed: int = 0):
        self.ledger = ledger
        self.params = params or ArbitrationParams()
        self.signer = LedgerSigner.derive(seed, CONTRACT_ID)
        ledger.register_key(CONTRACT_ID, self.signer.public_key_bytes())

        self.accounts: Dict[str, AgentAccount] = {}
        self.current_epoch = 0
        self.sink = 0
        self.reward_pool = self.params.reward_pool
        self.deposits = 0
        self.disputes: Dict[str, Dispute] = {}
        self.resolutions: Dict[str, Resolution] = {}
        self.epoch_reports: List[EpochReport] = []
        self._submitted: Set[str] = set()
        self._clock = 0

        self._emit('contract_created', {
            'reward_pool': self.params.reward_pool,
            'min_stake': self.params.min_stake,
            'slash_rate': self.params.slash_rate,
        })

    # --- internals ---

    def _emit(self, event: str, fields: Mapping[str, object], kind: RecordKind = RecordKind.REPORT) -> bytes:
        self._clock += 1
        record = BehaviorRecord.create(self.signer, self.current_epoch, kind, {'event': event, **fields}, self._clock)
        return self.ledger.append_record(record)

    def _transfer(self, source: str, dest: str, amount: int, reason: str) -> int:
        if amount <= 0:
            return 0
        for party, delta in ((source, -amount), (dest, amount)):
            if party == SINK:
                self.sink += delta
            elif party == POOL:
                self.reward_pool += delta
            else:
                self.accounts[party].stake += delta
        self._emit('token_transfer', {'from': source, 'to': dest, 'amount': amount, 'reason': reason})
        return amount

    def _refresh_privileges(self) -> None:
        for account in self.accounts.values():
            if self.current_epoch <= account.suspended_until:
                account.privileges = Privilege.SUSPENDED
            elif self.current_epoch <= account.restricted_until:
                account.privileges = Privilege.RESTRICTED
            else:
                account.privileges = Privilege.ACTIVE

    def account(self, agent_id: str) -> AgentAccount:
        try:
            return self.accounts[agent_id]
        except KeyError:
            raise UnknownAgent(f"Agent {agent_id} is not registered") from None

    # --- phase 1: staking and submission obligations ---

    def register_agent(
        self,
        agent_id: str,
        public_key: bytes,
        stake: int,
        capabilities: Iterable[str] = (),
    ) -> AgentAccount:
        if agent_id in self.accounts or agent_id == CONTRACT_ID:
            raise DuplicateAgent(f"Agent {agent_id} is already registered")
        if stake < self.params.min_stake:
            raise InsufficientStake(f"Stake {stake} is below the minimum {self.params.min_stake}")

        self.ledger.register_key(agent_id, public_key)
        account = AgentAccount(
            agent_id=agent_id,
            public_key=public_key,
            stake=int(stake),
            declared_capabilities=frozenset(capabilities),
        )
        self.accounts[agent_id] = account
        self.deposits += account.stake
        self._emit('registration', {
            'agent_id': agent_id,
            'stake': account.stake,
            'capabilities': sorted(account.declared_capabilities),
            'public_key': public_key.hex(),
        })
        logger.info(f"[{agent_id}] registered with stake {stake}")
        return account

    def submit_behavior(self, agent_id: str, epoch: int, record: BehaviorRecord) -> SubmissionReceipt:
        account = self.account(agent_id)
        if account.privileges == Privilege.SUSPENDED:
            raise SuspendedAgent(f"Agent {agent_id} is suspended until epoch {account.suspended_until}")
        if epoch != self.current_epoch or record.epoch != self.current_epoch:
            raise WrongEpoch(f"Record epoch {record.epoch} is not the open epoch {self.current_epoch}")
        if record.agent_id != agent_id:
            raise InvalidSignature(f"Record is signed by {record.agent_id}, not {agent_id}")
        record_id = self.ledger.append_record(record)
        self._submitted.add(agent_id)
        return SubmissionReceipt(record_id, agent_id, epoch)

    def has_submitted(self, agent_id: str) -> bool:
        return agent_id in self._submitted

    def close_epoch(self, epoch: int) -> EpochReport:
        if epoch < self.current_epoch:
            raise EpochAlreadyClosed(f"Epoch {epoch} is already closed")
        if epoch > self.current_epoch:
            raise WrongEpoch(f"Epoch {epoch} is not open yet (current {self.current_epoch})")

        obligated = {a for a, acc in self.accounts.items() if acc.privileges != Privilege.SUSPENDED}
        submitted = obligated & self._submitted
        missing = obligated - submitted
        rate = Fraction(str(self.params.slash_rate))
        slashes: Dict[str, int] = {}
        for agent_id in sorted(missing):
            account = self.accounts[agent_id]
            amount = min(math.floor(rate * account.stake), account.stake)
            slashes[agent_id] = self._transfer(agent_id, SINK, amount, 'missing_submission')
            account.restricted_until = max(account.restricted_until, epoch + 1)

        report = EpochReport(epoch, submitted, missing, slashes, set(missing))
        report.record_id = self._emit('epoch_report', {
            'epoch': epoch,
            'submitted': sorted(submitted),
            'missing': sorted(missing),
            'slashes': slashes,
            'revocations': sorted(missing),
        })
        self.ledger.seal_block(epoch)
        self.epoch_reports.append(report)

        self.current_epoch = epoch + 1
        self._submitted = set()
        self._refresh_privileges()
        if missing:
            logger.info(f"[epoch {epoch}] closed; {len(missing)} missing submissions slashed: {sorted(missing)}")
        else:
            logger.debug(f"[epoch {epoch}] closed; all {len(submitted)} agents submitted")
        return report

    # --- access control ---

    def restrict(self, agent_id: str, epochs: int = 1, reason: str = 'forecast_alert') -> bytes:
        """Restrict an agent for the next `epochs` epochs, starting with the current one."""
        account = self.account(agent_id)
        account.restricted_until = max(account.restricted_until, self.current_epoch + epochs - 1)
        self._refresh_privileges()
        logger.info(f"[{agent_id}] restricted through epoch {account.restricted_until} ({reason})")
        return self._emit('restriction', {
            'agent_id': agent_id,
            'until_epoch': account.restricted_until,
            'reason': reason,
        })

    def exclude(self, agent_id: str, reason: str = 'report_strikes') -> bytes:
        account = self.account(agent_id)
        account.excluded = True
        logger.info(f"[{agent_id}] excluded from future coalitions ({reason})")
        return self._emit('exclusion', {'agent_id': agent_id, 'reason': reason})

    def eligible_for_coalition(self, agent_id: str) -> bool:
        account = self.account(agent_id)
        return account.privileges == Privilege.ACTIVE and not account.excluded

    def record_coalition(self, task_id: str, members: Sequence[str], task_type: Optional[str] = None) -> bytes:
        return self._emit(
            'coalition',
            {'task_id': task_id, 'task_type': task_type, 'members': sorted(members)},
            kind=RecordKind.COALITION_EVENT,
        )

    def record_event(self, event: str, fields: Mapping[str, object]) -> bytes:
        """Anchor an arbitrary contract-signed event (report rounds, posterior updates, alerts)."""
        return self._emit(event, fields)

    # --- reward pool and reporter slashing ---

    def reward(self, agent_id: str, amount: int, reason: str = 'honest_report') -> int:
        self.account(agent_id)
        return self._transfer(POOL, agent_id, min(amount, self.reward_pool), reason)

    def slash(self, agent_id: str, amount: int, reason: str = 'dishonest_report') -> int:
        account = self.account(agent_id)
        return self._transfer(agent_id, SINK, min(amount, account.stake), reason)

    # --- phase 2: disputes ---

    def open_dispute(
        self,
        claimant: str,
        respondent: str,
        claim_kind: str,
        evidence_record_ids: Sequence[bytes],
    ) -> Dispute:
        if claimant != CONTRACT_ID:
            self.account(claimant)
        self.account(respondent)
        if claim_kind not in CLAIM_KINDS:
            raise ArbitrationError(f"Unknown claim kind {claim_kind!r}")
        for rid in evidence_record_ids:
            if not self.ledger.contains(rid):
                raise UnknownEvidence(f"Evidence {rid.hex()[:16]} is not on the ledger")

        dispute = Dispute(
            dispute_id=f"dispute-{len(self.disputes) + 1:04d}",
            claimant=claimant,
            respondent=respondent,
            claim_kind=claim_kind,
            evidence_record_ids=list(evidence_record_ids),
            opened_epoch=self.current_epoch,
        )
        dispute.record_id = self._emit('dispute_opened', {
            'dispute_id': dispute.dispute_id,
            'claimant': claimant,
            'respondent': respondent,
            'claim_kind': claim_kind,
            'evidence': [rid.hex() for rid in dispute.evidence_record_ids],
        })
        self.disputes[dispute.dispute_id] = dispute
        logger.info(f"[{dispute.dispute_id}] {claimant} vs {respondent}: {claim_kind}")
        return dispute

    def _dispute(self, dispute: Dispute | str) -> Dispute:
        dispute_id = dispute if isinstance(dispute, str) else dispute.dispute_id
        try:
            return self.disputes[dispute_id]
        except KeyError:
            raise ArbitrationError(f"Unknown dispute {dispute_id}") from None

    def evaluate_evidence(self, dispute: Dispute | str) -> List[bool]:
        dispute = self._dispute(dispute)
        if dispute.status != DisputeStatus.OPEN:
            raise DisputeNotOpen(f"{dispute.dispute_id} is {dispute.status.value}")

        evidence: List[BehaviorRecord] = []
        for rid in dispute.evidence_record_ids:
            if not self.ledger.has_valid_proof(rid):
                raise EvidenceProofInvalid(f"Evidence {rid.hex()[:16]} has no valid inclusion proof")
            evidence.append(self.ledger.record(rid))

        respondent = self.accounts[dispute.respondent]
        verdicts = [bool(rule(respondent, evidence)) for rule in RULES.values()]
        dispute.verdicts = verdicts
        dispute.status = DisputeStatus.EVALUATED
        self._emit('dispute_evaluated', {'dispute_id': dispute.dispute_id, 'verdicts': verdicts})
        return verdicts

    def resolve_dispute(self, dispute: Dispute | str, verdicts: Optional[Sequence[bool]] = None) -> Resolution:
        dispute = self._dispute(dispute)
        if dispute.status != DisputeStatus.EVALUATED:
            raise DisputeNotEvaluated(f"{dispute.dispute_id} is {dispute.status.value}")
        verdicts = list(dispute.verdicts if verdicts is None else verdicts)
        n_true = sum(1 for v in verdicts if v)
        respondent = self.accounts[dispute.respondent]

        penalty = 0
        suspension = 0
        redistribution: Dict[str, int] = {}
        fee = 0
        if n_true:
            penalty = min(self.params.verdict_penalty * n_true, respondent.stake)
            suspension = self.params.base_suspension_epochs * 2 ** respondent.strikes
            recipients = sorted(a for a in self.accounts if a != respondent.agent_id)
            if recipients:
                share, remainder = divmod(penalty, len(recipients))
                for i, agent_id in enumerate(recipients):
                    amount = share + (remainder if i == 0 else 0)
                    if amount:
                        redistribution[agent_id] = self._transfer(
                            respondent.agent_id, agent_id, amount, f"penalty:{dispute.dispute_id}")
            elif penalty:
                redistribution[CONTRACT_ID] = self._transfer(
                    respondent.agent_id, SINK, penalty, f"penalty:{dispute.dispute_id}")
            if suspension:
                respondent.suspended_until = max(respondent.suspended_until, self.current_epoch + suspension - 1)
            respondent.strikes += 1
            respondent.monitored = True
            self._refresh_privileges()
        elif dispute.claimant != CONTRACT_ID:
            claimant = self.accounts[dispute.claimant]
            fee = self._transfer(
                claimant.agent_id, SINK, min(self.params.frivolous_fee, claimant.stake),
                f"frivolous:{dispute.dispute_id}")

        resolution = Resolution(
            dispute_id=dispute.dispute_id,
            verdicts=verdicts,
            penalty_tokens=penalty,
            suspension_epochs=suspension,
            redistribution=redistribution,
            flagged=n_true > 0,
            frivolous_fee=fee,
        )
        resolution.record_id = self._emit('resolution', {
            'dispute_id': dispute.dispute_id,
            'respondent': dispute.respondent,
            'verdicts': verdicts,
            'penalty_tokens': penalty,
            'suspension_epochs': suspension,
            'redistribution': redistribution,
            'flagged': resolution.flagged,
            'frivolous_fee': fee,
        })
        dispute.status = DisputeStatus.RESOLVED
        self.resolutions[dispute.dispute_id] = resolution
        logger.info(
            f"[{dispute.dispute_id}] resolved: verdicts={verdicts} penalty={penalty} suspension={suspension}")
        return resolution

    # --- bookkeeping ---

    def token_audit(self) -> TokenAudit:
        return TokenAudit(
            stakes={a: acc.stake for a, acc in sorted(self.accounts.items())},
            sink=self.sink,
            reward_pool=self.reward_pool,
            deposits=self.deposits,
            initial_pool=self.params.reward_pool,
        )

    def finalize(self) -> None:
        """Seal whatever is still pending so every decision carries a proof."""
        if self.ledger.pending:
            self.ledger.seal_block(self.current_epoch)


def audit_from_ledger(ledger: Ledger) -> TokenAudit:
    """Rebuild every balance by replaying contract events in append order."""
    stakes: Dict[str, int] = {}
    balances = {SINK: 0, POOL: 0}
    deposits = 0
    initial_pool = 0
    for record in ledger.records_in_order():
        if record.agent_id != CONTRACT_ID or record.kind != RecordKind.REPORT:
            continue
        fields = record.fields
        event = fields.get('event')
        if event == 'contract_created':
            initial_pool = int(fields['reward_pool'])
            balances[POOL] = initial_pool
        elif event == 'registration':
            stakes[fields['agent_id']] = int(fields['stake'])
            deposits += int(fields['stake'])
        elif event == 'token_transfer':
            amount = int(fields['amount'])
            for party, delta in ((fields['from'], -amount), (fields['to'], amount)):
                if party in balances:
                    balances[party] += delta
                else:
                    stakes[party] = stakes.get(party, 0) + delta
    return TokenAudit(
        stakes=dict(sorted(stakes.items())),
        sink=balances[SINK],
        reward_pool=balances[POOL],
        deposits=deposits,
        initial_pool=initial_pool,
    )
