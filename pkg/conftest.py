import numpy as np
import pytest

from regulus.arbitration import ArbitrationContract, ArbitrationParams
from regulus.ledger import BehaviorRecord, Ledger, LedgerSigner, RecordKind


class Population:
    """A ledger, a contract and one signer per registered agent."""

    def __init__(self, n_agents=4, params=None, stake=100, capabilities=('nav',), seed=0):
        self.ledger = Ledger()
        self.contract = ArbitrationContract(self.ledger, params or ArbitrationParams(), seed=seed)
        self.signers = {}
        for i in range(n_agents):
            agent_id = f"agent-{i:02d}"
            signer = LedgerSigner.derive(seed, agent_id)
            self.signers[agent_id] = signer
            self.contract.register_agent(agent_id, signer.public_key_bytes(), stake, capabilities)

    @property
    def agent_ids(self):
        return sorted(self.signers)

    def record(self, agent_id, fields, kind=RecordKind.SENSOR_READING, timestamp=0):
        epoch = self.contract.current_epoch
        return BehaviorRecord.create(self.signers[agent_id], epoch, kind, fields, timestamp)

    def submit(self, agent_id, fields=None, kind=RecordKind.SENSOR_READING, timestamp=0):
        record = self.record(agent_id, fields or {'tick': timestamp}, kind, timestamp)
        return self.contract.submit_behavior(agent_id, self.contract.current_epoch, record).record_id


@pytest.fixture
def population():
    return Population()


@pytest.fixture
def make_population():
    return Population


@pytest.fixture
def signed_ledger():
    """A ledger with four registered signers and no records."""
    ledger = Ledger()
    signers = {}
    for name in ('alice', 'bob', 'carol', 'dave'):
        signers[name] = LedgerSigner.derive(0, name)
        ledger.register_key(name, signers[name].public_key_bytes())
    return ledger, signers


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def quick_scenario():
    """A scenario document small enough to run end to end in a few seconds."""
    return {
        'seed': 3,
        'n_agents': 8,
        'n_epochs': 14,
        'tasks_per_epoch': 3,
        'policy_mix': {'honest': 5, 'colluder': 2, 'saboteur': 1},
        'forecasting': {'T': 20, 'epochs': 15, 'hidden': 32, 'window': 3, 'K': 2},
        'warmup_fraction': 0.5,
    }
