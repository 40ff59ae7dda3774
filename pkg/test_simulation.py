from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from regulus.arbitration import AgentAccount, Privilege, deadline_violation
from regulus.errors import InvalidConfig, LabelMismatch, NoAnswers
from regulus.ledger import BehaviorRecord, Ledger, LedgerSigner, RecordKind
from regulus.reputation import collect_reports
from regulus.simulation import (
    AgentPolicy,
    AgentState,
    ScenarioConfig,
    Simulation,
    Task,
    aggregate_answers,
    confusion_metrics,
    evaluate_detection,
    peer_reports,
    policy_step,
    run_scenario,
    verify_accountability,
)


def _state(adversarial=True, partner=None, caps=('nav',)):
    return AgentState('agent-00', frozenset(caps), ('nav', 'vision', 'planning', 'comms'), partner, adversarial)


def _task(truth=1):
    return Task('e000-t00', 0, 'nav', truth, 0, 10)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_scenario_config_validation():
    config = ScenarioConfig.from_dict({'policy_mix': {'honest': 6, 'saboteur': 2}})
    assert config.n_agents == 8
    assert config.warmup_epochs == 15
    assert config.policies['saboteur'].delay_ticks == 15

    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'policy_mix': {'honest': 7}})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'policy_mix': {'honest': 7, 'spy': 1}})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'policies': {'honest': {'answer_accuracy': 1.5}}})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'policies': {'honest': {'charm': 1.0}}})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'aggregation_mode': 'oracle'})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({'forecasting': {'T': 0}})


def test_policy_overrides_and_adversarial_flag():
    policy = AgentPolicy.for_kind('colluder', {'report_bias': 0.3})
    assert policy.report_bias == 0.3
    assert policy.adversarial
    assert not AgentPolicy.for_kind('free_rider').adversarial
    with pytest.raises(InvalidConfig):
        AgentPolicy.for_kind('spy')


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def test_perfectly_accurate_honest_agent_is_always_right():
    policy = AgentPolicy.for_kind('honest', {'answer_accuracy': 1.0})
    for i in range(50):
        rng = np.random.default_rng(i)
        truth = i % 2
        actions = policy_step(policy, _task(truth), _state(), rng)
        assert actions.answer == truth
        assert actions.submits
        assert actions.claimed_capabilities == frozenset({'nav'})


def test_free_rider_never_submits():
    policy = AgentPolicy.for_kind('free_rider')
    assert not any(policy_step(policy, None, _state(), np.random.default_rng(i)).submits for i in range(20))


def test_colluder_inflates_partner_reports_and_gets_flagged(rng):
    colluder = AgentPolicy.for_kind('colluder')
    honest = AgentPolicy.for_kind('honest')
    inflated = peer_reports(colluder, _state(partner='agent-07'), {'agent-07': 0.3}, rng)['agent-07']
    assert inflated == pytest.approx(0.8, abs=0.1)
    fair = peer_reports(colluder, _state(partner='agent-07'), {'agent-05': 0.3}, rng)['agent-05']
    assert fair == pytest.approx(0.3, abs=0.1)

    reports = {f"h{i}": peer_reports(honest, _state(), {'s': 0.3}, rng)['s'] for i in range(3)}
    reports.update({'c1': inflated, 'c2': inflated})
    assert collect_reports('t', 's', reports).flags == {'c1', 'c2'}


def test_adversaries_act_honestly_before_their_phase():
    colluder = AgentPolicy.for_kind('colluder')
    quiet = peer_reports(colluder, _state(adversarial=False, partner='p'), {'p': 0.3}, np.random.default_rng(1))
    assert quiet['p'] == pytest.approx(0.3, abs=0.1)
    saboteur = AgentPolicy.for_kind('saboteur')
    assert policy_step(saboteur, _task(), _state(adversarial=False), np.random.default_rng(2)).delay <= 4


def test_exaggerator_overclaims_capabilities():
    actions = policy_step(AgentPolicy.for_kind('exaggerator'), None, _state(), np.random.default_rng(0))
    assert actions.claimed_capabilities == frozenset({'nav', 'vision', 'planning', 'comms'})


def test_saboteur_delay_produces_deadline_evidence():
    policy = AgentPolicy.for_kind('saboteur')
    actions = policy_step(policy, _task(), _state(), np.random.default_rng(3))
    assert actions.delay > 10

    signer = LedgerSigner.derive(0, 'agent-00')
    record = BehaviorRecord.create(signer, 0, RecordKind.COOPERATION_OUTCOME, {
        'task_id': 'e000-t00', 'completed': False, 'assigned_tick': 0,
        'completion_tick': actions.delay, 'deadline_tick': 10,
    }, actions.delay)
    account = AgentAccount('agent-00', signer.public_key_bytes(), 100)
    assert deadline_violation(account, [record])


# ---------------------------------------------------------------------------
# Aggregation and metrics
# ---------------------------------------------------------------------------

def test_aggregation_examples():
    equal = {'a': 0.5, 'b': 0.5, 'c': 0.5}
    assert aggregate_answers({'a': 1, 'b': 1, 'c': 0}, equal, 'reputation_weighted') == 1
    assert aggregate_answers({'a': 1, 'b': 0}, {'a': 0.9, 'b': 0.3}, 'reputation_weighted') == 1
    assert aggregate_answers({'a': 0, 'b': 1}, equal, 'reputation_weighted') == 0
    assert aggregate_answers({'b': 1, 'a': 0}, equal, 'reputation_weighted') == 0


def test_k_cluster_votes_within_then_across_clusters():
    answers = {'a': 1, 'b': 1, 'c': 0, 'd': 0, 'e': 0}
    clusters = [['a', 'b', 'c'], ['d', 'e']]
    assert aggregate_answers(answers, {}, 'k_cluster', clusters=clusters) == 1
    assert aggregate_answers(answers, {}, 'k_cluster') == 0


def test_non_cooperative_picks_one_agent():
    answers = {'a': 1, 'b': 0, 'c': 1, 'd': 0}
    picks = {aggregate_answers(answers, {}, 'non_cooperative', rng=np.random.default_rng(s)) for s in range(30)}
    assert picks == {0, 1}
    first = aggregate_answers(answers, {}, 'non_cooperative', rng=np.random.default_rng(9))
    assert first == aggregate_answers(answers, {}, 'non_cooperative', rng=np.random.default_rng(9))


def test_aggregation_errors():
    with pytest.raises(NoAnswers):
        aggregate_answers({}, {}, 'k_cluster')
    with pytest.raises(InvalidConfig):
        aggregate_answers({'a': 1}, {}, 'oracle')


def test_confusion_metric_examples():
    y_true = [True] * 10 + [False] * 10
    y_pred = [True] * 8 + [False] * 2 + [True] * 2 + [False] * 8
    m = confusion_metrics(y_true, y_pred)
    assert (m.tp, m.fp, m.fn, m.tn) == (8, 2, 2, 8)
    assert m.precision == pytest.approx(0.8)
    assert m.recall == pytest.approx(0.8)
    assert m.f1 == pytest.approx(0.8)

    vacuous = confusion_metrics([False] * 5, [False] * 5)
    assert (vacuous.precision, vacuous.recall, vacuous.f1) == (1.0, 1.0, 1.0)

    everything = confusion_metrics([True] + [False] * 9, [True] * 10)
    assert everything.precision == pytest.approx(0.1)
    assert everything.recall == 1.0


def test_evaluate_detection_uses_agent_epoch_keys():
    labels = {('a', 0): False, ('a', 1): True, ('b', 0): False, ('b', 1): True}
    alerts = [SimpleNamespace(agent_id='a', epoch=1), ('b', 0)]
    m = evaluate_detection(alerts, labels)
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 1)
    with pytest.raises(LabelMismatch):
        evaluate_detection([('c', 0)], labels)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@pytest.fixture(scope='module')
def quick_report():
    doc = {
        'seed': 3,
        'n_agents': 8,
        'n_epochs': 14,
        'tasks_per_epoch': 3,
        'policy_mix': {'honest': 5, 'colluder': 2, 'saboteur': 1},
        'forecasting': {'T': 20, 'epochs': 15, 'hidden': 32, 'window': 3, 'K': 2},
        'warmup_fraction': 0.5,
    }
    sim = Simulation(ScenarioConfig.from_dict(doc))
    return sim, sim.run()


def test_quick_scenario_report_shapes(quick_report):
    sim, report = quick_report
    assert len(report.reputations) == 8 * 14
    assert len(report.aggregation) == 3 * 14
    assert len(report.detection) == 8 * 7
    assert set(report.aggregation_accuracy) == {'non_cooperative', 'k_cluster', 'reputation_weighted'}
    assert len(report.losses) == 15
    assert len(report.trajectories) == 3 * len(sim.windows)
    assert set(report.trajectories['phase']) == {'warmup', 'live'}


def test_quick_scenario_labels_follow_injected_policies(quick_report):
    sim, report = quick_report
    adversaries = {a for a, p in sim.policies.items() if p.adversarial}
    assert len(adversaries) == 3
    positives = report.detection[report.detection['label']]
    assert set(positives['agent_id']) == adversaries
    assert (report.detection['epoch'] >= 7).all()


def test_quick_scenario_is_accountable_and_balanced(quick_report):
    sim, report = quick_report
    assert verify_accountability(report) == []
    assert report.ledger.verify_chain() == []
    assert report.ledger.pending == []
    assert report.token_audit['balanced']
    assert report.token_audit['ledger_replay_matches']
    summary = report.summary()
    assert summary['ledger']['violations'] == []
    assert summary['warmup_epochs'] == 7


def test_penalties_only_land_on_adversaries(quick_report):
    sim, report = quick_report
    honest = {a for a, p in sim.policies.items() if p.kind == 'honest'}
    penalized = report.events[(report.events['event'] == 'resolution') & (report.events['amount'] > 0)]
    assert honest.isdisjoint(penalized['agent_id'])
    assert (report.events['event'] != 'slash').all()


def test_same_seed_gives_identical_reports(quick_report, quick_scenario):
    _, first = quick_report
    second = run_scenario(ScenarioConfig.from_dict(quick_scenario))
    pd.testing.assert_frame_equal(first.reputations, second.reputations)
    pd.testing.assert_frame_equal(first.events, second.events)
    pd.testing.assert_frame_equal(first.detection, second.detection)
    pd.testing.assert_frame_equal(first.aggregation, second.aggregation)
    assert first.summary() == second.summary()


def test_different_seed_changes_the_run(quick_scenario):
    config = ScenarioConfig.from_dict({**quick_scenario, 'forecasting': {'enabled': False}, 'seed': 4})
    other = run_scenario(config)
    base = run_scenario(ScenarioConfig.from_dict({**quick_scenario, 'forecasting': {'enabled': False}}))
    assert not base.reputations.equals(other.reputations)


def test_free_riders_are_slashed_every_epoch():
    config = ScenarioConfig.from_dict({
        'seed': 11,
        'n_epochs': 50,
        'policy_mix': {'honest': 6, 'free_rider': 2},
        'forecasting': {'enabled': False},
    })
    sim = Simulation(config)
    report = sim.run()
    free = sorted(a for a, p in sim.policies.items() if p.kind == 'free_rider')
    assert len(free) == 2

    slashes = report.events[report.events['event'] == 'slash']
    assert set(slashes['agent_id']) == set(free)
    for agent_id in free:
        rows = slashes[slashes['agent_id'] == agent_id].sort_values('epoch')
        assert rows['epoch'].tolist() == list(range(50))
        stake, expected = 100, []
        for _ in range(50):
            expected.append(stake // 10)
            stake -= expected[-1]
        assert rows['amount'].tolist() == expected
        assert report.contract.account(agent_id).stake == stake
        assert report.contract.account(agent_id).privileges == Privilege.RESTRICTED

    revocations = report.events[report.events['event'] == 'revocation']
    assert len(revocations) == 2 * 50
    assert report.token_audit['balanced']
    assert verify_accountability(report) == []


def test_honest_population_is_never_slashed():
    config = ScenarioConfig.from_dict({
        'seed': 0,
        'n_epochs': 80,
        'tasks_per_epoch': 3,
        'warmup_fraction': 0.5,
        'policy_mix': {'honest': 8},
        'forecasting': {'T': 20, 'epochs': 20, 'hidden': 32, 'window': 3, 'K': 1},
    })
    report = run_scenario(config)
    assert not report.events['event'].isin(['slash', 'revocation']).any()
    penalties = report.events[report.events['event'] == 'resolution']['amount']
    assert (penalties == 0).all()
    assert len(report.detection) == 8 * 40
    assert not report.detection['label'].any()
    quiet = ~report.detection.groupby('epoch')['alerted'].any()
    assert len(quiet) == 40
    assert quiet.mean() >= 0.95
    assert report.metrics.tp == 0 and report.metrics.fn == 0


def test_ledger_only_has_registered_signers(quick_report):
    sim, report = quick_report
    signers = {r.agent_id for r in report.ledger.records_in_order()}
    assert signers <= set(sim.agent_ids) | {'asc'}
    assert isinstance(report.ledger, Ledger)
