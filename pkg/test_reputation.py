import pytest

from regulus.arbitration import ArbitrationParams
from regulus.errors import (
    DecayOutOfRange,
    FeatureOutOfRange,
    NoReports,
    ReportOutOfRange,
    ScoreOutOfRange,
    WeightsNotNormalized,
)
from regulus.reputation import (
    ContextWeights,
    ReputationEngine,
    ReputationParams,
    ReputationProfile,
    TaskFeatures,
    collect_reports,
    reputation,
    score_task,
    update_posterior,
)

UNIFORM = ContextWeights.uniform()


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def test_score_task_examples():
    assert score_task(TaskFeatures(1, 0.8, 0.5, 0.9), UNIFORM) == pytest.approx(0.8)
    assert score_task(TaskFeatures(0, 0.0, 0.0, 0.0), ContextWeights('nav', (0.7, 0.1, 0.1, 0.1))) == 0.0
    with pytest.raises(WeightsNotNormalized):
        score_task(TaskFeatures(1, 1.0, 1.0, 1.0), ContextWeights('bad', (0.5, 0.5, 0.5, 0.5)))
    with pytest.raises(WeightsNotNormalized):
        ContextWeights('neg', (1.2, -0.2, 0.0, 0.0)).validate()


def test_task_features_are_range_checked():
    with pytest.raises(FeatureOutOfRange):
        TaskFeatures(0.5, 0.5, 0.5, 0.5)
    with pytest.raises(FeatureOutOfRange):
        TaskFeatures(1, 1.5, 0.5, 0.5)
    assert TaskFeatures.from_delay(True, 2, 10, 0.5, 0.5).timeliness == pytest.approx(0.8)
    assert TaskFeatures.from_delay(True, 20, 10, 0.5, 0.5).timeliness == 0.0
    assert TaskFeatures.from_delay(False, 0, 10, 1.7, -0.1).resource_contribution == 1.0


def test_score_task_is_monotone_in_every_feature(rng):
    for _ in range(200):
        w = rng.dirichlet([1.0] * 4)
        weights = ContextWeights('ctx', tuple(float(x) for x in w / w.sum()))
        base = [float(x) for x in rng.random(3)]
        low = TaskFeatures(0, *base)
        assert score_task(TaskFeatures(1, *base), weights) >= score_task(low, weights)
        for i in range(3):
            bumped = list(base)
            bumped[i] = min(1.0, bumped[i] + float(rng.random()) * 0.5)
            assert score_task(TaskFeatures(0, *bumped), weights) >= score_task(low, weights) - 1e-12


def test_context_weights_come_from_params():
    params = ReputationParams.from_dict({'contexts': {'nav': [0.4, 0.3, 0.2, 0.1]}})
    engine = ReputationEngine(params)
    features = TaskFeatures(1, 0.0, 0.0, 0.0)
    assert engine.score(features, 'nav') == pytest.approx(0.4)
    assert engine.score(features, 'unknown') == pytest.approx(0.25)
    with pytest.raises(WeightsNotNormalized):
        ReputationParams.from_dict({'contexts': {'nav': [0.4, 0.4, 0.4, 0.4]}})


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('score, decay, alpha, beta', [
    (1.0, 1.0, 2.0, 1.0),
    (0.5, 1.0, 1.5, 1.5),
    (1.0, 0.9, 1.9, 0.9),
])
def test_update_posterior_examples(score, decay, alpha, beta):
    updated = update_posterior(ReputationProfile('a'), score, decay)
    assert updated.alpha == pytest.approx(alpha)
    assert updated.beta == pytest.approx(beta)
    assert reputation(updated) == pytest.approx(alpha / (alpha + beta))


def test_update_posterior_rejects_bad_inputs():
    with pytest.raises(ScoreOutOfRange):
        update_posterior(ReputationProfile('a'), 1.2, 0.9)
    with pytest.raises(DecayOutOfRange):
        update_posterior(ReputationProfile('a'), 0.5, 0.0)
    with pytest.raises(DecayOutOfRange):
        update_posterior(ReputationProfile('a'), 0.5, 1.1)


def test_reputation_examples_and_monotone_limit():
    assert reputation(ReputationProfile('a')) == 0.5
    assert reputation(ReputationProfile('a', 9.0, 1.0)) == pytest.approx(0.9)
    profile = ReputationProfile('a')
    previous = reputation(profile)
    for _ in range(200):
        profile = update_posterior(profile, 1.0, 1.0)
        assert reputation(profile) > previous
        previous = reputation(profile)
    assert previous > 0.99


def test_decay_bounds_evidence_mass(rng):
    decay = 0.9
    profile = ReputationProfile('a', 30.0, 20.0)
    for _ in range(500):
        profile = update_posterior(profile, float(rng.random()), decay)
    assert profile.evidence_mass <= 1.0 / (1.0 - decay) + 1e-9
    assert profile.alpha > 0 and profile.beta > 0


def test_recent_scores_weigh_more_under_decay():
    start = ReputationProfile('a')
    last_low = update_posterior(update_posterior(start, 0.9, 0.8), 0.1, 0.8)
    last_high = update_posterior(update_posterior(start, 0.1, 0.8), 0.9, 0.8)
    assert abs(last_low.reputation - 0.1) < abs(last_high.reputation - 0.1)
    assert abs(last_high.reputation - 0.9) < abs(last_low.reputation - 0.9)
    same_low = update_posterior(update_posterior(start, 0.9, 1.0), 0.1, 1.0)
    same_high = update_posterior(update_posterior(start, 0.1, 1.0), 0.9, 1.0)
    assert same_low.reputation == pytest.approx(same_high.reputation)


# ---------------------------------------------------------------------------
# Reporting game
# ---------------------------------------------------------------------------

def test_collect_reports_flags_the_outlier():
    reports = {'r1': 0.80, 'r2': 0.82, 'r3': 0.79, 'r4': 0.20}
    round_ = collect_reports('t1', 'subject', reports, tolerance=0.15)
    assert round_.consensus == pytest.approx(0.795)
    assert round_.flags == {'r4'}


def test_collect_reports_quorum_and_identical_reports():
    assert collect_reports('t', 's', {'a': 0.6, 'b': 0.6, 'c': 0.6}).flags == set()
    below = collect_reports('t', 's', {'a': 0.9, 'b': 0.1})
    assert below.flags == set()
    assert below.consensus == pytest.approx(0.5)
    assert collect_reports('t', 's', {'a': 0.2, 'b': 0.3, 'c': 0.9}, consensus='mean').consensus == pytest.approx(
        (0.2 + 0.3 + 0.9) / 3)


def test_collect_reports_errors():
    with pytest.raises(NoReports):
        collect_reports('t', 's', {})
    with pytest.raises(ReportOutOfRange):
        collect_reports('t', 's', {'a': 1.5})


def test_apply_payoffs_rewards_agreement_and_slashes_outliers(population):
    engine = ReputationEngine(contract=population.contract)
    reports = {'agent-00': 0.8, 'agent-01': 0.82, 'agent-02': 0.79, 'agent-03': 0.2}
    round_ = engine.collect('t1', 'agent-00', reports)
    result = engine.apply_payoffs(round_, epoch=0)

    assert result.token_deltas == {'agent-00': 1, 'agent-01': 1, 'agent-02': 1, 'agent-03': -5}
    assert population.contract.account('agent-01').stake == 101
    assert population.contract.account('agent-03').stake == 95
    assert engine.strikes == {'agent-03': 1}
    assert engine.profile('agent-03').beta == pytest.approx(0.95 * 1.0 + 1.0)
    assert engine.profile('agent-01').alpha == pytest.approx(0.95 * 1.0 + 1.0)
    assert population.contract.token_audit().balanced


def test_subject_is_updated_with_consensus():
    engine = ReputationEngine()
    round_ = engine.collect('t', 'subject', {'a': 0.6, 'b': 0.6, 'c': 0.6})
    result = engine.apply_payoffs(round_)
    assert result.token_deltas == {'a': 1, 'b': 1, 'c': 1}
    subject = engine.profile('subject')
    assert subject.alpha == pytest.approx(0.95 + 0.6)
    assert subject.beta == pytest.approx(0.95 + 0.4)


def test_flagged_reporter_with_small_stake_floors_at_zero(make_population):
    pop = make_population(n_agents=4, params=ArbitrationParams(min_stake=0), stake=3)
    engine = ReputationEngine(contract=pop.contract)
    reports = {'agent-00': 0.5, 'agent-01': 0.5, 'agent-02': 0.5, 'agent-03': 1.0}
    result = engine.apply_payoffs(engine.collect('t', 'agent-00', reports))
    assert result.token_deltas['agent-03'] == -3
    assert pop.contract.account('agent-03').stake == 0
    assert pop.contract.account('agent-03').report_strikes == 1


def test_three_strikes_exclude_from_coalitions(population):
    engine = ReputationEngine(contract=population.contract)
    reports = {'agent-00': 0.5, 'agent-01': 0.5, 'agent-02': 0.5, 'agent-03': 0.0}
    excluded = []
    for i in range(3):
        excluded.append(engine.apply_payoffs(engine.collect(f"t{i}", 'agent-00', reports)).excluded)
    assert excluded == [[], [], ['agent-03']]
    assert not population.contract.eligible_for_coalition('agent-03')
    assert population.ledger.contains(engine.exclusion_records['agent-03'])


def test_every_posterior_update_is_anchored(population):
    engine = ReputationEngine(contract=population.contract)
    engine.update('agent-00', 0.7, epoch=0)
    engine.apply_payoffs(engine.collect('t', 'agent-01', {'agent-00': 0.4, 'agent-02': 0.5, 'agent-03': 0.45}))
    population.contract.finalize()

    updates = [
        r for r in population.ledger.records_in_order()
        if r.agent_id == 'asc' and r.fields.get('event') == 'reputation_update'
    ]
    assert len(updates) == 1 + 3 + 1
    assert all(population.ledger.has_valid_proof(r.record_id) for r in updates)
    assert updates[0].fields['reputation'] == pytest.approx(1.65 / 2.9)


def test_snapshots_accumulate_trajectories():
    engine = ReputationEngine()
    engine.update('a', 1.0)
    engine.snapshot(0, ['a', 'b'])
    engine.update('b', 0.0)
    engine.snapshot(1, ['a', 'b'])
    table = engine.trajectories()
    assert list(table.columns) == ['epoch', 'agent_id', 'alpha', 'beta', 'reputation']
    assert len(table) == 4
    assert table.loc[(table.epoch == 1) & (table.agent_id == 'b'), 'reputation'].item() == pytest.approx(
        0.95 / (0.95 + 1.95))
