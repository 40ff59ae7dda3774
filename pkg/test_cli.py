import json

import pandas as pd
import pytest

from config import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, FEATURE_NAMES
from regulus.cli import main

SCENARIO = {
    'seed': 2,
    'n_agents': 8,
    'n_epochs': 16,
    'tasks_per_epoch': 2,
    'warmup_fraction': 0.5,
    'policy_mix': {'honest': 7, 'free_rider': 1},
    'forecasting': {'T': 20, 'epochs': 5, 'hidden': 16, 'time_embedding': 8, 'window': 3, 'K': 1},
}


def _write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope='module')
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp('cli')
    config = _write_config(base / 'scenario.json', SCENARIO)
    assert main(['run', '--config', config, '--out', str(base / 'report')]) == EXIT_OK
    return base


def _stdout_json(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return [json.loads(line) for line in lines]


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def test_run_writes_the_report_directory(run_dir):
    report = run_dir / 'report'
    for name in ('reputations.csv', 'events.csv', 'detection.csv', 'aggregation.csv',
                 'trajectories.csv', 'summary.json', 'loss.csv',
                 'ledger.jsonl', 'ledger.blocks.json', 'ledger.keys.json'):
        assert (report / name).exists(), name
    assert len(pd.read_csv(report / 'reputations.csv')) == 8 * 16
    summary = json.loads((report / 'summary.json').read_text())
    assert summary['n_agents'] == 8
    assert summary['counts']['slashes'] == 16
    assert summary['token_audit']['balanced']


def test_run_prints_the_summary(tmp_path, capsys):
    config = _write_config(tmp_path / 'c.json', {**SCENARIO, 'forecasting': {'enabled': False}})
    assert main(['run', '--config', config, '--out', str(tmp_path / 'out'), '--set', 'n_epochs=3']) == EXIT_OK
    summary = _stdout_json(capsys)[-1]
    assert summary['n_epochs'] == 3
    assert summary['counts']['slashes'] == 3


def test_run_config_errors_exit_with_usage(tmp_path):
    assert main(['run', '--config', str(tmp_path / 'missing.json'), '--out', str(tmp_path)]) == EXIT_USAGE
    bad_mix = _write_config(tmp_path / 'mix.json', {'policy_mix': {'honest': 3}})
    assert main(['run', '--config', bad_mix, '--out', str(tmp_path / 'a')]) == EXIT_USAGE
    unknown = _write_config(tmp_path / 'key.json', {'n_robots': 3})
    assert main(['run', '--config', unknown, '--out', str(tmp_path / 'b')]) == EXIT_USAGE
    (tmp_path / 'broken.json').write_text('{"seed": ')
    assert main(['run', '--config', str(tmp_path / 'broken.json'), '--out', str(tmp_path / 'c')]) == EXIT_USAGE
    assert main(['run', '--set', 'seed']) == EXIT_USAGE
    assert main(['frobnicate']) == EXIT_USAGE


def test_same_seed_gives_byte_identical_reports(run_dir, tmp_path):
    config = _write_config(tmp_path / 'scenario.json', SCENARIO)
    assert main(['run', '--config', config, '--out', str(tmp_path / 'again')]) == EXIT_OK
    first = run_dir / 'report'
    for path in sorted(first.iterdir()):
        assert (tmp_path / 'again' / path.name).read_bytes() == path.read_bytes(), path.name


def test_seed_flag_changes_the_run(run_dir, tmp_path):
    config = _write_config(tmp_path / 'scenario.json', {**SCENARIO, 'forecasting': {'enabled': False}})
    assert main(['run', '--config', config, '--out', str(tmp_path / 'a'), '--seed', '2']) == EXIT_OK
    assert main(['run', '--config', config, '--out', str(tmp_path / 'b'), '--seed', '9']) == EXIT_OK
    assert (tmp_path / 'a' / 'reputations.csv').read_bytes() != (tmp_path / 'b' / 'reputations.csv').read_bytes()


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def test_verify_clean_export(run_dir, capsys):
    assert main(['verify', str(run_dir / 'report' / 'ledger.jsonl')]) == EXIT_OK
    assert _stdout_json(capsys) == []


def _copy_ledger(run_dir, dest):
    dest.mkdir()
    for suffix in ('.jsonl', '.blocks.json', '.keys.json'):
        (dest / f"ledger{suffix}").write_bytes((run_dir / 'report' / f"ledger{suffix}").read_bytes())
    return dest / 'ledger.jsonl'


def test_verify_detects_an_edited_payload(run_dir, tmp_path, capsys):
    path = _copy_ledger(run_dir, tmp_path / 'tampered')
    lines = path.read_text().splitlines()
    entry = json.loads(lines[3])
    payload = bytearray.fromhex(entry['payload'])
    payload[-2] ^= 0x01
    entry['payload'] = payload.hex()
    lines[3] = json.dumps(entry, sort_keys=True, separators=(',', ':'))
    path.write_text('\n'.join(lines) + '\n')

    assert main(['verify', str(path)]) == EXIT_FAILURE
    problems = _stdout_json(capsys)
    assert {p['kind'] for p in problems} == {'merkle_root'}
    assert [p['height'] for p in problems] == [entry['block']]


def test_verify_truncated_export_is_a_parse_failure(run_dir, tmp_path):
    path = _copy_ledger(run_dir, tmp_path / 'truncated')
    text = path.read_text()
    path.write_text(text[: text.index('\n') + 30])
    assert main(['verify', str(path)]) == EXIT_USAGE
    assert main(['verify', str(tmp_path / 'nowhere.jsonl')]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# query / export
# ---------------------------------------------------------------------------

def test_query_filters_sealed_records(run_dir, capsys):
    ledger = str(run_dir / 'report' / 'ledger.jsonl')
    assert main(['query', '--ledger', ledger, '--epochs', '2:3', '--kind', 'sensor_reading']) == EXIT_OK
    rows = _stdout_json(capsys)
    assert len(rows) == 7 * 2
    assert all(2 <= r['epoch'] <= 3 for r in rows)
    assert all(r['kind'] == 'sensor_reading' and 'tick' in r['fields'] for r in rows)

    agent_id = rows[0]['agent_id']
    assert main(['query', '--ledger', ledger, '--agent', agent_id]) == EXIT_OK
    mine = _stdout_json(capsys)
    assert mine and all(r['agent_id'] == agent_id for r in mine)
    assert [r['epoch'] for r in mine] == sorted(r['epoch'] for r in mine)

    assert main(['query', '--ledger', ledger, '--kind', 'gossip']) == EXIT_USAGE
    assert main(['query', '--ledger', ledger, '--epochs', 'two:three']) == EXIT_USAGE


def test_export_rebuilds_tables_from_the_ledger(run_dir, tmp_path, capsys):
    assert main(['export', '--ledger', str(run_dir / 'report' / 'ledger.jsonl'),
                 '--out', str(tmp_path / 'export')]) == EXIT_OK
    counts = _stdout_json(capsys)[-1]
    events = pd.read_csv(tmp_path / 'export' / 'events.csv')
    original = pd.read_csv(run_dir / 'report' / 'events.csv')
    key = ['epoch', 'agent_id', 'amount']
    pd.testing.assert_frame_equal(
        events[events['event'] == 'slash'][key].reset_index(drop=True),
        original[original['event'] == 'slash'][key].reset_index(drop=True),
    )
    reputations = pd.read_csv(tmp_path / 'export' / 'reputations.csv')
    assert counts['reputation_rows'] == len(reputations)
    assert set(reputations.columns) == {'epoch', 'agent_id', 'alpha', 'beta', 'reputation'}


# ---------------------------------------------------------------------------
# train / score
# ---------------------------------------------------------------------------

@pytest.fixture(scope='module')
def trained(run_dir):
    config = _write_config(run_dir / 'forecast.json', {'forecasting': SCENARIO['forecasting']})
    data = str(run_dir / 'report' / 'trajectories.csv')
    assert main(['train', '--config', config, '--data', data, '--out', str(run_dir / 'model')]) == EXIT_OK
    return run_dir, config, data


def test_train_writes_model_and_calibration(trained):
    run_dir, _, _ = trained
    model = run_dir / 'model'
    assert (model / 'model.rgls').read_bytes()[:4] == b'RGLS'
    assert len(pd.read_csv(model / 'loss.csv')) == 5
    calibration = json.loads((model / 'calibration.json').read_text())
    assert calibration['window'] == 3
    assert len(calibration['honest_scores']) >= 20


def test_score_writes_one_row_per_window(trained, tmp_path):
    run_dir, config, data = trained
    args = ['score', '--config', config, '--data', data,
            '--model', str(run_dir / 'model' / 'model.rgls'),
            '--calibration', str(run_dir / 'model' / 'calibration.json')]
    assert main(args + ['--out', str(tmp_path / 'scores')]) == EXIT_OK
    scores = pd.read_csv(tmp_path / 'scores' / 'scores.csv', keep_default_na=False)
    n_windows = len(pd.read_csv(data).groupby(['agent_id', 'end_epoch']))
    assert len(scores) == n_windows
    assert (scores['score'] >= 0).all()
    assert set(scores['action']) <= {'', 'raise_alert', 'restrict_participation', 'escalate_to_arbitration'}

    assert main(args + ['--out', str(tmp_path / 'again')]) == EXIT_OK
    assert (tmp_path / 'again' / 'scores.csv').read_bytes() == (tmp_path / 'scores' / 'scores.csv').read_bytes()


def test_score_rejects_a_different_window_length(trained, tmp_path):
    run_dir, config, _ = trained
    rows = [{'agent_id': 'x', 'end_epoch': 3, 'step': s, **{f: 0.5 for f in FEATURE_NAMES}} for s in range(4)]
    wide = tmp_path / 'wide.csv'
    pd.DataFrame(rows).to_csv(wide, index=False)
    assert main(['score', '--config', config, '--data', str(wide),
                 '--model', str(run_dir / 'model' / 'model.rgls'),
                 '--calibration', str(run_dir / 'model' / 'calibration.json'),
                 '--out', str(tmp_path / 'scores')]) == EXIT_USAGE
