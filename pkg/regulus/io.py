"""
File plumbing: scenario config documents, dotted overrides, the ledger export
format, report directories and the forecaster's CSV/JSON artifacts.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import (
    ARBITRATION_DEFAULTS,
    CONTRACT_ID,
    FEATURE_NAMES,
    FORECASTING_DEFAULTS,
    POLICY_DEFAULTS,
    REPUTATION_DEFAULTS,
    SIMULATION_DEFAULTS,
)
from .errors import InvalidConfig, LedgerFormatError, ShapeMismatch, UsageError
from .forecasting import Calibration
from .ledger import Block, BehaviorRecord, Ledger, RecordKind

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Mappings whose keys are user-chosen rather than part of the schema.
OPEN_MAPPINGS = {'policy_mix', 'reputation.contexts'}
# Mappings replaced wholesale instead of merged.
REPLACED_MAPPINGS = {'policy_mix'}


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

def default_config_document() -> Dict[str, object]:
    doc = copy.deepcopy(SIMULATION_DEFAULTS)
    doc['policies'] = copy.deepcopy(POLICY_DEFAULTS)
    doc['arbitration'] = copy.deepcopy(ARBITRATION_DEFAULTS)
    doc['reputation'] = copy.deepcopy(REPUTATION_DEFAULTS)
    doc['forecasting'] = copy.deepcopy(FORECASTING_DEFAULTS)
    return doc


def _merge(
    base: Dict[str, object],
    override: Mapping[str, object],
    prefix: str = '',
    replace_open: bool = True,
) -> Dict[str, object]:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if prefix.rstrip('.') not in OPEN_MAPPINGS and key not in base:
            raise InvalidConfig(f"Unknown config key {path!r}")
        current = base.get(key)
        if isinstance(current, dict) and not (replace_open and path in REPLACED_MAPPINGS):
            if not isinstance(value, Mapping):
                raise InvalidConfig(f"Config key {path!r} expects an object")
            _merge(current, value, f"{path}.", replace_open)
        else:
            base[key] = copy.deepcopy(value)
    return base


def merge_config(override: Mapping[str, object], base: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    """Deep-merge a scenario document onto the defaults; unknown keys raise InvalidConfig."""
    return _merge(base if base is not None else default_config_document(), override)


def _parse_value(text: str) -> object:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: Dict[str, object], pairs: Iterable[str]) -> Dict[str, object]:
    """Apply `a.b=value` pairs; values are parsed as JSON, else kept as strings."""
    for pair in pairs:
        key, sep, raw = pair.partition('=')
        if not sep or not key:
            raise InvalidConfig(f"Override {pair!r} is not of the form key=value")
        parts = key.split('.')
        nested: object = _parse_value(raw)
        for part in reversed(parts):
            nested = {part: nested}
        _merge(doc, nested, replace_open=False)
    return doc


def load_json(path: PathLike) -> object:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Path not found: {path}")
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path} is not valid JSON: {e}") from e


def load_config_document(path: Optional[PathLike] = None, overrides: Iterable[str] = ()) -> Dict[str, object]:
    doc = default_config_document()
    if path is not None:
        loaded = load_json(path)
        if not isinstance(loaded, Mapping):
            raise InvalidConfig(f"{path} must contain a JSON object")
        merge_config(loaded, doc)
    return apply_overrides(doc, overrides)


def load_scenario_config(path: Optional[PathLike] = None, overrides: Iterable[str] = ()):
    from .simulation import ScenarioConfig

    return ScenarioConfig.from_dict(load_config_document(path, overrides))


# ---------------------------------------------------------------------------
# Ledger export
# ---------------------------------------------------------------------------

def ledger_paths(path: PathLike) -> Tuple[Path, Path, Path]:
    """`<base>.jsonl`, `<base>.blocks.json`, `<base>.keys.json` for a base path or the .jsonl itself."""
    path = Path(path)
    base = path.with_suffix('') if path.suffix == '.jsonl' else path
    return (base.parent / f"{base.name}.jsonl",
            base.parent / f"{base.name}.blocks.json",
            base.parent / f"{base.name}.keys.json")


def export_ledger(ledger: Ledger, path: PathLike) -> Path:
    records_path, blocks_path, keys_path = ledger_paths(path)
    records_path.parent.mkdir(parents=True, exist_ok=True)
    heights = {rid: block.height for block in ledger.blocks for rid in block.record_ids}
    with open(records_path, 'w') as f:
        for record in ledger.records_in_order():
            entry = {**record.to_dict(), 'block': heights.get(record.record_id)}
            f.write(json.dumps(entry, sort_keys=True, separators=(',', ':')) + '\n')
    with open(blocks_path, 'w') as f:
        json.dump([b.to_dict() for b in ledger.blocks], f, indent=2, sort_keys=True)
    with open(keys_path, 'w') as f:
        json.dump({k: v.hex() for k, v in sorted(ledger.keys.items())}, f, indent=2, sort_keys=True)
    logger.info(f"[ledger] exported {len(ledger)} records in {ledger.height} blocks to {records_path}")
    return records_path


def _read_json_file(path: Path) -> object:
    if not path.exists():
        raise FileNotFoundError(f"Path not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise LedgerFormatError(f"{path} is not valid JSON: {e}") from e


def import_ledger(path: PathLike) -> Ledger:
    """Rebuild a ledger from its export and log every chain violation found on load."""
    records_path, blocks_path, keys_path = ledger_paths(path)
    if not records_path.exists():
        raise FileNotFoundError(f"Path not found: {records_path}")
    records: List[BehaviorRecord] = []
    with open(records_path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise LedgerFormatError(f"{records_path}:{lineno} is not valid JSON: {e}") from e
            records.append(BehaviorRecord.from_dict(entry))

    raw_keys = _read_json_file(keys_path)
    raw_blocks = _read_json_file(blocks_path)
    if not isinstance(raw_keys, dict) or not isinstance(raw_blocks, list):
        raise LedgerFormatError(f"{keys_path} must hold an object and {blocks_path} an array")
    try:
        keys = {str(k): bytes.fromhex(v) for k, v in raw_keys.items()}
    except (TypeError, ValueError) as e:
        raise LedgerFormatError(f"Bad public key hex in {keys_path}: {e}") from e
    ledger = Ledger.restore(keys, records, [Block.from_dict(b) for b in raw_blocks])
    violations = ledger.verify_chain()
    for violation in violations:
        logger.warning(f"[ledger] {records_path}: {violation}")
    if violations:
        logger.warning(f"[ledger] {records_path} failed verification in {len(violations)} places")
    return ledger


# ---------------------------------------------------------------------------
# Tables rebuilt from chain state
# ---------------------------------------------------------------------------

def events_from_ledger(ledger: Ledger) -> pd.DataFrame:
    """Accountability events (slashes, revocations, resolutions, alerts, ...) read back from contract records."""
    from .simulation import EVENT_COLUMNS

    rows = []
    for record in ledger.records_in_order():
        if record.agent_id != CONTRACT_ID or record.kind != RecordKind.REPORT:
            continue
        fields = record.fields
        event = fields.get('event')
        rid = record.record_id.hex()
        if event == 'epoch_report':
            for agent_id in fields['missing']:
                rows.append([fields['epoch'], 'slash', agent_id, fields['slashes'].get(agent_id, 0),
                             'missing_submission', rid])
                rows.append([fields['epoch'], 'revocation', agent_id, 0, f"restricted_until={fields['epoch'] + 1}", rid])
        elif event == 'resolution':
            rows.append([record.epoch, 'resolution', fields['respondent'], fields['penalty_tokens'],
                         f"{fields['dispute_id']}:suspend={fields['suspension_epochs']}", rid])
        elif event == 'forecast_alert':
            rows.append([fields['epoch'], 'alert', fields['agent_id'], 0, fields['action'], rid])
        elif event in ('restriction', 'exclusion'):
            rows.append([record.epoch, event, fields['agent_id'], 0, fields['reason'], rid])
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def reputations_from_ledger(ledger: Ledger) -> pd.DataFrame:
    """Last posterior per (epoch, agent) from the anchored reputation updates."""
    latest: Dict[Tuple[int, str], dict] = {}
    for record in ledger.records_in_order():
        if record.agent_id != CONTRACT_ID or record.kind != RecordKind.REPORT:
            continue
        fields = record.fields
        if fields.get('event') != 'reputation_update':
            continue
        latest[(record.epoch, fields['agent_id'])] = {
            'epoch': record.epoch,
            'agent_id': fields['agent_id'],
            'alpha': fields['alpha'],
            'beta': fields['beta'],
            'reputation': fields['reputation'],
        }
    rows = [latest[k] for k in sorted(latest)]
    return pd.DataFrame(rows, columns=['epoch', 'agent_id', 'alpha', 'beta', 'reputation'])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')


def write_json(payload: object, path: PathLike) -> None:
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def write_report(report, out_dir: PathLike) -> Path:
    """Write the report directory: CSV tables, summary.json and the ledger export."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(report.reputations, out / 'reputations.csv')
    _write_csv(report.events, out / 'events.csv')
    _write_csv(report.detection, out / 'detection.csv')
    _write_csv(report.aggregation, out / 'aggregation.csv')
    _write_csv(report.trajectories, out / 'trajectories.csv')
    if report.losses:
        _write_csv(pd.DataFrame({'epoch': range(len(report.losses)), 'loss': report.losses}), out / 'loss.csv')
    write_json(report.summary(), out / 'summary.json')
    export_ledger(report.ledger, out / 'ledger')
    logger.info(f"[report] wrote {out}")
    return out


# ---------------------------------------------------------------------------
# Forecaster artifacts
# ---------------------------------------------------------------------------

TRAJECTORY_KEY_COLUMNS = ['agent_id', 'end_epoch']


def load_trajectories(path: PathLike) -> Tuple[pd.DataFrame, np.ndarray, Optional[np.ndarray]]:
    """
    Read a trajectories CSV (one row per window step) into (keys, X, labels)
    with X shaped (N, W, d). Labels are None when the file has no label column.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Path not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in TRAJECTORY_KEY_COLUMNS + ['step'] + FEATURE_NAMES if c not in df.columns]
    if missing:
        raise UsageError(f"{path} is missing columns {missing}")
    if df.empty:
        return df[TRAJECTORY_KEY_COLUMNS], np.zeros((0, 0, len(FEATURE_NAMES))), None

    df = df.sort_values(TRAJECTORY_KEY_COLUMNS + ['step'], kind='mergesort')
    groups = df.groupby(TRAJECTORY_KEY_COLUMNS, sort=False)
    sizes = groups.size()
    if sizes.nunique() != 1:
        raise ShapeMismatch(f"{path} mixes window lengths {sorted(sizes.unique())}")
    window = int(sizes.iloc[0])
    x = df[FEATURE_NAMES].to_numpy(dtype=np.float64).reshape(-1, window, len(FEATURE_NAMES))
    keys = groups.head(1)[TRAJECTORY_KEY_COLUMNS].reset_index(drop=True)
    labels = None
    if 'label' in df.columns:
        labels = groups['label'].max().to_numpy(dtype=int)
    return keys, x, labels


def write_calibration(calibration: Calibration, params, path: PathLike) -> None:
    write_json({
        'percentile': calibration.percentile,
        'threshold': calibration.threshold,
        'honest_scores': [float(s) for s in calibration.honest_scores],
        'schedule': params.schedule,
        'T': params.T,
        'beta_min': params.beta_min,
        'beta_max': params.beta_max,
        't_star': params.t_star,
        'K': params.K,
        'calibration_draws': params.calibration_draws,
        'window': params.window,
        'cutpoints': list(params.cutpoints),
    }, path)


def read_calibration(path: PathLike) -> Tuple[Calibration, Dict[str, object]]:
    doc = load_json(path)
    try:
        scores = np.sort(np.asarray(doc['honest_scores'], dtype=np.float64))
        calibration = Calibration(scores, float(doc['percentile']), float(doc['threshold']))
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{path} is not a calibration file: {e}") from e
    keys = ('schedule', 'T', 'beta_min', 'beta_max', 't_star', 'K', 'calibration_draws', 'window', 'cutpoints')
    forecasting = {k: doc[k] for k in keys if k in doc}
    return calibration, forecasting
