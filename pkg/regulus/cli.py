import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config import DEFAULT_LOG_LEVEL, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, LOG_FORMAT, LOG_LEVELS, REGULUS_LOG_ENV
from .diffusion import load_checkpoint, save_checkpoint
from .errors import RegulusError, UsageError
from .forecasting import ForecastParams, Forecaster, alert_action
from .io import (
    events_from_ledger,
    import_ledger,
    load_config_document,
    load_scenario_config,
    load_trajectories,
    read_calibration,
    reputations_from_ledger,
    write_calibration,
    write_report,
)
from .ledger import QueryFilter, RecordKind
from .simulation import run_scenario

logger = logging.getLogger(__name__)


def configure_logging() -> None:
    load_dotenv()
    name = os.getenv(REGULUS_LOG_ENV, DEFAULT_LOG_LEVEL).strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, LOG_LEVELS[DEFAULT_LOG_LEVEL]), format=LOG_FORMAT, stream=sys.stderr, force=True)
    if name not in LOG_LEVELS:
        logger.warning(f"Unknown {REGULUS_LOG_ENV}={name!r}; using info")


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def _overrides(args) -> List[str]:
    pairs = list(args.set or [])
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    return pairs


def _forecast_params(args) -> ForecastParams:
    doc = load_config_document(args.config, _overrides(args))
    return ForecastParams.from_dict(doc['forecasting'])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = load_scenario_config(args.config, _overrides(args))
    report = run_scenario(config, progress=args.progress)
    write_report(report, args.out)
    _emit(report.summary())
    return EXIT_OK


def cmd_train(args) -> int:
    params = _forecast_params(args)
    _, x, labels = load_trajectories(args.data)
    if labels is not None:
        x = x[labels == 0]
    train, calibration = x[0::2], x[1::2]
    forecaster = Forecaster(params).fit(train, calibration, progress=args.progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(forecaster.model, out / 'model.rgls')
    pd.DataFrame({'epoch': range(len(forecaster.losses)), 'loss': forecaster.losses}).to_csv(
        out / 'loss.csv', index=False, float_format='%.10g', lineterminator='\n')
    write_calibration(forecaster.calibration, params, out / 'calibration.json')
    _emit({
        'n_train': int(len(train)),
        'n_calibration': int(len(calibration)),
        'final_loss': forecaster.losses[-1] if forecaster.losses else None,
        'threshold': forecaster.calibration.threshold,
    })
    return EXIT_OK


def cmd_score(args) -> int:
    params = _forecast_params(args)
    calibration, stored = read_calibration(args.calibration)
    stored = {k: tuple(v) if k == 'cutpoints' else v for k, v in stored.items()}
    params = replace(params, **stored)
    forecaster = Forecaster(params)
    forecaster.model = load_checkpoint(args.model)
    forecaster.calibration = calibration

    keys, x, _ = load_trajectories(args.data)
    scores = forecaster.score(x, seed=args.seed or 0) if len(x) else np.zeros(0)
    rows = []
    for (agent_id, end_epoch), score in zip(keys.itertuples(index=False, name=None), scores):
        probability = calibration.deviation_probability(float(score))
        rows.append({
            'agent_id': agent_id,
            'epoch': int(end_epoch),
            'score': float(score),
            'deviation_probability': probability,
            'action': alert_action(probability, params.cutpoints) or '',
        })
    table = pd.DataFrame(rows, columns=['agent_id', 'epoch', 'score', 'deviation_probability', 'action'])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / 'scores.csv', index=False, float_format='%.10g', lineterminator='\n')
    _emit({
        'n_scored': int(len(table)),
        'threshold': calibration.threshold,
        'above_threshold': int((table['score'] > calibration.threshold).sum()),
        'alerts': int((table['action'] != '').sum()),
    })
    return EXIT_OK


def _parse_epochs(text: str):
    lo, sep, hi = text.partition(':')
    try:
        return (int(lo), int(hi if sep else lo))
    except ValueError:
        raise UsageError(f"--epochs expects LO:HI, got {text!r}") from None


def cmd_query(args) -> int:
    ledger = import_ledger(args.ledger)
    try:
        kind = RecordKind(args.kind) if args.kind else None
    except ValueError:
        raise UsageError(f"Unknown record kind {args.kind!r}") from None
    flt = QueryFilter(
        agent_id=args.agent,
        epoch_range=_parse_epochs(args.epochs) if args.epochs else None,
        kind=kind,
    )
    for record in ledger.query(flt):
        print(json.dumps({**record.to_dict(), 'fields': record.fields}, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    ledger = import_ledger(args.ledger)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events = events_from_ledger(ledger)
    reputations = reputations_from_ledger(ledger)
    events.to_csv(out / 'events.csv', index=False, lineterminator='\n')
    reputations.to_csv(out / 'reputations.csv', index=False, float_format='%.10g', lineterminator='\n')
    _emit({'events': int(len(events)), 'reputation_rows': int(len(reputations))})
    return EXIT_OK


def cmd_verify(args) -> int:
    ledger = import_ledger(args.ledger)
    problems = [{'height': v.height, 'kind': v.kind, 'detail': v.detail} for v in ledger.verify_chain()]
    for block in ledger.blocks:
        for rid in block.record_ids:
            if not ledger.has_valid_proof(rid):
                problems.append({'height': block.height, 'kind': 'inclusion_proof', 'detail': rid.hex()})
    for problem in problems:
        _emit(problem)
    if problems:
        logger.error(f"[verify] {len(problems)} violations in {args.ledger}")
        return EXIT_FAILURE
    logger.info(f"[verify] {len(ledger)} records in {ledger.height} blocks verified")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='regulus', description="Regulated multi-agent collaboration on a Merkle-anchored ledger")
    sub = parser.add_subparsers(dest='command', required=True)

    def scenario_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument('--config', type=str, default=None, help='Scenario JSON document')
        p.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a config key (repeatable)')
        p.add_argument('--seed', type=int, default=None, help='Alias for --set seed=N')
        p.add_argument('--progress', action='store_true', help='Show progress bars on stderr')

    p = sub.add_parser('run', help='Run a scenario and write its report directory')
    scenario_flags(p)
    p.add_argument('--out', type=str, default='out', help='Report directory')
    p.set_defaults(func=cmd_run)

    p = sub.add_parser('train', help='Train the forecaster on a trajectories CSV')
    scenario_flags(p)
    p.add_argument('--data', type=str, required=True, help='trajectories.csv')
    p.add_argument('--out', type=str, default='model', help='Directory for model.rgls, loss.csv, calibration.json')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('score', help='Score trajectories with a trained forecaster')
    scenario_flags(p)
    p.add_argument('--data', type=str, required=True, help='trajectories.csv')
    p.add_argument('--model', type=str, required=True, help='Checkpoint written by train')
    p.add_argument('--calibration', type=str, required=True, help='calibration.json written by train')
    p.add_argument('--out', type=str, default='scores', help='Directory for scores.csv')
    p.set_defaults(func=cmd_score)

    p = sub.add_parser('query', help='Print matching sealed records as JSON Lines')
    p.add_argument('--ledger', type=str, required=True, help='Ledger export (.jsonl)')
    p.add_argument('--agent', type=str, default=None)
    p.add_argument('--epochs', type=str, default=None, help='LO:HI inclusive')
    p.add_argument('--kind', type=str, default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser('export', help='Rebuild event and reputation tables from a ledger export')
    p.add_argument('--ledger', type=str, required=True, help='Ledger export (.jsonl)')
    p.add_argument('--out', type=str, default='export', help='Output directory')
    p.set_defaults(func=cmd_export)

    p = sub.add_parser('verify', help='Check chain linkage, Merkle roots and every inclusion proof')
    p.add_argument('ledger', type=str, help='Ledger export (.jsonl)')
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: List[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as e:
        logger.error(f"[{args.command}] {e}")
        return EXIT_USAGE
    except RegulusError as e:
        logger.error(f"[{args.command}] {e}")
        return EXIT_FAILURE
    except Exception:
        logger.exception(f"[{args.command}] unexpected failure")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
