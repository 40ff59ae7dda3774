"""
Centralized configuration for the regulus multi-agent regulation engine
"""
from typing import Dict, List

# Logging
REGULUS_LOG_ENV = "REGULUS_LOG"
DEFAULT_LOG_LEVEL = "info"
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_LEVELS = {
    'error': 40,
    'info': 20,
    'debug': 10,
}

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Ledger
HASH_SIZE = 32
GENESIS_PREV_HASH = bytes(HASH_SIZE)
MERKLE_LEAF_PREFIX = b"\x00"
MERKLE_NODE_PREFIX = b"\x01"
CONTRACT_ID = "asc"  # identity the arbitration contract signs its own events with

RECORD_KINDS = [
    'decision_input', 'sensor_reading', 'action_log',     # low-level traces
    'task_assignment', 'cooperation_outcome',             # mid-level interaction metadata
    'coalition_event', 'report',                          # high-level semantic behaviors
]

# Arbitration contract
ARBITRATION_DEFAULTS: Dict = {
    'min_stake': 100,
    'initial_stake': 100,
    'slash_rate': 0.10,         # missing submission, rounded down
    'verdict_penalty': 5,       # tokens per true verdict
    'frivolous_fee': 1,
    'base_suspension_epochs': 1,  # doubles per prior strike
    'reward_pool': 10_000,
}

CLAIM_KINDS = ['capability_violation', 'deadline_violation', 'contradiction']

# Reputation engine
REPUTATION_DEFAULTS: Dict = {
    'decay': 0.95,
    'prior_alpha': 1.0,
    'prior_beta': 1.0,
    'tolerance': 0.15,
    'quorum': 3,
    'consensus': 'median',      # or 'mean'
    'honest_reward': 1,
    'dishonest_slash': 5,
    'strike_limit': 3,
    'collusion_gain': 1,
    'contexts': {
        'default': [0.25, 0.25, 0.25, 0.25],
    },
}

WEIGHT_TOLERANCE = 1e-9
TASK_FEATURE_NAMES = ['completion', 'timeliness', 'resource_contribution', 'peer_feedback']

# Diffusion forecaster
FEATURE_NAMES: List[str] = [
    'task_completion_rate',
    'mean_response_latency_normalized',
    'interaction_frequency_normalized',
    'stake_delta_normalized',
    'report_deviation',
    'coalition_co_occurrence',
]
N_FEATURES = len(FEATURE_NAMES)

FORECASTING_DEFAULTS: Dict = {
    'enabled': True,
    'window': 5,
    'schedule': 'cosine',
    'T': 1000,
    'beta_min': 1e-4,
    'beta_max': 0.02,
    'ema_factor': 0.8,
    'hidden': 128,
    'time_embedding': 32,
    'optimizer': 'sgd',         # 'adam' is opt-in
    'lr': 1e-3,
    'momentum': 0.9,
    'batch_size': 32,
    'epochs': 150,
    'seed': 0,
    't_star': None,             # None -> T // 20
    'K': 4,
    'percentile': 95,
    'calibration_draws': 8,     # noise draws per calibration window; max is kept
    'cutpoints': [0.95, 0.99, 0.999],
    'stake_scale': 10,          # tokens mapped onto half the stake-delta channel
    'latency_scale': 2.0,       # latency / (scale * allowed) -> [0, 1]
}

COSINE_SCHEDULE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999
MIN_CALIBRATION_SCORES = 20
CALIBRATION_SEED_BASE = 1_000_000
ALERT_ACTIONS = ['raise_alert', 'restrict_participation', 'escalate_to_arbitration']

# Checkpoint format
CHECKPOINT_MAGIC = b"RGLS"
CHECKPOINT_VERSION = 1

# Agent policies
POLICY_KINDS = ['honest', 'free_rider', 'colluder', 'exaggerator', 'saboteur']
BEHAVIORAL_ADVERSARIES = ['colluder', 'exaggerator', 'saboteur']

POLICY_DEFAULTS: Dict[str, Dict] = {
    'honest': {'answer_accuracy': 0.9, 'submission_probability': 1.0, 'report_bias': 0.0,
               'capability_overclaim': False, 'resource_level': 0.8, 'delay_ticks': 2,
               'misinformation_rate': 0.0},
    'free_rider': {'answer_accuracy': 0.9, 'submission_probability': 0.0, 'report_bias': 0.0,
                   'capability_overclaim': False, 'resource_level': 0.5, 'delay_ticks': 2,
                   'misinformation_rate': 0.0},
    'colluder': {'answer_accuracy': 0.6, 'submission_probability': 1.0, 'report_bias': 0.5,
                 'capability_overclaim': False, 'resource_level': 0.6, 'delay_ticks': 4,
                 'misinformation_rate': 0.0},
    'exaggerator': {'answer_accuracy': 0.5, 'submission_probability': 1.0, 'report_bias': 0.0,
                    'capability_overclaim': True, 'resource_level': 0.4, 'delay_ticks': 6,
                    'misinformation_rate': 0.0},
    'saboteur': {'answer_accuracy': 0.3, 'submission_probability': 1.0, 'report_bias': 0.0,
                 'capability_overclaim': False, 'resource_level': 0.3, 'delay_ticks': 15,
                 'misinformation_rate': 0.5},
}

# Scenario simulation
SIMULATION_DEFAULTS: Dict = {
    'seed': 0,
    'n_agents': 8,
    'n_epochs': 50,
    'tasks_per_epoch': 4,
    'coalition_size': 4,
    'capabilities_per_agent': 2,
    'task_types': ['nav', 'vision', 'planning', 'comms'],
    'ticks_per_epoch': 100,
    'task_deadline_ticks': 10,
    'warmup_fraction': 0.3,
    'k_clusters': 2,
    'aggregation_mode': 'reputation_weighted',
    'policy_mix': {'honest': 8},
    'policies': {},
}

AGGREGATION_MODES = ['non_cooperative', 'k_cluster', 'reputation_weighted']

REPORT_FILES = ['reputations.csv', 'events.csv', 'detection.csv', 'aggregation.csv', 'trajectories.csv', 'summary.json']


def validate_policy_kind(kind: str) -> bool:
    """
    Validates if a given policy kind is one of the known agent policies.

    Args:
        kind: The policy kind to validate.

    Returns:
        True if the kind is valid, False otherwise.
    """
    return kind in POLICY_KINDS


def validate_aggregation_mode(mode: str) -> bool:
    return mode in AGGREGATION_MODES
