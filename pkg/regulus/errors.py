"""
Exception hierarchy for regulus.

Errors caused by bad user input also derive from UsageError so the CLI can map
them to exit code 2.
"""


class RegulusError(Exception):
    """Base class for every domain error."""


class UsageError(RegulusError):
    """Bad input supplied by the caller (config, file format, shapes)."""


# --- ledger ---

class LedgerError(RegulusError):
    pass


class InvalidSignature(LedgerError, ValueError):
    pass


class DuplicateRecord(LedgerError, ValueError):
    pass


class MalformedPayload(LedgerError, ValueError):
    pass


class EmptyPool(LedgerError):
    pass


class EmptyLeaves(LedgerError, ValueError):
    pass


class UnknownRecord(LedgerError, KeyError):
    pass


class NotYetSealed(LedgerError):
    pass


class LedgerFormatError(LedgerError, UsageError):
    pass


# --- arbitration ---

class ArbitrationError(RegulusError):
    pass


class DuplicateAgent(ArbitrationError, ValueError):
    pass


class InsufficientStake(ArbitrationError, ValueError):
    pass


class UnknownAgent(ArbitrationError, KeyError):
    pass


class SuspendedAgent(ArbitrationError):
    pass


class WrongEpoch(ArbitrationError, ValueError):
    pass


class EpochAlreadyClosed(ArbitrationError):
    pass


class UnknownEvidence(ArbitrationError, KeyError):
    pass


class DisputeNotOpen(ArbitrationError):
    pass


class DisputeNotEvaluated(ArbitrationError):
    pass


class EvidenceProofInvalid(ArbitrationError):
    pass


# --- reputation ---

class ReputationError(RegulusError):
    pass


class WeightsNotNormalized(ReputationError, ValueError):
    pass


class FeatureOutOfRange(ReputationError, ValueError):
    pass


class ScoreOutOfRange(ReputationError, ValueError):
    pass


class DecayOutOfRange(ReputationError, ValueError):
    pass


class NoReports(ReputationError, ValueError):
    pass


class ReportOutOfRange(ReputationError, ValueError):
    pass


# --- forecasting ---

class ForecastingError(RegulusError):
    pass


class EmptyWindow(ForecastingError):
    pass


class InvalidRange(ForecastingError, ValueError):
    pass


class ShapeMismatch(ForecastingError, UsageError, ValueError):
    pass


class StepOutOfRange(ForecastingError, ValueError):
    pass


class EmptyDataset(ForecastingError, ValueError):
    pass


class InconsistentShapes(ForecastingError, ValueError):
    pass


class NonFiniteLoss(ForecastingError):
    pass


class InsufficientCalibrationData(ForecastingError, ValueError):
    pass


class NotCalibrated(ForecastingError):
    pass


class CheckpointError(ForecastingError, UsageError):
    pass


# --- simulation ---

class SimulationError(RegulusError):
    pass


class InvalidConfig(SimulationError, UsageError, ValueError):
    pass


class NoAnswers(SimulationError, ValueError):
    pass


class LabelMismatch(SimulationError, ValueError):
    pass
