"""Exception hierarchy for the equilibrium engine.

Every error raised on purpose derives from EngineError so callers (and the
CLI exit-code mapping) can distinguish engine failures from plain bugs.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class InputError(EngineError):
    """Rejected input: bad shapes, non-positive parameters, inconsistent specs."""


class ConfigError(EngineError):
    """Config file failed to parse or validate."""


class SingularEndowmentError(EngineError):
    """Endowment finite differences produced a non-finite quotient."""


class DriverOverflowError(EngineError):
    """Untruncated driver overflowed despite the exponential clamp."""

    def __init__(self, message: str, t: float | None = None, node: int | None = None):
        super().__init__(message)
        self.t = t
        self.node = node


class DivergenceError(EngineError):
    """Backward solve or path simulation left the blow-up guard.

    Carries the first offending location so reports can point at it.
    """

    def __init__(self, message: str, step: int | None = None, node: int | None = None,
                 path: int | None = None):
        super().__init__(message)
        self.step = step
        self.node = node
        self.path = path


class SchemeError(EngineError):
    """Scheme misuse: invalid grid, unsatisfied stability threshold, bad shapes."""


class OracleScaleError(EngineError):
    """Requested oracle lattice/quadrature cannot resolve the requested domain."""


class OracleUnsupportedError(EngineError):
    """Oracle applies only to one-dimensional constant-coefficient dynamics."""


class NonContractionError(EngineError):
    """Picard iteration failed to contract at the supplied weight.

    Attributes carry the measured factor and a suggested larger weight.
    """

    def __init__(self, message: str, factor: float, suggested_beta: float):
        super().__init__(message)
        self.factor = factor
        self.suggested_beta = suggested_beta


class FingerprintMismatchError(EngineError):
    """Stored solution does not match the economy described by the config."""


class InternalInvariantError(EngineError):
    """An internal consistency identity failed beyond tolerance (a bug guard)."""
