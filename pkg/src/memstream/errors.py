"""Exception taxonomy shared by all engine modules."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EngineError):
    """Operands have incompatible dimensions."""


class ConfigError(EngineError):
    """A configuration value is missing, unknown, or out of range."""


class ContractError(EngineError):
    """A call violates an operation's preconditions (bad gate kind, missing trace, ...)."""


class TraceError(EngineError):
    """An attention trace is empty or inconsistent with the supplied state."""


class DivergenceError(EngineError):
    """The recurrent state left the finite domain. Carries the offending step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")
