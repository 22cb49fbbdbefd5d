"""Exception types shared across the package."""


class HvacTradeError(Exception):
    """Base class for package errors."""


class InfeasibleError(HvacTradeError):
    """A scheduling problem has no feasible point (scenario authoring error)."""


class NonConvergenceError(HvacTradeError):
    """The trading loop hit its iteration cap before reaching tolerance."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class ProtocolViolation(HvacTradeError):
    """A peer sent a frame that breaks the message contract."""


class DecodeError(ProtocolViolation):
    """A wire frame could not be decoded; the message names the byte offset."""


class SynchronizationTimeout(HvacTradeError):
    """A barrier round did not hear from every agent in time."""

    def __init__(self, msg, missing=()):
        super().__init__(msg)
        self.missing = tuple(missing)


class ScenarioError(HvacTradeError):
    """A scenario file failed to parse or validate.

    `findings` lists every individual problem when more than one was
    collected."""

    def __init__(self, msg, findings=()):
        super().__init__(msg)
        self.findings = list(findings) or [str(msg)]
