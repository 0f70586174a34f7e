"""Exception types shared across the package."""


class HypertuneError(Exception):
    """Base class for all package errors."""


class ValidationError(HypertuneError, ValueError):
    """Bad user input (maps to CLI exit status 2)."""


# speedmodel
class ProbeFailure(HypertuneError):
    pass


class NonMonotonic(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class InvalidFactor(ValidationError):
    pass


# planner
class MissingModel(ValidationError):
    pass


class Infeasible(HypertuneError):
    def __init__(self, node_id: str, message: str):
        super().__init__(message)
        self.node_id = node_id


class EmptyPlateau(UserWarning):
    """Anchor model never flattens; the largest probed batch is used."""


# monitor / retuner
class GenerationMismatch(HypertuneError):
    pass


class MissingReport(HypertuneError):
    pass


class InsufficientWindow(HypertuneError):
    pass


class NoEvidence(HypertuneError):
    pass


# simengine / cli
class ScenarioError(ValidationError):
    pass


class EmptyTrace(HypertuneError):
    pass


# livenet
class ProtocolError(HypertuneError):
    pass


class WorkerLost(HypertuneError):
    pass


class StepTimeout(HypertuneError):
    pass


class ConnectFailure(HypertuneError):
    pass
