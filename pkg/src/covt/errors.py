"""Exception hierarchy shared across the package.

Every error carries its class name so the CLI can report it verbatim.
"""


class CovtError(Exception):
    """Base class for all package errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


class MissingField(CovtError):
    pass


class InvalidValue(CovtError):
    def __init__(self, key: str, detail: str = ""):
        self.key = key
        super().__init__(f"{key}: {detail}" if detail else key)


class ShapeMismatch(CovtError):
    pass


class BudgetExceeded(CovtError):
    pass


class RankTooLarge(CovtError):
    pass


class NonSquare(CovtError):
    pass


class EmptyTargets(CovtError):
    pass


class InvalidScene(CovtError):
    pass


class UnknownExpert(CovtError):
    pass


class UnknownStage(CovtError):
    pass


class MalformedThought(CovtError):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"at token {position}: {reason}")


class IoFailure(CovtError):
    pass


class MissingExpertCache(CovtError):
    pass


class NonFiniteLoss(CovtError):
    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"{component} loss is {value}")


class NoVisualSlots(CovtError):
    pass


class MissingExpertArtifacts(CovtError):
    pass
