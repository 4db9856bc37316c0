"""Exception hierarchy. Every runtime failure the CLI reports derives from PanelNNError."""


class PanelNNError(Exception):
    pass


class SchemaError(PanelNNError):
    pass


class ParseError(PanelNNError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyInputError(PanelNNError):
    pass


class DimensionError(PanelNNError, ValueError):
    pass


class InsufficientPeriodsError(PanelNNError):
    pass


class DivergenceError(PanelNNError):
    def __init__(self, epoch, message=None):
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class PathError(PanelNNError):
    pass


class SingularityError(PanelNNError):
    pass


class DomainError(PanelNNError, ValueError):
    pass


class DegenerateClusterError(PanelNNError):
    pass


class CovarianceInvalidError(PanelNNError):
    pass


class UnknownUnitError(PanelNNError, KeyError):
    def __init__(self, unit):
        super().__init__(f"unit {unit!r} was not present in the training data")
        self.unit = unit

    def __str__(self):
        return self.args[0]


class HarnessError(PanelNNError):
    pass


class ModelFormatError(PanelNNError):
    pass


class ConfigError(PanelNNError):
    pass
