class DislabError(Exception):
    """Base class for domain errors raised by this package."""


class ConfigurationError(DislabError, ValueError):
    pass


class NumericDomainError(DislabError, ArithmeticError):
    pass


class IntegrityError(DislabError):
    """A persisted artifact failed validation.

    ``section`` names the offending file or block so the caller can report it.
    """

    def __init__(self, message, section=None):
        super().__init__(message if section is None else f"{section}: {message}")
        self.section = section


class TrainingAborted(NumericDomainError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
