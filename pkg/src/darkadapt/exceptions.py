"""Exception types shared across the package."""


class DarkAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(DarkAdaptError, ValueError):
    """An operation was called with arguments outside its contract."""


class AnnotationParseError(DarkAdaptError, ValueError):
    """Annotation text is malformed; message names the offending line."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class DomainMisuseError(DarkAdaptError):
    """An image tagged with the wrong domain was fed to a pipeline stage."""


class StateError(DarkAdaptError):
    """A component was used before reaching the required state."""


class TrainingError(DarkAdaptError):
    """Training produced a non-finite loss; carries the iteration index."""

    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")
