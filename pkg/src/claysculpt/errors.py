"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class NoSolutionError(RuntimeError):
    """A robust estimator found no admissible hypothesis."""


class StallError(RuntimeError):
    """ICP lost all correspondences; ``transform`` holds the last estimate."""

    def __init__(self, message, transform):
        super().__init__(message)
        self.transform = transform


class EmptyClayError(InvalidInputError):
    """A scan contains no clay-labelled points."""


class NoBaseError(InvalidInputError):
    """Too few points near the bottom of a cloud to outline a base."""


class PipelineError(RuntimeError):
    """A preprocessing stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
