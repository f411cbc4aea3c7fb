"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ContractError):
    """Array dimensions do not match what an operation requires."""


class ManifestError(ValueError):
    """A dataset manifest failed validation.

    ``pointer`` is a JSON-pointer-style path to the offending field.
    """

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, truncated, or has a bad magic/version."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or similar)."""
