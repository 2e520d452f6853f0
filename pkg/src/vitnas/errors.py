"""Exception types shared across the package.

The CLI maps these onto process exit codes: SpecError -> 2, DataError -> 3,
TrainingAborted -> 4.
"""


class SpecError(ValueError):
    """Invalid search space, architecture, or run configuration."""


class ShapeError(ValueError):
    """Tensor shapes incompatible for the requested operation."""


class DataError(ValueError):
    """Corrupt or inconsistent dataset / checkpoint file."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; carries the offending iteration."""

    def __init__(self, iteration, arch_key, loss):
        self.iteration = iteration
        self.arch_key = arch_key
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at iteration {iteration} (arch {arch_key})"
        )


class InfeasibleConstraint(RuntimeError):
    """No architecture satisfying the parameter bounds could be sampled."""
