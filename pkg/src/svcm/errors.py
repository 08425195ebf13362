"""Exception hierarchy. CLI exit codes: data/config problems map to 1,
numerical failures to 2."""


class SvcmError(Exception):
    pass


class DataError(SvcmError):
    """Malformed input data (bad CSV, invariant violations)."""


class ConfigError(SvcmError):
    """Invalid or unknown configuration."""


class NumericalError(SvcmError):
    """A solver or smoother could not produce a usable result."""


class RankDeficiencyError(NumericalError):
    def __init__(self, block, pivot):
        self.block = block
        self.pivot = pivot
        super().__init__(
            f"rank-deficient normal equations in block {block} "
            f"(smallest pivot {pivot:.3e})"
        )


class SingularSmootherError(NumericalError):
    def __init__(self, where, detail):
        super().__init__(f"singular local system at {where}: {detail}")


class PipelineError(NumericalError):
    """Wraps a failure with the pipeline step it occurred in."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {cause}")
