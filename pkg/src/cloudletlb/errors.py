"""Exception types shared across the package."""


class UnstableQueueError(ValueError):
    """Raised when a steady-state result is requested for rho >= 1."""


class InfeasibleAllocationError(ValueError):
    """Raised when a slicing instance has no feasible allocation (n_i < M)."""


class ConfigError(ValueError):
    """Raised on malformed experiment configs; carries a path-to-field hint."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class TraceFormatError(ValueError):
    """Raised on malformed trace files; carries the offending line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")
