"""Exception types shared across the package."""


class DataError(Exception):
    """A dataset, checkpoint, or exported file is missing or malformed."""


class DivergenceError(Exception):
    """Training degraded past the divergence guard and was aborted."""


class UsageError(Exception):
    """Command line or configuration misuse."""
