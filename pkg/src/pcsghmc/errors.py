"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
runtime divergence aborts exit 2, and archive/serialization problems exit 3.
"""


class ConfigError(ValueError):
    """Invalid configuration detected before a run starts."""


class DivergenceAbort(RuntimeError):
    """A run was aborted because the chain ensemble diverged irrecoverably."""


class ArchiveError(IOError):
    """A chain archive or checkpoint could not be read or written."""
