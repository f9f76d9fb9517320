"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto stable exit codes: configuration and contract
errors exit 2, numerical failures exit 3, I/O errors (plain OSError) exit 4.
"""


class GpMheError(Exception):
    """Base class for all library errors."""


class ConfigurationError(GpMheError):
    """Invalid or inconsistent user-supplied configuration."""


class ContractViolationError(GpMheError):
    """A caller violated a documented precondition (e.g. dimension mismatch)."""


class NumericalError(GpMheError):
    """A numerical operation failed beyond the documented recovery policy."""
