"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class PatchnfError(Exception):
    """Base class for all package errors."""


class ConfigError(PatchnfError):
    """Invalid configuration or usage (bad flag combination, constraint violation)."""


class DataError(PatchnfError):
    """Malformed or inconsistent input data (files, manifests, tensors)."""


class NumericalError(PatchnfError):
    """Non-finite values or other numerical failures during computation."""
