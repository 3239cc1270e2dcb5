"""Exception hierarchy shared across the package.

The CLI maps ValidationError to exit code 2 and NumericalError to exit
code 3; everything else is a bug.
"""


class AfferentSimError(Exception):
    """Base class for all package errors."""


class ValidationError(AfferentSimError):
    """Bad user input: config fields, protocol files, CLI arguments."""


class NumericalError(AfferentSimError):
    """Numerical failure: singular systems, failed residual checks."""


class InvertedElementError(NumericalError):
    """A mesh element has a non-positive Jacobian at a quadrature point."""
