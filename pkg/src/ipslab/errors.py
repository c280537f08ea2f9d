"""Exception types shared across the package."""

from __future__ import annotations


class IpsLabError(Exception):
    """Base class for all package errors."""


class GridError(IpsLabError, ValueError):
    """Invalid grid construction or mismatched field shapes."""


class PotentialError(IpsLabError, ValueError):
    """Obstacle geometry or potential sampling rejected."""


class SolverError(IpsLabError, RuntimeError):
    """Linear solve failed to reach the requested tolerance."""


class NearSingularError(SolverError):
    """Operator judged too close to singular for trustworthy solves."""


class EigenIterationError(SolverError):
    """Smallest-eigenvalue iteration did not converge."""


class SizeGuardError(IpsLabError, ValueError):
    """Problem size exceeds a guard intended to keep work desk-scale."""


class KernelError(IpsLabError, ValueError):
    """Kernel evaluated too close to its singular point, or bad geometry."""


class QuadratureError(IpsLabError, RuntimeError):
    """Adaptive quadrature failed to meet its tolerance."""


class NeedleError(IpsLabError, ValueError):
    """Invalid needle geometry."""


class IndicatorError(IpsLabError, ValueError):
    """Indicator evaluation rejected its probe point or mode."""


class SideBError(IpsLabError, ValueError):
    """Membership-test input or verdict bookkeeping rejected."""


class ConfigError(IpsLabError, ValueError):
    """Experiment configuration failed validation."""
