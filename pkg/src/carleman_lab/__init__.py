"""Numerical laboratory for Carleman-weighted inverse source recovery.

The package builds uniform grids on a space-time cylinder, plans admissible
Carleman weight parameters, manufactures inverse-problem instances with known
ground truth, checks the weighted energy inequalities that drive the theory,
and runs weighted least-squares reconstructions from one-sided lateral data.
"""

__version__ = "0.1.0"

from .errors import CarlemanLabError, SolverError, ValidationError

__all__ = ["CarlemanLabError", "SolverError", "ValidationError", "__version__"]
