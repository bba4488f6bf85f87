"""Lensless human pose and shape toolkit.

Forward lensless simulation, Wiener reconstruction, a parametric body model,
mesh-aligned iterative regression, training losses with analytic gradients and
3D pose metrics, all in plain numpy.
"""

from .errors import ToolkitError

__version__ = "0.1.0"

__all__ = ["ToolkitError", "__version__"]
