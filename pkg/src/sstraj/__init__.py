"""Single-shot MRI acquisition simulation and trajectory optimization."""

__version__ = "0.1.0"

from .core import (
    CoilMaps,
    ComplexImage,
    KSpaceSamples,
    PhysicsLimits,
    ScanConfig,
    Trajectory,
    ValidationError,
    validate,
)

__all__ = [
    "CoilMaps",
    "ComplexImage",
    "KSpaceSamples",
    "PhysicsLimits",
    "ScanConfig",
    "Trajectory",
    "ValidationError",
    "validate",
    "__version__",
]
