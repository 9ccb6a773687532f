"""Morphing-based implicit head avatars.

Canonical occupancy/texture/deformation fields trained from rendered
frames via non-rigid ray marching, with analytically derived gradients
through the root-finding steps. Includes a discrete morphable head used
both as deformation prior and synthetic-data source, a CLI, and an HTTP
render service.
"""

__version__ = "0.1.0"

from .config import Config, load_config  # noqa: F401
from .errors import (  # noqa: F401
    InvalidInputError,
    InvalidStateError,
    MorphheadError,
    TrainingDivergedError,
)
