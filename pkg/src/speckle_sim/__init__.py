"""Blind speckle structured-illumination microscopy: simulation, joint reconstruction, evaluation."""

__version__ = "0.1.0"

from .grid_ops import Grid, PsfModel  # noqa: E402
from .solver import PDState, SolverConfig, pd_solve  # noqa: E402

__all__ = ["Grid", "PsfModel", "SolverConfig", "PDState", "pd_solve", "__version__"]
