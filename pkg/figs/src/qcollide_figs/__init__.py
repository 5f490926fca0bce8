"""Figure scripts for the collision-model trajectory simulator outputs."""

__version__ = "0.1.0"

from .io import SchemaError, read_compare, read_ensemble, read_histogram, read_trajectory
from .render import KINDS, FigureJob, render
