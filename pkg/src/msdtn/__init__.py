"""Nonlinear multiscale substructuring with learned local DtN maps."""

from . import dtn, experiments, fem, mesh, substructure, surrogate

__all__ = ["mesh", "fem", "dtn", "substructure", "surrogate", "experiments"]
