"""Closed-loop test-time adaptation on synthetic desk-scale tasks.

A frozen main network is adapted at test time either by explicit gradient
descent on a proxy loss (test-time optimization) or by a small learned
controller that emits feature-wise modulation parameters in a single
forward pass. The package bundles the numerics (a minimal reverse-mode
autodiff engine), network builders, procedural task generators, synthetic
distribution shifts, adaptation-signal generators, the adaptation engine,
and a benchmarking harness.
"""

__version__ = "0.1.0"

from . import autodiff

__all__ = ["autodiff", "__version__"]
