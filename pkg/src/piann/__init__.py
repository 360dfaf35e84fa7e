"""Physics-informed attention network for two-phase displacement fronts.

Library layout:

- ``autodiff``: reverse-mode tape over float64 numpy arrays
- ``layers``: dense, GRU, and attention building blocks with a parameter registry
- ``physics``: fractional flow, analytic solution, and finite-volume reference
- ``grid``: discretized space-time domain shared by the solvers and the model
- ``model``: the encoder/attention/decoder network with hard initial and
  boundary conditions
- ``residual``: interior PDE residual and the training loss
- ``training``: Adam loop and binary checkpoints
- ``report``: error metrics, attention diagnostics, CSV and SVG artifacts
- ``cli``: command-line front end (``piann`` entry point)
"""

from piann.grid import GridSpec, SolutionField

__all__ = ["GridSpec", "SolutionField"]

__version__ = "0.1.0"
