"""Numerical laboratory for degenerate Timoshenko beams.

Submodules
----------
coefficients    degenerate stiffness profiles and admissibility checks
constants       closed-form constants, observability thresholds, decay rates
discretization  graded-mesh finite elements for the weighted forms
dynamics        implicit-midpoint time integration with exact energy balance
analysis        identity residuals, direct/inverse inequality margins, decay fits
hum             exact null-control synthesis via conjugate gradient
cli             batch front-end over TOML scenario configs
"""

__version__ = "0.1.0"
