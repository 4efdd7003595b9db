"""Desk-scale solver for path-dependent BSDE/2BSDE problems.

Path history is encoded with truncated log-signatures, a hidden state is
evolved by a discretised neural rough differential equation, and training
couples CVaR-tilted terminal objectives with drift-residual, HJB-penalty,
and Malliavin-supervised losses. Validation runs against closed-form and
Monte Carlo pricing oracles.
"""

__version__ = "0.1.0"
