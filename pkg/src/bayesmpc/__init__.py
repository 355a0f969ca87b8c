"""Sampling-based stochastic MPC with joint Bayesian inference.

The package is organised around five building blocks:

- :mod:`bayesmpc.models` -- state-space plants (scalar linear, rotary
  pendulum) with the derivative structure inference and control need;
- :mod:`bayesmpc.bayes` -- the posterior log-density over states,
  parameters and future disturbances, with exact gradients;
- :mod:`bayesmpc.hmc` -- Hamiltonian Monte Carlo with warmup adaptation;
- :mod:`bayesmpc.smpc` -- Monte Carlo cost, sigmoid-relaxed chance
  constraints and the log-barrier Newton continuation solver;
- :mod:`bayesmpc.loop` -- the closed-loop data-to-controller driver.

``bayesmpc.cli`` exposes the ``bayesmpc`` command with ``run``, ``sample``
and ``plan`` subcommands.
"""

from bayesmpc.models import (
    FurutaParams,
    LinearFirstOrderParams,
    SystemModel,
    make_furuta_model,
    make_linear_model,
    simulate_truth,
)

__version__ = "0.1.0"

__all__ = [
    "FurutaParams",
    "LinearFirstOrderParams",
    "SystemModel",
    "make_furuta_model",
    "make_linear_model",
    "simulate_truth",
    "__version__",
]
