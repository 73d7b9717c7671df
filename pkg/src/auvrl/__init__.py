"""Differentiable underwater-vehicle simulation with RL and MPC controllers."""

__version__ = "0.1.0"
