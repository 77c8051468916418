"""Numerical laboratory for Finsler metric measure spaces."""

import jax

# Tensor identities are checked at 1e-10 and tighter.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
