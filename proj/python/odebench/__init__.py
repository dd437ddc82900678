"""MAGI vs PINN benchmark for ODE inverse problems."""

from ._odebench import *  # noqa: F401,F403
from ._odebench import __doc__  # noqa: F401
