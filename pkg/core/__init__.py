"""
Core module for the DIRL toolkit
Autodiff engine, networks and losses; trainer and evaluation import data/ and load on demand
"""

from . import errors
from . import autodiff
from . import networks
from . import losses

__all__ = ['errors', 'autodiff', 'networks', 'losses']
