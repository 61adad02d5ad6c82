"""
Schemas for the DIRL toolkit
Experiment configuration and run records
"""

from . import config
from . import report

__all__ = ['config', 'report']
