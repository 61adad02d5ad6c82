"""
Data module for the DIRL toolkit
Synthetic domains, mini-batch construction and dataset files
"""

from . import synthetic
from . import batching
from . import io

__all__ = ['synthetic', 'batching', 'io']
