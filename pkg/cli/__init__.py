"""
CLI module for the DIRL toolkit
Subcommand implementations behind main.py
"""

from . import commands

__all__ = ['commands']
