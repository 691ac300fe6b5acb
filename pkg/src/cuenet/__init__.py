"""Desk-scale video violence-detection inference stack.

Submodules are imported on demand; keeping this package root import-free
lets the command-line layer pin numeric-backend thread pools before the
backend loads.
"""

__version__ = "0.1.0"
