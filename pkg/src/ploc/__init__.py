"""Patch-presence-test engine over a portable CFG interchange format.

Classifies binary functions as vulnerable, fixed, or irrelevant by
locating a security patch's code (and its control-flow context) through
anchor graphs built from compiler-stable values.
"""

__version__ = "0.1.0"
