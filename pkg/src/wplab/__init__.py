"""wplab: numerical laboratory for Weil-Petersson geometry on discrete fibers."""

__version__ = "0.1.0"
