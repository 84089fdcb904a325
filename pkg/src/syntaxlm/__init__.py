"""Syntactic transformer language models with stack/compose attention."""

__version__ = "0.1.0"
