"""chrforge: optimizing compiler and store engine for ground CHR programs."""

__version__ = "0.1.0"
