"""Single-cell self-supervised learning toolkit for 40x40 H&E nucleus patches."""

__version__ = "0.1.0"
