"""Character-level output heads distilled from a token-level teacher."""

__version__ = "0.1.0"
