"""Network meta-analysis of sparse networks borrowing from a dense subgroup."""

__version__ = "0.1.0"
