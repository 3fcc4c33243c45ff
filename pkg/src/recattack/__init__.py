"""White-box PGD attacks on a toy referring-expression grounder."""

__version__ = "0.1.0"
