"""Class-incremental learning with a dynamic residual classifier."""

__version__ = "0.1.0"
