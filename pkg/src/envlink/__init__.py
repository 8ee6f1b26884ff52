"""Environment-aware out-of-distribution link prediction on dynamic graphs."""

__version__ = "0.1.0"
