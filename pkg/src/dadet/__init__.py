"""Domain-adaptive two-stage detection with categorical regularization, desk scale."""

__version__ = "0.1.0"
