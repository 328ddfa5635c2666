"""Monte Carlo certificates for consistency and forward performance of optimal portfolio problems."""

__version__ = "0.1.0"
