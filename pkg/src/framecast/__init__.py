"""Action-conditioned autoregressive frame generation on a synthetic sprite world."""

__version__ = "0.1.0"
