"""Graph-conditioned dialogue response generation toolkit."""

__version__ = "0.1.0"
