"""Closed-loop learning of linear controllers by recurrent agents."""

__version__ = "0.1.0"
