"""Novelty scoring of research grants against their recent past, and the
citation studies built on those scores."""

__version__ = "0.1.0"
