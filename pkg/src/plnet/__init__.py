"""Part-loss networks: joint global and per-part classification losses for re-identification."""

__version__ = "0.1.0"
