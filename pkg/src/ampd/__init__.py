"""Reinforcement-learning search over column mappings and heuristic-miner thresholds."""

__version__ = "0.1.0"
