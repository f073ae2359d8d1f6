"""Desk-scale DeFIX: detect failures of an imitation-learned driving policy and fix them with RL specialists."""

__version__ = "0.1.0"
