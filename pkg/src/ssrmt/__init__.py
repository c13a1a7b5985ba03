"""Simple self-rewarding GRPO for machine translation."""

__version__ = "0.1.0"
