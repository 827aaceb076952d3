"""One-step conditional generation with training-time drifting fields."""

__version__ = "0.1.0"
