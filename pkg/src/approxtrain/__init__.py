"""Training small CNNs for approximate hardware: stochastic computing,
approximate multipliers and analog accelerators with low-bit ADCs."""

__version__ = "0.1.0"
