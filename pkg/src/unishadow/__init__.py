"""Self-supervised shadow removal with a shared residual generator and a WGAN-GP critic."""

__version__ = "0.1.0"
