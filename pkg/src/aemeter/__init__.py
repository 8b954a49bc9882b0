"""Personalizable semantic auto-exposure: differentiable adaptive metering,
Gaussian-policy fine-tuning from coarse feedback, and a simulated
camera/viewfinder control loop."""

__version__ = "0.1.0"
