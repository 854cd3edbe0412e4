"""Score-based diffusion policies for goal-conditioned imitation on toy tasks."""

__version__ = "0.1.0"
