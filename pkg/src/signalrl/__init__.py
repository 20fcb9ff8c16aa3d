"""Deep Q-learning traffic-signal control with partially detected vehicles."""

__version__ = "0.1.0"
