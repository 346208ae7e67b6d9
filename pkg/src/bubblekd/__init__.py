"""Desk-scale knowledge distillation for air-bubble patch classification."""

__version__ = "0.1.0"
