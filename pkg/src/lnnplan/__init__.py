"""Lagrangian-structured dynamics models and a sampling-based planner that uses them."""

__version__ = "0.1.0"
