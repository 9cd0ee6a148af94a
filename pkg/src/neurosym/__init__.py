"""Formally trained ReLU policy libraries composed into temporal-logic planners."""

__version__ = "0.1.0"
