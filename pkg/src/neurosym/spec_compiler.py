"""Mission formulas, their automata and workspace labeling under one import."""

from .spec import *  # noqa: F401,F403
from .spec import automaton, formula, workspace  # noqa: F401
