"""Mission formulas, their automata, and workspace labeling."""

from .automaton import MAX_ATOMS, Dfa, check_dfa, constant_dfa, exact_dfa, minimize, to_dfa
from .formula import (
    FALSE,
    TRUE,
    Always,
    And,
    Atom,
    Eventually,
    FalseF,
    Formula,
    FormulaSyntaxError,
    Not,
    Or,
    TrueF,
    UndecidableError,
    Until,
    atoms,
    evaluate_word,
    horizon,
    parse,
    pretty,
    progress,
)
from .workspace import Region, Workspace, label_abstract, label_concrete, label_grid

__all__ = [
    "FALSE", "MAX_ATOMS", "TRUE", "Always", "And", "Atom", "Dfa", "Eventually", "FalseF", "Formula",
    "FormulaSyntaxError", "Not", "Or", "Region", "TrueF", "UndecidableError", "Until", "Workspace", "atoms",
    "check_dfa", "constant_dfa", "evaluate_word", "exact_dfa", "horizon", "label_abstract", "label_concrete",
    "label_grid", "minimize", "parse", "pretty", "progress", "to_dfa",
]
