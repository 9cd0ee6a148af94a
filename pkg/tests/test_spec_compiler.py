
import numpy as np
import pytest

from neurosym.grid import Box, build_state_grid
from neurosym.numeric import CapabilityError, ConfigError
from neurosym.spec_compiler import (Dfa, FormulaSyntaxError, UndecidableError, check_dfa, constant_dfa, minimize,
                                    parse, pretty, to_dfa)
from neurosym.spec.formula import (TRUE, Always, And, Atom, Eventually, Not, Or, Until, atoms, depth, evaluate_word,
                                   horizon)
from neurosym.spec.workspace import Region, Workspace, label_abstract, label_concrete, label_grid
from oracles import all_words, random_formula, truth_table


def test_parse_reach_avoid():
    assert parse("F[0,3] goal & G[0,3] !obs") == And(Eventually(0, 3, Atom("goal")),
                                                    Always(0, 3, Not(Atom("obs"))))


def test_parse_until():
    assert parse("a U[1,2] b") == Until(1, 2, Atom("a"), Atom("b"))


def test_parse_toy_formula():
    f = parse("F[0,3] q6 & G[0,3] !q4")
    assert atoms(f) == {"q4", "q6"}


def test_precedence():
    assert parse("!a & b | c") == Or(And(Not(Atom("a")), Atom("b")), Atom("c"))
    assert parse("a & b U[0,1] c") == And(Atom("a"), Until(0, 1, Atom("b"), Atom("c")))
    assert parse("a U[0,1] b U[0,2] c") == Until(0, 1, Atom("a"), Until(0, 2, Atom("b"), Atom("c")))


def test_letters_f_g_u_are_atoms_without_brackets():
    assert parse("F & G") == And(Atom("F"), Atom("G"))


def test_equal_bounds_allowed():
    assert parse("F[2,2] a") == Eventually(2, 2, Atom("a"))


@pytest.mark.parametrize("text,where", [("F[3,1] a", "reversed"), ("a &", None), ("(a", None),
                                        ("F[-1,2] a", None), ("a $ b", None), ("U[0,1] a", None)])
def test_syntax_errors(text, where):
    with pytest.raises(FormulaSyntaxError) as e:
        parse(text)
    assert e.value.pos >= 0
    if where:
        assert where in str(e.value)


def test_pretty_round_trip_on_random_formulas():
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = random_formula(rng, ["a", "b"], 3, 4)
        assert parse(pretty(f)) == f


def test_word_examples():
    assert evaluate_word(parse("F[0,2] a"), [set(), {"a"}, set()])
    assert not evaluate_word(parse("G[0,2] a"), [{"a"}, {"a"}, set()])


def test_short_word_is_undecidable():
    with pytest.raises(UndecidableError):
        evaluate_word(parse("F[0,2] a"), [set(), set()])


def test_horizon_and_depth():
    f = parse("a U[1,3] F[0,2] b")
    assert horizon(f) == 5
    assert depth(f) == 2


def test_eventually_equals_true_until_exhaustively():
    for k1, k2 in [(0, 0), (0, 2), (1, 3), (2, 4)]:
        for phi in [Atom("a"), And(Atom("a"), Not(Atom("b"))), Or(Atom("a"), Atom("b"))]:
            f, g = Eventually(k1, k2, phi), Until(k1, k2, TRUE, phi)
            for L in range(horizon(f) + 1, 6):
                for w in all_words(["a", "b"], L):
                    assert evaluate_word(f, w) == evaluate_word(g, w)


def test_semantics_agree_with_truth_tables():
    rng = np.random.default_rng(1)
    for _ in range(60):
        f = random_formula(rng, ["a", "b"], 3, 2)
        L = horizon(f) + 1
        if L > 5:
            continue
        for w in all_words(["a", "b"], L):
            assert evaluate_word(f, w) == bool(truth_table(f, list(w))[0])


def test_true_compiles_to_one_accepting_state():
    d = to_dfa("true", 3)
    assert d.n_states == 1 and d.accepting[0]
    assert constant_dfa(True).n_states == 1


def test_reach_avoid_until_has_three_states():
    d = to_dfa("!obs U[0,20] goal", 20)
    assert d.n_states == 3
    assert d.accepting.sum() == 1 and d.trap.sum() == 1


def _language_agrees(f, H):
    d = to_dfa(f, H)
    aps = sorted(atoms(f))
    for w in all_words(aps, H + 1):
        if d.accepts(w) != bool(truth_table(f, list(w))[0]):
            return False
    return True


def test_reach_avoid_conjunction_language():
    for H in range(0, 6):
        f = parse(f"F[0,{H}] goal & G[0,{H}] !obs")
        assert _language_agrees(f, H)


def test_random_formulas_exhaustively():
    rng = np.random.default_rng(2)
    done = 0
    while done < 25:
        f = random_formula(rng, ["a", "b"], 3, 2)
        if horizon(f) > 4 or not atoms(f):
            continue
        H = int(rng.integers(horizon(f), 5))
        assert _language_agrees(f, H), pretty(f)
        done += 1


def test_larger_horizon_than_formula_needs():
    assert _language_agrees(parse("a U[0,1] b"), 4)


def test_horizon_too_short():
    with pytest.raises(ValueError):
        to_dfa("F[0,3] a", 2)


def test_alphabet_limit():
    f = " | ".join(f"p{i}" for i in range(11))
    with pytest.raises(CapabilityError):
        to_dfa(f, 0)


def test_structural_invariants():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = random_formula(rng, ["a", "b"], 3, 3)
        if horizon(f) > 4:
            continue
        d = to_dfa(f, horizon(f))
        check_dfa(d)
        assert d.delta.shape == (d.n_states, 2 ** len(d.atoms))
        assert np.all((d.delta >= 0) & (d.delta < d.n_states))
        acc = np.flatnonzero(d.accepting)
        assert np.all(d.accepting[d.delta[acc]])  # accepting states are absorbing
        m = minimize(d)
        assert np.array_equal(m.delta, d.delta) and m.initial == d.initial
        assert np.array_equal(m.accepting, d.accepting)


def test_dfa_json_round_trip():
    d = to_dfa("F[0,3] goal & G[0,3] !obs", 3)
    e = Dfa.from_json(d.to_json())
    assert np.array_equal(e.delta, d.delta) and e.initial == d.initial
    assert d.to_json()["trap"] == [int(i) for i in np.flatnonzero(d.trap)]


WS = Workspace(Box([0, 0], [4, 4]), (Region("goal", "goal", Box([2, 2], [4, 4])),
                                     Region("obs", "obstacle", Box([0, 2], [1, 3])),
                                     Region("tag", "label", Box([0, 0], [2, 2]))))


def test_cell_inside_obstacle():
    assert "obs" in label_abstract(Box([0.2, 2.2], [0.8, 2.8]), WS)


def test_cell_touching_obstacle_face_only():
    assert "obs" not in label_abstract(Box([1, 2], [2, 3]), WS)


def test_cell_disjoint_from_everything():
    assert label_abstract(Box([3, 0], [4, 1]), WS) == frozenset()


def test_cell_straddling_goal_boundary():
    assert "goal" not in label_abstract(Box([1.5, 2.5], [2.5, 3.5]), WS)
    assert "goal" in label_abstract(Box([2, 2], [3, 3]), WS)


def test_goal_edges_computed_by_other_float_paths():
    g = build_state_grid(Box([0.0, 0.0], [1.5, 1.5]), [0.3, 0.3])
    ws = Workspace(Box([0, 0], [1.5, 1.5]), (Region("goal", "goal", Box([0.9, 0.9], [1.5, 1.5])),))
    labels = label_grid(g, ws)
    assert sum("goal" in L for L in labels) == 4
    assert labels[-1] == frozenset()


def test_concrete_labels_use_closed_boxes():
    assert label_concrete([2.0, 2.0], WS) == {"goal", "tag"}
    assert label_concrete([3.0, 0.5], WS) == frozenset()


def test_workspace_json_and_errors(tmp_path):
    WS.save(tmp_path / "ws.json")
    again = Workspace.load(tmp_path / "ws.json")
    assert again.names == WS.names
    with pytest.raises(ConfigError):
        Workspace.from_json({"domain": {"lo": [0], "hi": [1]}, "regions": [{"name": "x", "type": "hole",
                                                                             "box": {"lo": [0], "hi": [1]}}]})
    with pytest.raises(ConfigError):
        Workspace.from_json({"regions": []})
    with pytest.raises(ConfigError):
        Region("bad name", "goal", Box([0], [1]))
