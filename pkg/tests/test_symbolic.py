import numpy as np
import pytest

from neurosym.grid import Box, build_controller_grid, build_state_grid
from neurosym.kernel import NominalDynamics, StochasticKernel, sample_next
from neurosym.scenarios import desk_task
from neurosym.spec_compiler import constant_dfa, to_dfa
from neurosym.symbolic import (AbstractionError, DpResult, LabelMismatch, SymbolicMdp, build_mdp, build_product,
                               dp_solve, partition_laws)
from cases import random_product
from oracles import enumerate_policies_value, history_value


class _Shift:
    def __call__(self, X, U):
        return X + U


def shift_task(std, cells=4):
    sg = build_state_grid(Box([0.0], [float(cells)]), [1.0])
    cg = build_controller_grid(Box([-0.5, -1.5], [0.5, 1.5]), [1.0, 1.0])
    return sg, cg, StochasticKernel(NominalDynamics(_Shift(), 1, 1, "shift"), None, std_floor=std)


@pytest.fixture(scope="module")
def desk_mdp():
    t = desk_task()
    return t, build_mdp(t.state_grid, t.controller_grid, t.kernel)


def test_desk_rows_are_distributions(desk_mdp):
    _, mdp = desk_mdp
    assert (mdp.N, mdp.M) == (200, 16)
    sums = mdp.row_sums()
    assert np.max(np.abs(sums - 1.0)) <= 1e-9
    assert np.all(mdp.data >= 0)


def test_partition_laws_are_centers():
    sg, cg, _ = shift_task(0.1)
    K, b = partition_laws(sg, cg, 1)
    assert K.shape == (3, 1, 1) and np.allclose(K, 0)
    assert np.allclose(b[:, 0], [-1.0, 0.0, 1.0])


def test_near_deterministic_row_concentrates():
    sg, cg, k = shift_task(1e-4)
    mdp = build_mdp(sg, cg, k)
    # cell 1 (center 1.5) with b = +1 lands at 2.5, the center of cell 2
    assert mdp.prob(1, 2, 2) >= 1 - 1e-6
    # leaving the domain sends everything to the sink
    assert mdp.prob(3, 2, mdp.sink) >= 1 - 1e-6


def test_rows_match_sampling():
    sg, cg, k = shift_task(0.6)
    mdp = build_mdp(sg, cg, k)
    rng = np.random.default_rng(0)
    n = 100_000
    x = np.full((n, 1), 1.5)
    nxt = sample_next(k, x, np.full((n, 1), 1.0), rng)[:, 0]
    cell = np.where((nxt >= 0) & (nxt < 4), np.floor(nxt), 4).astype(int)
    freq = np.bincount(cell, minlength=5) / n
    for q2 in range(5):
        p = mdp.prob(1, 2, q2)
        assert abs(freq[q2] - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12


def test_availability_mask_leaves_rows_empty():
    sg, cg, k = shift_task(0.1)
    avail = np.zeros((4, 3), dtype=bool)
    avail[0, 1] = True
    mdp = build_mdp(sg, cg, k, available=avail)
    assert mdp.row(1, 1)[0].size == 0
    assert abs(mdp.row(0, 1)[1].sum() - 1) < 1e-12


def test_kernel_failure_is_located():
    class Bad:
        def __call__(self, X, U):
            out = X + U
            out[X[:, 0] > 2] = np.nan
            return out
    sg, cg, _ = shift_task(0.1)
    k = StochasticKernel(NominalDynamics(Bad(), 1, 1, "bad"), None, std_floor=0.1)
    with pytest.raises(AbstractionError, match=r"q=2, P=0"):
        build_mdp(sg, cg, k)


def test_mdp_file_round_trip(tmp_path):
    sg, cg, k = shift_task(0.3)
    mdp = build_mdp(sg, cg, k, initial=[0])
    mdp.save(tmp_path / "m.csv")
    again = SymbolicMdp.load(tmp_path / "m.csv")
    assert np.array_equal(again.dense(), mdp.dense())
    assert again.state_grid_hash == mdp.state_grid_hash and list(again.initial) == [0]


def test_product_replays_the_automaton():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mdp, dfa, labels, H = random_product(rng)
        prod = build_product(mdp, dfa, labels)
        assert prod.n_states == (mdp.N + 1) * dfa.n_states
        path = rng.integers(0, mdp.N + 1, size=H + 1)
        full = labels + [frozenset()]
        q, s = prod.initial_state(int(path[0]))
        for q2 in path[1:]:
            s = int(prod.next_s[q2, s])
        assert s == dfa.run([full[i] for i in path])[-1]


def test_product_dense_rows_sum_to_one():
    rng = np.random.default_rng(2)
    mdp, dfa, labels, _ = random_product(rng)
    T = build_product(mdp, dfa, labels).dense()
    for q in range(mdp.N):
        for P in np.flatnonzero(mdp.available[q]):
            for s in range(dfa.n_states):
                assert abs(T[q * dfa.n_states + s, P].sum() - 1) < 1e-12


def test_label_errors():
    rng = np.random.default_rng(3)
    mdp, dfa, labels, _ = random_product(rng)
    with pytest.raises(LabelMismatch):
        build_product(mdp, dfa, labels[:-1])
    with pytest.raises(LabelMismatch):
        build_product(mdp, dfa, labels, ap=["a"])


def test_true_formula_is_certain():
    rng = np.random.default_rng(4)
    mdp, _, labels, _ = random_product(rng)
    res = dp_solve(build_product(mdp, constant_dfa(True), labels), 3)
    assert np.all(res.V == 1.0)
    assert np.all(res.Gamma == -1)


def _oracle_args(mdp, prod):
    return mdp.dense(), mdp.available, prod.letters, prod.dfa.delta, prod.dfa.accepting


def test_dp_matches_history_tree():
    rng = np.random.default_rng(5)
    for _ in range(25):
        mdp, dfa, labels, H = random_product(rng, N_max=4)
        prod = build_product(mdp, dfa, labels)
        res = dp_solve(prod, H)
        args = _oracle_args(mdp, prod)
        for q0 in range(mdp.N):
            s0 = prod.initial_state(q0)[1]
            assert abs(res.value(q0, s0) - history_value(*args, q0, s0, H)) <= 1e-9


def test_dp_matches_policy_enumeration():
    rng = np.random.default_rng(6)
    checked = 0
    while checked < 10:
        mdp, dfa, labels, H = random_product(rng, N_max=3, M_max=2)
        prod = build_product(mdp, dfa, labels)
        res = dp_solve(prod, H)
        q0, s0 = prod.initial_state(0)
        best, _ = enumerate_policies_value(*_oracle_args(mdp, prod), q0, s0, H, limit=5000)
        if best is None:
            continue
        assert abs(res.value(q0, s0) - best) <= 1e-9
        checked += 1


def _toy():
    # cells q1..q6 are indices 0..5; P0 walks q1 -> q2 -> q6 and stays, P1 jumps to q4
    T = np.zeros((6, 2, 7))
    for q, nxt in enumerate([1, 5, 3, 3, 4, 5]):
        T[q, 0, nxt] = 1.0
        T[q, 1, 3] = 1.0
    labels = [frozenset({f"q{i + 1}"}) for i in range(6)]
    return SymbolicMdp.from_dense(T), labels


def test_toy_reach_avoid():
    mdp, labels = _toy()
    dfa = to_dfa("F[0,3] q6 & G[0,3] !q4", 3)
    prod = build_product(mdp, dfa, labels)
    res = dp_solve(prod, 3)
    q0, s0 = prod.initial_state(0)
    assert res.value(q0, s0) == 1.0
    assert res.activation(0, q0, s0) == 0
    # a start in the obstacle is lost
    q4, s4 = prod.initial_state(3)
    assert res.value(q4, s4) == 0.0


def test_values_grow_with_remaining_steps_and_satisfy_bellman():
    rng = np.random.default_rng(7)
    for _ in range(15):
        mdp, dfa, labels, H = random_product(rng)
        prod = build_product(mdp, dfa, labels)
        res = dp_solve(prod, H)
        assert np.all(res.V[:-1] >= res.V[1:] - 1e-12)
        T = mdp.dense()
        for k in range(H):
            for q in range(mdp.N):
                for s in range(dfa.n_states):
                    if dfa.accepting[s] or dfa.trap[s] or not mdp.available[q].any():
                        continue
                    W = np.array([res.V[k + 1, q2, prod.next_s[q2, s]] for q2 in range(mdp.N + 1)])
                    Q = np.where(mdp.available[q], T[q] @ W, -np.inf)
                    assert abs(res.V[k, q, s] - Q.max()) <= 1e-12
                    assert res.Gamma[k, q, s] == int(np.flatnonzero(Q >= Q.max() - 1e-15)[0])


def test_ties_go_to_the_lowest_partition():
    T = np.zeros((2, 3, 3))
    T[0, :, 1] = 1.0
    T[1, :, 1] = 1.0
    mdp = SymbolicMdp.from_dense(T, np.array([[False, True, True], [True, True, True]]))
    prod = build_product(mdp, to_dfa("F[0,1] a", 1), [frozenset(), frozenset({"a"})])
    res = dp_solve(prod, 1)
    assert res.activation(0, 0, prod.initial_state(0)[1]) == 1


def test_dp_save_load(tmp_path):
    rng = np.random.default_rng(8)
    mdp, dfa, labels, H = random_product(rng)
    res = dp_solve(build_product(mdp, dfa, labels), H)
    res.save(tmp_path / "dp.npz")
    again = DpResult.load(tmp_path / "dp.npz")
    assert np.array_equal(again.V, res.V) and np.array_equal(again.Gamma, res.Gamma)


def test_horizon_must_be_positive():
    rng = np.random.default_rng(9)
    mdp, dfa, labels, _ = random_product(rng)
    with pytest.raises(ValueError):
        dp_solve(build_product(mdp, dfa, labels), 0)
