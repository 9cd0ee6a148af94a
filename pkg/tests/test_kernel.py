import numpy as np
import pytest

from neurosym.grid import Box, build_state_grid
from neurosym.kernel import (GpHypers, NominalDynamics, StochasticKernel, gaussian_box_integral, gp_fit,
                             hyper_grid, kernel_moments, read_residual_csv, sample_next, select_hypers,
                             write_residual_csv)
from oracles import gp_dense, normal_interval_quad


def shift(X, U):
    return X + U


NOM = NominalDynamics(shift, 1, 1)


def test_whole_line_has_unit_mass():
    assert gaussian_box_integral([0.3], [2.0], ([-np.inf], [np.inf])) == 1.0


def test_one_sigma_mass_against_quadrature():
    ref = normal_interval_quad(-1, 1)
    assert ref == pytest.approx(0.682689492137086, abs=1e-12)
    assert gaussian_box_integral([0.0], [1.0], Box([-1.0], [1.0])) == pytest.approx(ref, abs=1e-12)


def test_two_dimensional_product():
    ref = normal_interval_quad(-1, 1) ** 2
    assert ref == pytest.approx(0.466065, abs=5e-7)
    assert gaussian_box_integral([0.0, 0.0], [1.0, 1.0], Box([-1, -1], [1, 1])) == pytest.approx(ref, abs=1e-12)


def test_far_tail_against_quadrature():
    for lo, hi, mu, sd in [(3.0, 4.0, 0.0, 0.5), (-2.0, -1.5, 1.0, 0.3), (0.0, 0.1, 0.05, 1e-3)]:
        got = gaussian_box_integral([mu], [sd], Box([lo], [hi]))
        assert got == pytest.approx(normal_interval_quad(lo, hi, mu, sd), rel=1e-9, abs=1e-15)


def test_nonpositive_std_rejected():
    with pytest.raises(ValueError):
        gaussian_box_integral([0.0], [0.0], Box([0.0], [1.0]))


def test_mass_conserved_over_grid_with_sink():
    g = build_state_grid(Box([0.0, 0.0], [1.0, 1.0]), [0.25, 0.5])
    mean, std = np.array([0.9, 0.2]), np.array([0.2, 0.3])
    inside = sum(gaussian_box_integral(mean, std, g.cell_box(q)) for q in range(g.size))
    sink = 1.0 - gaussian_box_integral(mean, std, g.domain)
    assert inside + sink == pytest.approx(1.0, abs=1e-12)
    assert inside == pytest.approx(gaussian_box_integral(mean, std, g.domain), abs=1e-12)


def test_single_point_interpolates():
    gp = gp_fit([((np.array([0.2]), np.array([0.1])), np.array([0.7]))], GpHypers(1.0, (0.5,), 0.0))
    mean, var = gp.predict([[0.2, 0.1]])
    assert mean[0, 0] == pytest.approx(0.7, abs=1e-6)
    assert var[0] == pytest.approx(0.0, abs=1e-6)


def test_far_query_reverts_to_prior():
    gp = gp_fit([((np.array([0.0]), np.array([0.0])), np.array([1.0]))], GpHypers(2.0, (0.1,), 1e-4))
    mean, var = gp.predict([[5.0, 5.0]])
    assert abs(mean[0, 0]) < 1e-6
    assert var[0] == pytest.approx(2.0, abs=1e-6)


def test_posterior_matches_dense_solve():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (5, 2))
    y = rng.normal(size=(5, 1))
    h = GpHypers(1.3, (0.7, 0.4), 1e-3)
    gp = gp_fit((X, y), h)
    Xs = rng.uniform(-1, 1, (20, 2))
    mean, var = gp.predict(Xs)
    m_ref, v_ref = gp_dense(X, y, Xs, 1.3, np.array([0.7, 0.4]), 1e-3)
    assert np.allclose(mean, m_ref, atol=1e-8, rtol=0)
    assert np.allclose(var, v_ref, atol=1e-8, rtol=0)


def test_duplicates_are_averaged():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    y = np.array([[1.0], [3.0], [0.0]])
    gp = gp_fit((X, y), GpHypers(1.0, (0.3,), 1e-8))
    assert gp.inputs.shape[0] == 2
    assert gp.predict([[0.0, 0.0]])[0][0, 0] == pytest.approx(2.0, abs=1e-4)


def test_no_error_model_gives_nominal_mean_and_floor():
    k = StochasticKernel(NOM, None, 1e-6)
    mean, std = kernel_moments(k, np.array([0.3]), np.array([0.2]))
    assert mean[0] == 0.5
    assert std[0] == 1e-6


def _residual_data(rng, count):
    X = rng.uniform(-2, 2, (count, 1))
    U = rng.uniform(-0.5, 0.5, (count, 1))
    return np.hstack([X, U]), 0.1 * np.sin(X)


def test_recovers_known_model_error():
    rng = np.random.default_rng(1)
    inputs, targets = _residual_data(rng, 60)
    k = StochasticKernel(NOM, gp_fit((inputs, targets), GpHypers(0.01, (1.0,), 1e-6)), 1e-6)
    Xt = rng.uniform(-1.5, 1.5, (50, 1))
    Ut = rng.uniform(-0.4, 0.4, (50, 1))
    mean, _ = kernel_moments(k, Xt, Ut)
    err = np.abs(mean - (Xt + Ut + 0.1 * np.sin(Xt)))
    assert err.max() < 0.02


def test_std_never_below_floor():
    rng = np.random.default_rng(2)
    inputs, targets = _residual_data(rng, 30)
    floor = np.array([0.05])
    k = StochasticKernel(NOM, gp_fit((inputs, targets), GpHypers(0.01, (1.0,), 1e-6)), floor)
    _, std = kernel_moments(k, rng.uniform(-3, 3, (1000, 1)), rng.uniform(-1, 1, (1000, 1)))
    assert np.all(std >= 0.05)


def test_hyperparameter_search_is_deterministic():
    rng = np.random.default_rng(3)
    data = _residual_data(rng, 25)
    grid = hyper_grid([0.01, 0.1], [0.3, 1.0], [1e-6, 1e-3])
    a, b = select_hypers(data, grid), select_hypers(data, grid)
    assert a.hypers == b.hypers
    assert a.log_marginal_likelihood() >= max(gp_fit(data, h).log_marginal_likelihood() for h in grid) - 1e-9


def test_tiny_std_samples_near_mean():
    k = StochasticKernel(NOM, None, 1e-6)
    x = sample_next(k, np.array([0.4]), np.array([0.1]), np.random.default_rng(0))
    assert abs(x[0] - 0.5) < 1e-3


def test_sampling_is_seeded():
    k = StochasticKernel(NOM, None, 0.3)
    a = [sample_next(k, np.array([0.0]), np.array([0.0]), r) for r in [np.random.default_rng(9)] * 3]
    b = [sample_next(k, np.array([0.0]), np.array([0.0]), r) for r in [np.random.default_rng(9)] * 3]
    assert np.array_equal(np.array(a), np.array(b))


def test_empirical_cell_frequencies_match_integrals():
    g = build_state_grid(Box([-1.0], [1.0]), [0.25])
    rng = np.random.default_rng(4)
    n = 100_000
    mean = 0.1
    xs = mean + 0.3 * rng.standard_normal(n)
    idx = g.locate_many(xs[:, None])
    for q in range(g.size + 1):
        p = (gaussian_box_integral([mean], [0.3], g.cell_box(q)) if q < g.size
             else 1 - gaussian_box_integral([mean], [0.3], g.domain))
        freq = np.mean(idx == q)
        assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12


def test_residual_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    inputs, targets = _residual_data(rng, 4)
    write_residual_csv(tmp_path / "r.csv", inputs, targets, 1, 1)
    a, b = read_residual_csv(tmp_path / "r.csv", 1, 1)
    assert np.array_equal(a, inputs) and np.array_equal(b, targets)
