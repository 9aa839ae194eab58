import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcmf.errors import InvalidArgument
from tcmf.mfbsde import (
    Driver,
    LinearCoefficients,
    backward_sweep,
    beta_norm,
    eval_eprime,
    picard_bsde,
    solve_linear,
)
from tcmf.mfsde import interacting_particle_solve, linear_coefficients
from tcmf.regression import RegressionBasis


def forward(cfg, sigma=0.3, jump_sigma=0.0, a=-1.0, c=0.5, x0=1.0):
    return interacting_particle_solve(linear_coefficients(a, c, sigma, jump_sigma), x0, cfg.make_noise())


@pytest.fixture
def fwd(gauss_config):
    return forward(gauss_config)


@pytest.fixture
def copy(gauss_config):
    return interacting_particle_solve(linear_coefficients(-1.0, 0.5, 0.3), 1.0, gauss_config.copy_noise())


# ----------------------------------------------------------------- E' helper

def test_eprime_of_copy_value_is_copy_mean():
    rng = np.random.default_rng(0)
    y, yc = rng.normal(size=7), rng.normal(size=13)
    z, zc = np.zeros((7, 1)), np.zeros((13, 1))
    out = eval_eprime(lambda t, l, lc, y, yc, z, zc: yc, 0.0, (1.0, 0.0, y, z), (1.0, 0.0, yc, zc))
    np.testing.assert_allclose(out, yc.mean(), rtol=1e-14)
    out = eval_eprime(lambda t, l, lc, y, yc, z, zc: y * yc, 0.0, (1.0, 0.0, y, z), (1.0, 0.0, yc, zc))
    np.testing.assert_allclose(out, y * yc.mean(), rtol=1e-12)


def test_eprime_sees_copy_intensity():
    y = np.zeros(3)
    out = eval_eprime(lambda t, l, lc, y, yc, z, zc: lc[0] * l[1], 0.0,
                      (1.0, np.array([1.0, 2.0, 3.0]), y, np.zeros((3, 1))),
                      (np.array([2.0, 4.0]), 0.0, np.zeros(2), np.zeros((2, 1))))
    np.testing.assert_allclose(out, [3.0, 6.0, 9.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9))
def test_eprime_is_chunk_invariant(N, chunk):
    rng = np.random.default_rng(N)
    y, yc = rng.normal(size=N), rng.normal(size=5)
    z, zc = rng.normal(size=(N, 2)), rng.normal(size=(5, 2))
    h = lambda t, l, lc, y, yc, z, zc: np.sin(y - yc) + z[..., 1] * zc[..., 0]
    a = eval_eprime(h, 0.0, (1.0, 1.0, y, z), (1.0, 1.0, yc, zc), chunk=chunk)
    b = eval_eprime(h, 0.0, (1.0, 1.0, y, z), (1.0, 1.0, yc, zc), chunk=10 ** 6)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_eprime_rejects_empty_copy():
    with pytest.raises(InvalidArgument):
        eval_eprime(lambda *a: 0.0, 0.0, (1.0, 0.0, np.zeros(2), np.zeros((2, 1))),
                    (1.0, 0.0, np.zeros(0), np.zeros((0, 1))))


# ----------------------------------------------------------------- validation

def test_coefficient_validation():
    with pytest.raises(InvalidArgument):
        LinearCoefficients(A_own=1.0)
    with pytest.raises(InvalidArgument):
        LinearCoefficients(B=np.array([1.0, np.nan]))
    with pytest.raises(InvalidArgument):
        Driver(None, 1.0)
    with pytest.raises(InvalidArgument):
        Driver(lambda *a: 0.0, -1.0)
    with pytest.raises(InvalidArgument):
        Driver(lambda *a: 0.0, 1.0, kind="linear")


def test_negation_and_lipschitz():
    co = LinearCoefficients(A=1.0, A_own=2.0, A_copy=3.0, B=-0.5, C=0.25, D=[0.0, 1.0], E=0.1)
    ne = co.negated()
    assert ne.A[0, 0] == -1.0 and ne.A_own[0, 0] == 2.0 and ne.A_copy[0, 0] == -3.0
    assert ne.B[0, 0] == 0.5 and ne.C[0, 0] == -0.25 and ne.E[0, 0, 0] == -0.1
    assert co.lipschitz() == pytest.approx(0.5 + 0.25 + 1.0 + 0.1)
    assert Driver(None, 2.0, kind="linear", linear=co).default_beta() == 65.0


def test_terminal_shape_and_particle_count(fwd):
    with pytest.raises(InvalidArgument):
        backward_sweep(lambda *a: 0.0, np.zeros(3), fwd)
    with pytest.raises(InvalidArgument):
        backward_sweep(lambda *a: 0.0, np.zeros(fwd.N), fwd, RegressionBasis(degree=6))
    with pytest.raises(InvalidArgument):
        solve_linear(LinearCoefficients(), np.zeros(fwd.N), fwd, max_iter=0)


# ----------------------------------------------------------------- solutions

def test_zero_driver_keeps_constant_terminal_exactly(fwd):
    sol = solve_linear(LinearCoefficients(), np.full(fwd.N, 2.5), fwd)
    assert np.all(sol.Y == 2.5)
    assert np.all(sol.Z == 0.0)
    assert sol.terminal_residual == 0.0
    assert sol.converged


def test_martingale_representation_of_brownian_terminal(gauss_config):
    e = forward(gauss_config.with_(N=2000), sigma=1.0, a=0.0, c=0.0, x0=0.0)
    sol = solve_linear(LinearCoefficients(), e.paths[:, -1].copy(), e, basis=RegressionBasis(degree=1))
    assert abs(np.mean(sol.Z0) - 1.0) < 0.02
    assert np.mean(np.abs(sol.Y[:, :-1] - e.paths[:, :-1])) < 0.02
    assert sol.terminal_residual == 0.0


def test_jump_slot_representation(small_config):
    e = forward(small_config.with_(N=4000), sigma=0.0, jump_sigma=1.0, a=0.0, c=0.0, x0=0.0)
    sol = solve_linear(LinearCoefficients(), e.paths[:, -1].copy(), e, basis=RegressionBasis(degree=1))
    np.testing.assert_allclose(np.mean(sol.ZJ, axis=(0, 1)), 1.0, atol=0.1)
    assert abs(np.mean(sol.Z0)) < 0.05


def discrete_decay(B, grid, c):
    # one predictor-corrector step of dY = B Y dt, run backward from c
    step = 1.0 - B * grid.dt + (B * grid.dt) ** 2
    return c * step ** (grid.n_steps - np.arange(grid.n_knots))


def test_linear_ode_oracle(fwd):
    g = fwd.grid
    tau = g.T - g.knots
    for B in (-1.0, 0.7):
        sol = solve_linear(LinearCoefficients(B=B), np.full(fwd.N, 2.0), fwd)
        np.testing.assert_allclose(sol.Y.mean(axis=0), discrete_decay(B, g, 2.0), rtol=1e-12)
        np.testing.assert_allclose(sol.Y.mean(axis=0), 2.0 * np.exp(-B * tau), rtol=g.dt)
        assert sol.iterations == 2 and sol.trace[1] == 0.0


def test_constant_driver_integrates_backward(fwd):
    g = fwd.grid
    sol = solve_linear(LinearCoefficients(A=1.0), np.zeros(fwd.N), fwd)
    np.testing.assert_allclose(sol.Y, np.broadcast_to(-(g.T - g.knots), sol.Y.shape), atol=1e-12)


def test_primed_driver_solves_mean_ode(fwd, copy):
    # at the fixed point the copy term is implicit in Y_i
    g = fwd.grid
    sol = solve_linear(LinearCoefficients(C=1.0), np.full(fwd.N, 1.5), fwd, copy)
    assert sol.converged
    np.testing.assert_allclose(sol.Y.mean(axis=0), 1.5 / (1.0 + g.dt) ** (g.n_steps - np.arange(g.n_knots)), rtol=1e-7)
    np.testing.assert_allclose(sol.Y.mean(axis=0), 1.5 * np.exp(-(g.T - g.knots)), rtol=g.dt)
    assert np.all(sol.ratios[:-1] < 0.5)


def test_general_driver_matches_linear_one(fwd, copy):
    co = LinearCoefficients(A=0.3, B=-0.4, C=0.6)
    lin = solve_linear(co, fwd.paths[:, -1].copy(), fwd, copy, K=1.0)
    gen = picard_bsde(Driver(lambda t, l, lc, y, yc, z, zc: 0.3 - 0.4 * y + 0.6 * yc, 1.0),
                      fwd.paths[:, -1].copy(), fwd, copy)
    np.testing.assert_allclose(gen.Y, lin.Y, atol=1e-9)
    assert gen.iterations == lin.iterations


def test_evaluate_reproduces_fit(fwd):
    sol = solve_linear(LinearCoefficients(B=-0.3), fwd.paths[:, -1] ** 2, fwd)
    Y, Z = sol.evaluate(fwd)
    np.testing.assert_allclose(Y[:, :-1], sol.Y[:, :-1], atol=1e-12)
    np.testing.assert_allclose(Z, sol.Z, atol=1e-12)
    assert np.all(np.isnan(Y[:, -1]))


def test_beta_norm_weights(fwd):
    n = fwd.grid.n_steps
    dY = np.ones((fwd.N, n + 1))
    dZ = np.zeros((fwd.N, n, 1))
    b0 = beta_norm(dY, dZ, fwd, 1e-12)
    assert b0 == pytest.approx(np.sqrt(fwd.grid.T), rel=1e-6)
    assert beta_norm(dY, dZ, fwd, 5.0) > b0


def test_outputs(tmp_path, fwd):
    import json

    sol = solve_linear(LinearCoefficients(C=0.5), np.ones(fwd.N), fwd)
    sol.to_csv(tmp_path / "b.csv")
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[0] == "particle,knot,Y,Z0" and len(rows) == fwd.N * fwd.grid.n_knots + 1
    d = json.loads(sol.trace_json())
    assert d["iterations"] == sol.iterations and len(d["beta_norm_differences"]) == sol.iterations
