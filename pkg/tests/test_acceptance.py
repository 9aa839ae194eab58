"""Desk-scale acceptance runs. Each test records one PASS/FAIL line, shown in
the terminal summary, before asserting."""

import itertools
import json

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tcmf import presets
from tcmf.cli import main
from tcmf.control import ControlPath, gateaux_derivative, random_direction, solve_controlled_forward, solve_variation
from tcmf.measures import empirical, wasserstein2
from tcmf.mfbsde import LinearCoefficients, solve_linear
from tcmf.mfsde import EnsembleConfig, interacting_particle_solve, linear_coefficients, picard_law_solve
from tcmf.noise import (
    IntensityModel,
    LevyGrid,
    MarkFunction,
    TimeGrid,
    discretize_levy,
    integrate,
    lambda_measure,
    lambda_seminorm,
    noise_measure,
)
from tcmf.regression import RegressionBasis
from tcmf.vasicek import VasicekScenario, brute_force_control_search, chaos_study, riccati_oracle, run_example

pytestmark = pytest.mark.slow


def record(tag: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def within_5se(mean: float, se: float, slack: float = 0.0) -> bool:
    return abs(mean) <= 5 * se + slack


@pytest.fixture(scope="module")
def random_clock_noise():
    cfg = EnsembleConfig(TimeGrid(1.0, 50), IntensityModel.square_root(1.0, 2.0, 1.0, 0.6, 1.0, 2.0),
                         discretize_levy("uniform", M=2, eps=0.1, a=1.0, c=2.0), N=10_000, seed=2024,
                         iid_intensity=True)
    return cfg.make_noise()


# --------------------------------------------------------------------- 1

def _integrands(noise):
    grid, lg = noise.grid, noise.levy
    t = grid.knots[:-1]
    G = np.concatenate((np.zeros((noise.n_paths, 1)), np.cumsum(noise.dG, axis=1)), axis=1)
    Jsum = np.concatenate((np.zeros((noise.n_paths, 1)), np.cumsum(noise.dJ.sum(axis=2), axis=1)), axis=1)
    lamB, _ = noise.path_intensity()
    ones = np.ones(lg.M)
    return {
        "constant": lambda i: MarkFunction(1.0, ones),
        "time-varying": lambda i: MarkFunction(np.cos(3 * t[i]), t[i] * lg.marks),
        "mark-quadratic": lambda i: MarkFunction(0.0, lg.marks ** 2),
        "past-noise": lambda i: MarkFunction(np.sin(G[:, i]), np.tanh(Jsum[:, i])[:, None] * ones),
        "intensity-driven": lambda i: MarkFunction(np.sqrt(lamB[:, i]), (1 + lamB[:, i])[:, None] * lg.marks),
    }


def test_c1_ito_isometry(random_clock_noise):
    noise = random_clock_noise
    lamB, lamH = noise.path_intensity()
    dt = noise.grid.dt
    oks, parts = [], []
    for name, phi in _integrands(noise).items():
        I = integrate(lambda i, hist: phi(i), noise)
        norm = np.zeros(noise.n_paths)
        for i in range(noise.grid.n_steps):
            norm += np.broadcast_to(lambda_seminorm(phi(i), lamB[:, i], lamH[:, i], noise.levy) ** 2,
                                    (noise.n_paths,)) * dt
        ratio = np.mean(I ** 2) / np.mean(norm)
        se = np.std(I ** 2 - ratio * norm, ddof=1) / np.sqrt(I.size) / np.mean(norm)
        oks.append(within_5se(ratio - 1, se))
        parts.append(f"{name} {ratio:.4f}+-{se:.4f}")
    record("C1 Ito isometry (|ratio-1| <= 5 SE, N=1e4)", all(oks), "; ".join(parts))
    assert all(oks)


# --------------------------------------------------------------------- 2

def test_c2_conditional_moments(random_clock_noise):
    noise = random_clock_noise
    ip, lg = noise.intensity, noise.levy
    sets = {"all": dict(gaussian=True, marks=None), "gauss": dict(gaussian=True, marks=[]),
            "cell1": dict(gaussian=False, marks=[1])}
    checks = []
    for label, B in sets.items():
        w1, w2 = (0.0, 0.4), (0.5, 1.0)
        mu1, mu2 = noise_measure(w1, noise, **B), noise_measure(w2, noise, **B)
        lam1 = np.broadcast_to(lambda_measure(w1, ip, lg, **B), mu1.shape)
        for what, x in (("E[mu]", mu1), ("E[mu Lam]", mu1 * lam1), ("E[mu^2-Lam]", mu1 ** 2 - lam1),
                        ("E[mu1 mu2]", mu1 * mu2)):
            m, se = float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))
            checks.append((f"{label}:{what}", m, se, within_5se(m, se)))
    ok = all(c[3] for c in checks)
    worst = max(checks, key=lambda c: abs(c[1]) / c[2])
    record("C2 centering/orthogonality within 5 SE", ok,
           f"{len(checks)} moments, worst {worst[0]} = {worst[1]:.4g} ({abs(worst[1]) / worst[2]:.2f} SE)")
    assert ok


# --------------------------------------------------------------------- 3

def test_c3_wasserstein_brute_force():
    rng = np.random.default_rng(3)
    worst = 0.0
    count = 0
    for N in range(1, 7):
        for _ in range(100):
            x = rng.normal(size=N) * rng.uniform(0.1, 10)
            y = rng.standard_t(3, size=N)
            if rng.random() < 0.3:
                y[: N // 2] = x[: N // 2]
            brute = min(np.mean((x - y[list(p)]) ** 2) for p in itertools.permutations(range(N)))
            worst = max(worst, abs(wasserstein2(empirical(x), empirical(y)) ** 2 - brute))
            count += 1
    ok = worst <= 1e-12
    record("C3 sorted pairing = permutation minimum (1e-12)", ok, f"{count} instances, max gap {worst:.2e}")
    assert ok


# --------------------------------------------------------------------- 4

def test_c4_picard_contraction_and_mean_ode():
    # noise level chosen so that 5 standard errors of the sample mean stay
    # below the 1e-3 relative tolerance at every knot
    a, c, sigma = -1.0, 0.5, 0.02
    g = TimeGrid(1.0, 1000)
    cfg = EnsembleConfig(g, IntensityModel.constant(1.0, 0.0), LevyGrid.empty(), N=10_000, seed=44)
    _, e, d = picard_law_solve(linear_coefficients(a, c, sigma=sigma), 1.0, cfg.make_noise())
    dist = np.asarray(d.distances)
    live = dist[:-1] > 1e-13
    ratios = np.asarray(d.ratios)[live]
    ode = np.exp((a + c) * g.knots)
    err = float(np.max(np.abs(e.mean() / ode - 1)))
    se = float(np.max(e.paths.std(axis=0, ddof=1)[1:] / np.sqrt(e.N) / ode[1:]))
    ok = d.converged and bool(np.all(ratios <= 0.9)) and err <= 1e-3
    record("C4 Picard ratio <= 0.9, E[X] vs ODE <= 1e-3 rel (dt=1e-3, N=1e4)", ok,
           f"sigma={sigma}, {d.iterations} iterations, max ratio {ratios.max():.3f}, "
           f"max rel err {err:.2e} (max 1 SE {se:.1e})")
    assert ok


# --------------------------------------------------------------------- 5

def test_c5_mean_field_bsde():
    # the scheme's bias for h = y' is about dt/2 relative
    g = TimeGrid(1.0, 100)
    base = EnsembleConfig(g, IntensityModel.constant(1.0, 0.0), LevyGrid.empty(), N=4000, seed=55)
    fwd = interacting_particle_solve(linear_coefficients(-1.0, 0.5, sigma=0.3), 1.0, base.make_noise())
    cop = interacting_particle_solve(linear_coefficients(-1.0, 0.5, sigma=0.3), 1.0, base.copy_noise())

    s1 = solve_linear(LinearCoefficients(), np.full(fwd.N, 0.75), fwd, cop)
    ok1 = bool(np.all(s1.Y == 0.75) and np.all(s1.Z == 0.0))

    bm = interacting_particle_solve(linear_coefficients(0.0, 0.0, sigma=1.0), 0.0, base.make_noise())
    s2 = solve_linear(LinearCoefficients(), bm.paths[:, -1].copy(), bm, basis=RegressionBasis(degree=1))
    z0 = float(np.mean(s2.Z0))
    ok2 = abs(z0 - 1) <= 0.05

    s3 = solve_linear(LinearCoefficients(C=1.0), np.full(fwd.N, 1.5), fwd, cop)
    err3 = float(np.max(np.abs(s3.Y.mean(axis=0) / (1.5 * np.exp(-(g.T - g.knots))) - 1)))
    ok3 = err3 <= 1e-2

    jcfg = EnsembleConfig(g, IntensityModel.constant(1.0, 1.5), discretize_levy("uniform", M=2, eps=0.1, a=1.0, c=2.0),
                          N=4000, seed=56)
    jf = interacting_particle_solve(linear_coefficients(-1.0, 0.5, 0.3, 0.2), 1.0, jcfg.make_noise())
    jc = interacting_particle_solve(linear_coefficients(-1.0, 0.5, 0.3, 0.2), 1.0, jcfg.copy_noise())
    s4 = solve_linear(LinearCoefficients(A=0.1, B=0.5, C=1.0, D=0.3, E=0.2), np.tanh(jf.paths[:, -1]), jf, jc)
    tr = np.asarray(s4.trace)
    r = tr[1:][tr[:-1] > 1e-12 * tr[0]] / tr[:-1][tr[:-1] > 1e-12 * tr[0]]
    ok4 = s4.converged and bool(np.all(r <= 0.9))

    ok = ok1 and ok2 and ok3 and ok4
    record("C5 mean-field BSDE (i)-(iv)", ok,
           f"(i) exact {ok1}; (ii) mean Z(0) {z0:.4f}; (iii) max rel err {err3:.2e}; "
           f"(iv) beta={s4.beta:g}, max ratio {r.max():.3f} over {len(tr)} iterations")
    assert ok


# --------------------------------------------------------------------- 6

def test_c6_gateaux_derivative():
    vs = VasicekScenario(theta=1.0, sigma=0.1, sigma_jump=0.1, r0=1.0, n_steps=100, N=2000, seed=66,
                         intensity=IntensityModel.constant(1.0, 1.0),
                         levy=discretize_levy("uniform", M=2, eps=0.1, a=1.0, c=2.0))
    from tcmf.vasicek import build_mean_field_scenario

    s = build_mean_field_scenario(vs)
    g = s.grid
    u = ControlPath.deterministic(riccati_oracle(1.0, 1.0, 1.0, g).u_star + 0.5, s.U, clip=True)
    noise = s.noise()
    fails, worst = 0, 0.0
    for k in range(20):
        v = random_direction(g, vs.seed, k, scale=0.5)
        r = gateaux_derivative(s, u, v, noise=noise)
        fails += r.gap > 5 * r.se + 1e-4
        worst = max(worst, r.gap)

    ns = presets.scenario("nonlinear-test", "nonlinear-test", grid=TimeGrid(1.0, 100),
                          intensity=IntensityModel.constant(1.0, 1.0),
                          levy=discretize_levy("uniform", M=2, eps=0.1, a=1.0, c=2.0),
                          x0=0.5, N=2000, U=(-3.0, 3.0), seed=67)
    nnoise = ns.noise()
    e = solve_controlled_forward(ns, ControlPath.constant(0.2, ns.U, ns.grid.n_knots), nnoise)
    v = random_direction(ns.grid, 67, 0)
    Z = solve_variation(ns, e, v)
    errs = []
    for theta in (1e-1, 1e-2, 1e-3):
        up = solve_controlled_forward(ns, ControlPath.deterministic(0.2 + theta * v, ns.U), nnoise)
        errs.append(float(np.max(np.abs((up.paths - e.paths) / theta - Z.paths))))
    dq_ok = errs[0] > errs[1] > errs[2]
    ok = fails == 0 and dq_ok
    record("C6 Gateaux formula vs FD (5 SE + 1e-4, 20 dirs); DQ error decreasing", ok,
           f"{20 - fails}/20 within, max gap {worst:.2e}; DQ errors " + ", ".join(f"{x:.2e}" for x in errs))
    assert ok


# --------------------------------------------------------------------- 7

def test_c7_maximum_principle_vasicek():
    bf = brute_force_control_search(1.0, 1.0, 1.0)
    fine = riccati_oracle(1.0, 1.0, 1.0, TimeGrid(1.0, 4000))
    oracle_gap = abs(fine.value - bf.J)
    ok0 = oracle_gap <= 1e-3

    a = run_example(VasicekScenario(theta=1.0, sigma=0.0, r0=1.0, n_steps=200, N=200, seed=71), n_perturb=0)
    ok_a = a.oracle_rel_l2 <= 1e-2

    b = run_example(VasicekScenario(theta=1.0, sigma=0.1, r0=1.0, n_steps=100, N=2000, seed=72))
    ok_b = b.necessary["verdicts"]["stationarity_within_5se"]
    ok_c = b.sufficient["concavity_violations"] == 0
    ok_d = b.perturbation_pass_fraction >= 0.95
    ok = ok0 and ok_a and ok_b and ok_c and ok_d
    record("C7 maximum principle on Vasicek", ok,
           f"oracle vs brute force |dJ| {oracle_gap:.1e}; (a) rel L2 {a.oracle_rel_l2:.2e}; "
           f"(b) stationarity {ok_b}; (c) violations {b.sufficient['concavity_violations']}/"
           f"{b.sufficient['concavity_probes']}; (d) pass fraction {b.perturbation_pass_fraction:.3f}")
    assert ok


# --------------------------------------------------------------------- 8

def test_c8_propagation_of_chaos():
    vs = VasicekScenario(theta=1.0, sigma=0.5, r0=1.0, n_steps=50, seed=81)
    res = chaos_study(vs, Ns=(100, 1000, 10_000), n_rep=5, N_ref=100_000)
    ok = -0.8 <= res.slope <= -0.2
    record("C8 chaos slope in [-0.8, -0.2]", ok,
           f"slope {res.slope:.3f}; W2 " + ", ".join(f"N={r[0]}: {r[1]:.4f}" for r in res.rows))
    assert ok


# --------------------------------------------------------------------- 9

CFG = {
    "grid": {"T": 1.0, "n_steps": 40},
    "intensity": {"kind": "sqrt", "params": {"init": 1.0, "rev": 2.0, "level": 1.0, "vol": 0.5}, "iid": True},
    "levy": {"family": "uniform", "M": 2, "eps": 0.1, "params": {"a": 1.0, "c": 2.0}},
    "coefficients": {"name": "vasicek", "params": {"theta": 1.0, "sigma": 0.3, "sigma_jump": 0.2}},
    "bsde": {"B": 0.5, "C": 1.0, "terminal": {"kind": "affine-state", "value": 0.0, "slope": 1.0}},
    "solver": {"N": 500},
    "output": {"particles": 50},
}


def _csv_values(path):
    rows = path.read_text().splitlines()[1:]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def test_c9_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CFG))
    files = {"simulate-noise": ["noise.csv"], "solve-mfsde": ["law_flow.csv", "ensemble.csv", "mean.csv"],
             "solve-mfbsde": ["bsde.csv", "bsde_mean.csv"]}
    identical, worst = True, 0.0
    for cmd, names in files.items():
        for run, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            assert main([cmd, "--config", str(cfg), "--out", str(tmp_path / cmd / run), "--threads", threads]) == 0
        for n in names:
            a, b, c = (tmp_path / cmd / r / n for r in "abc")
            identical &= a.read_bytes() == b.read_bytes()
            worst = max(worst, float(np.max(np.abs(_csv_values(a) - _csv_values(c)))))
    ok = identical and worst <= 1e-12
    record("C9 byte-identical reruns; threads 1 vs 4 <= 1e-12", ok,
           f"byte-identical {identical}; max thread difference {worst:.1e}")
    assert ok
