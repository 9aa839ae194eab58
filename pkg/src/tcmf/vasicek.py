"""Central-bank Vasicek example.

``N`` sector rates ``dr^i = theta_t (-r^i + rbar - u) dt + sigma dmu^i``
coupled through the cross-sectional average ``rbar``; the bank chooses
``u >= 0`` to maximise ``E[int -(r^2 + rbar^2 + u^2) dt]``. In the limit each
rate follows the mean-field dynamics with ``rbar`` replaced by ``E[r]``.

For constant ``theta`` and deterministic controls the mean ``m = E[r]``
obeys ``m' = -theta u`` and the spread ``r - m`` does not depend on ``u``,
so the problem reduces to ``min int (u^2 + 2 m^2) dt`` with value ``k_t m^2``,
``k' = theta^2 k^2 - 2``, ``k_T = 0``, and feedback ``u* = theta k m``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import _output
from .control import (
    ControlPath,
    Scenario,
    assemble_adjoint,
    check_necessary,
    check_sufficient,
    objective_samples,
    solve_adjoint,
    solve_controlled_forward,
)
from .errors import InvalidArgument
from .measures import law_flow_distance
from .mfbsde import BSDESolution, state_columns
from .mfsde import CoefficientSet, ParticleEnsemble, copy_seed, interacting_particle_solve, picard_law_solve
from .noise import IntensityModel, LevyGrid, TimeGrid, lambda_seminorm, MarkFunction
from .presets import vasicek_costs, vasicek_dynamics
from .regression import RegressionBasis
from ._rng import substream


@dataclass(frozen=True)
class VasicekScenario:
    theta: float | Callable = 1.0
    sigma: float = 0.0
    sigma_jump: float = 0.0
    r0: float = 1.0
    intensity: IntensityModel = field(default_factory=lambda: IntensityModel.constant(1.0, 0.0))
    levy: LevyGrid = field(default_factory=LevyGrid.empty)
    T: float = 1.0
    n_steps: int = 100
    u_max: float | None = None
    N: int = 1000
    seed: int = 0
    iid_intensity: bool = False
    K: float = 100.0

    def __post_init__(self):
        th = self.theta_path()
        if not np.all(np.isfinite(th)) or np.any(th < 0) or np.any(th > self.K):
            raise InvalidArgument("theta must lie in [0, K] on the grid")
        if not np.isfinite(self.r0):
            raise InvalidArgument("r0 must be finite")
        if self.N < 2:
            raise InvalidArgument("the example needs at least two sectors")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.n_steps)

    def theta_path(self) -> np.ndarray:
        t = TimeGrid(self.T, self.n_steps).knots
        if callable(self.theta):
            return np.array([float(self.theta(s)) for s in t])
        return np.full(t.size, float(self.theta))

    @property
    def constant_theta(self) -> bool:
        return not callable(self.theta)

    @property
    def U(self) -> tuple:
        if self.u_max is not None:
            return (0.0, float(self.u_max))
        return (0.0, 10.0 * abs(self.r0) * float(np.max(self.theta_path())) * self.T)

    def loading_norm(self, lamB: float, lamH: float) -> float:
        lg = self.levy
        sj = self.sigma_jump
        v = np.asarray(sj(lg.marks) if callable(sj) else np.full(lg.M, float(sj)))
        return float(lambda_seminorm(MarkFunction(self.sigma, v), lamB, lamH, lg))


def build_mean_field_scenario(vs: VasicekScenario) -> Scenario:
    dyn = vasicek_dynamics(vs.theta, vs.sigma, vs.sigma_jump)
    return Scenario(dyn, vasicek_costs(), vs.U, vs.grid, vs.intensity, vs.levy, vs.r0, vs.N,
                    vs.seed, vs.iid_intensity, name="vasicek")


# ---------------------------------------------------------------------------
# reduced LQ problem


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    theta: float
    k: np.ndarray
    m: np.ndarray
    u_star: np.ndarray

    @property
    def value(self) -> float:
        """``J`` of the reduced problem, ``-k_0 m_0^2``."""
        return float(-self.k[0] * self.m[0] ** 2)

    def reduced_objective(self) -> float:
        """Left-point quadrature of ``-int (u*^2 + 2 m^2) dt`` along the path."""
        n = self.grid.n_steps
        return float(-np.sum(self.u_star[:n] ** 2 + 2 * self.m[:n] ** 2) * self.grid.dt)


def riccati_closed_form(theta: float, T: float, t) -> np.ndarray:
    """``k_t = (sqrt 2 / theta) tanh(sqrt 2 theta (T - t))``."""
    t = np.asarray(t, dtype=float)
    if theta == 0:
        return 2.0 * (T - t)
    r = np.sqrt(2.0)
    return r / theta * np.tanh(r * theta * (T - t))


def riccati_oracle(theta: float, r0: float, T: float, grid: TimeGrid | None = None) -> RiccatiSolution:
    """Explicit Euler: ``k`` backward from ``k_T = 0``, then ``m`` forward."""
    theta = float(theta)
    if theta < 0:
        raise InvalidArgument("theta must be nonnegative")
    grid = grid or TimeGrid(T, 100)
    n, dt = grid.n_steps, grid.dt
    k = np.zeros(n + 1)
    for i in range(n - 1, -1, -1):
        k[i] = k[i + 1] - (theta ** 2 * k[i + 1] ** 2 - 2.0) * dt
    m = np.empty(n + 1)
    m[0] = r0
    for i in range(n):
        m[i + 1] = m[i] - theta ** 2 * k[i] * m[i] * dt
    return RiccatiSolution(grid, theta, k, m, theta * k * m)


@dataclass(frozen=True)
class BruteForceResult:
    u: np.ndarray
    J: float
    history: list

    @property
    def n_segments(self) -> int:
        return self.u.size


def _reduced_cost(theta: float, r0: float, T: float, n_seg: int):
    """Exact ``int (u^2 + 2 m^2) dt`` for a piecewise-constant ``u``: ``m`` is
    piecewise linear, so each segment integrates in closed form. Returned as
    a quadratic ``u -> (value, gradient)``."""
    h = T / n_seg
    L = np.tril(np.ones((n_seg + 1, n_seg)), -1) * (-theta * h)  # m = r0 + L u
    # int over segment l of m^2 = h (m_l^2 + m_l m_{l+1} + m_{l+1}^2) / 3
    W = np.zeros((n_seg + 1, n_seg + 1))
    for l in range(n_seg):
        W[l, l] += h / 3
        W[l + 1, l + 1] += h / 3
        W[l, l + 1] += h / 6
        W[l + 1, l] += h / 6
    one = np.full(n_seg + 1, float(r0))
    Q = h * np.eye(n_seg) + 2.0 * L.T @ W @ L
    c = 2.0 * 2.0 * L.T @ W @ one
    d = 2.0 * one @ W @ one

    def fun(u):
        return float(u @ Q @ u + c @ u + d), 2.0 * Q @ u + c

    return fun


def brute_force_control_search(theta: float, r0: float, T: float,
                               segments=(20, 40, 80, 160)) -> BruteForceResult:
    """Numerical optimisation over piecewise-constant deterministic controls,
    refining the partition and warm-starting from the coarser optimum."""
    u = None
    history = []
    for n_seg in segments:
        fun = _reduced_cost(theta, r0, T, n_seg)
        x0 = np.zeros(n_seg) if u is None else np.repeat(u, n_seg // u.size)
        if x0.size != n_seg:
            x0 = np.interp(np.linspace(0, 1, n_seg), np.linspace(0, 1, u.size), u)
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12,
                                                                      "maxiter": 10000})
        u = res.x
        history.append((n_seg, -float(res.fun)))
    return BruteForceResult(u, history[-1][1], history)


# ---------------------------------------------------------------------------
# N-sector economy and chaos


def n_agent_simulate(vs: VasicekScenario, N: int, u=None, paper_averaging: bool = False,
                     seed: int | None = None, threads: int = 1) -> ParticleEnsemble:
    """Coupled ``N``-sector system with independent noise per sector and the
    average ``(1/N) sum r^j`` (or ``(1/sqrt N) sum r^j``)."""
    if N < 2:
        raise InvalidArgument("the N-sector system needs N >= 2")
    s = build_mean_field_scenario(vs)
    cs = s.dynamics.coefficient_set()
    if paper_averaging:
        scale = np.sqrt(N)
        cs = CoefficientSet(cs.drift, cs.jump, {"mean": lambda x: x * scale}, name=cs.name)
    cfg = s.config.with_(N=N, seed=vs.seed if seed is None else seed)
    return interacting_particle_solve(cs, vs.r0, cfg.make_noise(), u=u, threads=threads)


@dataclass
class ChaosResult:
    rows: list  # (N, mean W2, standard error, replications)
    slope: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "w2_mean", "w2_se", "replications"])
            for N, m, se, r in self.rows:
                w.writerow([N, _output.fmt(m), _output.fmt(se), r])


def chaos_study(vs: VasicekScenario, Ns=(100, 1000, 10000), n_rep: int = 5, N_ref: int = 100_000,
                paper_averaging: bool = False, threads: int = 1) -> ChaosResult:
    """Distance between the law of a tagged sector and the mean-field law.

    By exchangeability the tagged-sector law is estimated by the pooled
    cross-section of each ``N``-system; the mean-field law by a Picard
    solution with ``N_ref`` particles on an independent seed. The distance
    is the largest marginal W2 over the knots, averaged over replications.
    """
    s = build_mean_field_scenario(vs)
    ref_noise = s.config.with_(N=N_ref).make_noise(copy_seed(vs.seed))
    Q_ref, _, _ = picard_law_solve(s.dynamics.coefficient_set(), vs.r0, ref_noise, threads=threads)
    rows = []
    for N in Ns:
        d = []
        for r in range(n_rep):
            ens = n_agent_simulate(vs, int(N), paper_averaging=paper_averaging,
                                   seed=vs.seed + 1 + r, threads=threads)
            d.append(law_flow_distance(ens.law(), Q_ref))
        d = np.asarray(d)
        se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else float("nan")
        rows.append((int(N), float(d.mean()), se, int(n_rep)))
    if len(rows) >= 2:
        slope = float(np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0])
    else:
        slope = float("nan")
    return ChaosResult(rows, slope)


# ---------------------------------------------------------------------------
# full pipeline


class CandidateFeedback:
    """``u(x) = clip(-(theta_t / 2) pF_t(x))`` with ``pF`` read off the
    adjoint's per-knot regression fits (deterministic intensity)."""

    def __init__(self, adj: BSDESolution, ens: ParticleEnsemble, theta: np.ndarray):
        if not ens.noise.intensity.deterministic:
            raise InvalidArgument("feedback from the adjoint needs a deterministic intensity")
        self.adj = adj
        self.theta = np.asarray(theta, dtype=float)
        lamB, lamH = ens.noise.path_intensity()
        self.lamB = lamB[0]
        self.lamH = lamH[0]

    def pF(self, i: int, x: np.ndarray) -> np.ndarray:
        n = self.adj.grid.n_steps
        j = min(i, n - 1)
        x = np.asarray(x, dtype=float)
        cols = np.column_stack((x, np.full(x.size, self.lamB[j]), np.full(x.size, self.lamH[j])))
        return self.adj.proj_Y[j].predict(self.adj.basis.features(cols))[:, 0]

    def __call__(self, i: int, t: float, x: np.ndarray) -> np.ndarray:
        return -0.5 * self.theta[min(i, self.theta.size - 1)] * self.pF(i, x)


@dataclass
class VasicekReport:
    grid: TimeGrid
    J: dict
    u_hat: np.ndarray            # per knot, mean over particles
    u_star: np.ndarray | None
    mean_r: np.ndarray
    pF_mean: np.ndarray
    oracle_rel_l2: float | None
    fixed_point_gap: float
    necessary: dict
    sufficient: dict
    perturbation_pass_fraction: float
    perturbations: list
    adjoint_trace: list

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "oracle_rel_l2": self.oracle_rel_l2,
            "fixed_point_gap": self.fixed_point_gap,
            "perturbation_pass_fraction": self.perturbation_pass_fraction,
            "perturbations": self.perturbations,
            "necessary": self.necessary,
            "sufficient": self.sufficient,
            "adjoint_beta_trace": self.adjoint_trace,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knot", "t", "mean_r", "u_hat", "u_star", "pF_mean"])
            for i, t in enumerate(self.grid.knots):
                us = "" if self.u_star is None else _output.fmt(self.u_star[i])
                w.writerow([i, _output.fmt(t), _output.fmt(self.mean_r[i]), _output.fmt(self.u_hat[i]), us,
                            _output.fmt(self.pF_mean[i])])


def _paired(a: np.ndarray, b: np.ndarray):
    d = a - b
    return float(np.mean(d)), float(np.std(d, ddof=1) / np.sqrt(d.size))


def run_example(vs: VasicekScenario, n_fb_iter: int = 3, basis: RegressionBasis | None = None,
                n_perturb: int = 40, perturb_size: float = 0.1, G: int = 101, n_probe: int = 200,
                threads: int = 1) -> VasicekReport:
    """Forward-backward iteration on the candidate ``u = -(theta/2) pF`` and
    the full set of checks at the result."""
    s = build_mean_field_scenario(vs)
    grid = s.grid
    n = grid.n_steps
    theta = vs.theta_path()
    noise = s.noise()
    cnoise = s.copy_noise()
    oracle = riccati_oracle(float(vs.theta), vs.r0, vs.T, grid) if vs.constant_theta else None

    if oracle is not None:
        ctrl = ControlPath.deterministic(oracle.u_star, s.U, clip=True)
    else:
        ctrl = ControlPath.constant(0.0, s.U, grid.n_knots)
    for _ in range(max(n_fb_iter, 1)):
        ens = solve_controlled_forward(s, ctrl, noise, threads=threads)
        cp = solve_controlled_forward(s, ctrl, cnoise, threads=threads)
        adj = solve_adjoint(assemble_adjoint(s, ens, cp), ens, cp, basis)
        ctrl = ControlPath.feedback(CandidateFeedback(adj.bsde, ens, theta), s.U)

    ens = solve_controlled_forward(s, ctrl, noise, threads=threads)
    cp = solve_controlled_forward(s, ctrl, cnoise, threads=threads)
    adj = solve_adjoint(assemble_adjoint(s, ens, cp), ens, cp, basis)
    u_hat = np.clip(-0.5 * theta[None, :] * adj.pF, *s.U)
    gap = float(np.sqrt(np.mean((u_hat[:, :n] - ens.controls[:, :n]) ** 2)))

    nec = check_necessary(s, ens, adj, u_hat, G=G)
    suf = check_sufficient(s, ens, adj, u_hat, G=G, n_probe=n_probe, seed=vs.seed)

    base = objective_samples(s, ens)
    zero = objective_samples(s, solve_controlled_forward(s, None, noise, threads=threads))
    J = {"u_hat": float(base.mean()), "u_hat_se": float(base.std(ddof=1) / np.sqrt(base.size)),
         "zero": float(zero.mean())}
    rel = None
    perturbations = []
    passed = 0
    if oracle is not None:
        star = objective_samples(s, solve_controlled_forward(
            s, ControlPath.deterministic(oracle.u_star, s.U, clip=True), noise, threads=threads))
        J["u_star"] = float(star.mean())
        J["reduced_value"] = oracle.value
        um = u_hat.mean(axis=0)
        rel = float(np.linalg.norm(um[:n] - oracle.u_star[:n]) / np.linalg.norm(oracle.u_star[:n]))
        ref = oracle.u_star
    else:
        ref = u_hat.mean(axis=0)
    for j in range(n_perturb):
        rng = substream(vs.seed, "direction", 1, j)
        levels = rng.uniform(-perturb_size, perturb_size, size=5)
        pert = np.clip(ref + levels[np.minimum(np.arange(grid.n_knots) * 5 // grid.n_knots, 4)], *s.U)
        other = objective_samples(s, solve_controlled_forward(s, ControlPath.deterministic(pert, s.U),
                                                              noise, threads=threads))
        diff, se = _paired(base, other)
        ok = diff >= -5 * se
        passed += ok
        perturbations.append({"J": float(other.mean()), "diff": diff, "se": se, "pass": bool(ok)})
    frac = passed / n_perturb if n_perturb else 1.0
    return VasicekReport(grid, J, u_hat.mean(axis=0), None if oracle is None else oracle.u_star,
                         ens.mean(), adj.pF.mean(axis=0), rel, gap, nec.to_dict(), suf.to_dict(),
                         frac, perturbations, list(adj.bsde.trace))
