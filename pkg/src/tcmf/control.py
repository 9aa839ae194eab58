"""Controlled mean-field dynamics, adjoint equation, Hamiltonians and the
maximum-principle checks.

State dynamics ``dX = b(t, lam, X, E[X], u) dt + int kappa(t, z, lam, X, E[X], u) mu(dt, dz)``
and objective ``J(u) = E[int f(t, lam, X, E[phi(X)], u) dt + g(X_T, E[chi(X_T)])]``,
to be maximised over controls with values in ``U = [u_min, u_max]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _output
from ._rng import substream
from .errors import InvalidArgument
from .mfbsde import BSDESolution, LinearCoefficients, solve_linear, state_columns
from .mfsde import CoefficientSet, EnsembleConfig, ParticleEnsemble, control_at, copy_seed, picard_law_solve
from .noise import IntensityModel, LevyGrid, NoiseIncrements, TimeGrid
from .regression import RegressionBasis

FD_STEP = 1e-5

# argument position of x, y, u in each function's signature
_POS = {
    "b": {"x": 3, "y": 4, "u": 5},
    "k": {"x": 4, "y": 5, "u": 6},
    "f": {"x": 3, "y": 4, "u": 5},
    "g": {"x": 0, "y": 1},
    "phi": {"x": 0},
    "chi": {"x": 0},
}


def central_difference(fn: Callable, args: tuple, pos: int, h: float = FD_STEP):
    up = list(args)
    dn = list(args)
    up[pos] = np.asarray(args[pos], dtype=float) + h
    dn[pos] = np.asarray(args[pos], dtype=float) - h
    return (np.asarray(fn(*up)) - np.asarray(fn(*dn))) / (2 * h)


def _partial(funcs: Mapping, partials: Mapping, name: str, *args):
    """Analytic partial ``name`` (e.g. ``"b_x"``) if supplied, else a central
    difference of the underlying function."""
    if name in partials:
        return partials[name](*args)
    base, var = name.split("_")
    fn = funcs.get(base)
    if fn is None:
        raise InvalidArgument(f"no function {base!r} to differentiate")
    return central_difference(fn, args, _POS[base][var])


@dataclass(frozen=True)
class Dynamics:
    """``b(t, lamB, lamH, x, y, u)`` and ``kappa(t, z, lamB, lamH, x, y, u)``;
    ``kappa`` receives the slot row ``z`` and column-shaped state arguments.
    ``partials`` may hold any of ``b_x, b_y, b_u, k_x, k_y, k_u``."""

    b: Callable
    kappa: Callable
    partials: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"
    K: float = np.inf

    def d(self, name: str, *args):
        return _partial({"b": self.b, "k": self.kappa}, self.partials, name, *args)

    def coefficient_set(self) -> CoefficientSet:
        b, kappa = self.b, self.kappa

        def drift(t, lamB, lamH, x, feats, u):
            return b(t, lamB, lamH, x, feats["mean"], u)

        def jump(t, z, lamB, lamH, x, feats, u):
            return kappa(t, z, lamB, lamH, x, feats["mean"], u)

        return CoefficientSet(drift, jump, {"mean": None}, name=self.name, lipschitz=self.K)


@dataclass(frozen=True)
class Costs:
    """``f(t, lamB, lamH, x, y, u)``, ``g(x, y)``, ``phi(x)``, ``chi(x)``;
    ``partials`` may hold ``f_x, f_y, f_u, g_x, g_y, phi_x, chi_x``."""

    f: Callable
    g: Callable
    phi: Callable = staticmethod(lambda x: x)
    chi: Callable = staticmethod(lambda x: 0.0 * x)
    partials: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"

    def d(self, name: str, *args):
        funcs = {"f": self.f, "g": self.g, "phi": self.phi, "chi": self.chi}
        return _partial(funcs, self.partials, name, *args)


@dataclass(frozen=True)
class Scenario:
    dynamics: Dynamics
    costs: Costs
    U: tuple
    grid: TimeGrid
    intensity: IntensityModel
    levy: LevyGrid
    x0: float
    N: int
    seed: int = 0
    iid_intensity: bool = False
    name: str = "custom"

    def __post_init__(self):
        lo, hi = (float(v) for v in self.U)
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise InvalidArgument("U must be a nonempty bounded interval")
        object.__setattr__(self, "U", (lo, hi))
        if self.N < 2:
            raise InvalidArgument("a scenario needs at least two particles")

    @property
    def config(self) -> EnsembleConfig:
        return EnsembleConfig(self.grid, self.intensity, self.levy, self.N, self.seed, self.iid_intensity)

    def noise(self, seed: int | None = None) -> NoiseIncrements:
        return self.config.make_noise(seed)

    def copy_noise(self) -> NoiseIncrements:
        return self.config.make_noise(copy_seed(self.seed))

    def u_grid(self, G: int = 101) -> np.ndarray:
        return np.linspace(self.U[0], self.U[1], G)


# ---------------------------------------------------------------------------
# controls


class ControlPath:
    """Admissible control: a deterministic path, per-particle values, or a
    feedback rule ``rule(i, t, x)`` evaluated on left-knot states (clipped to
    ``U``)."""

    def __init__(self, kind: str, U: tuple, values=None, rule: Callable | None = None):
        if kind not in ("path", "particle", "feedback"):
            raise InvalidArgument(f"unknown control kind {kind!r}")
        self.kind = kind
        self.U = (float(U[0]), float(U[1]))
        self.rule = rule
        self.values = None
        if kind != "feedback":
            v = np.asarray(values, dtype=float)
            if not np.all(np.isfinite(v)):
                raise InvalidArgument("control values must be finite")
            span = max(1.0, abs(self.U[0]), abs(self.U[1]))
            if np.any(v < self.U[0] - 1e-12 * span) or np.any(v > self.U[1] + 1e-12 * span):
                raise InvalidArgument("control values leave U")
            v = np.clip(v, *self.U)
            v.setflags(write=False)
            self.values = v
        elif rule is None:
            raise InvalidArgument("feedback controls need a rule")

    @classmethod
    def constant(cls, c: float, U: tuple, n_knots: int) -> "ControlPath":
        return cls("path", U, np.full(n_knots, float(c)))

    @classmethod
    def deterministic(cls, values, U: tuple, clip: bool = False) -> "ControlPath":
        v = np.asarray(values, dtype=float)
        return cls("path", U, np.clip(v, *U) if clip else v)

    @classmethod
    def per_particle(cls, values, U: tuple, clip: bool = False) -> "ControlPath":
        v = np.asarray(values, dtype=float)
        if v.ndim != 2:
            raise InvalidArgument("per-particle controls are (N, n_knots)")
        return cls("particle", U, np.clip(v, *U) if clip else v)

    @classmethod
    def feedback(cls, rule: Callable, U: tuple) -> "ControlPath":
        return cls("feedback", U, rule=rule)

    def at(self, i: int, t: float, x: np.ndarray):
        if self.kind == "path":
            return np.broadcast_to(self.values[i], np.shape(x))
        if self.kind == "particle":
            if self.values.shape[0] != np.size(x):
                raise InvalidArgument("per-particle control does not match the ensemble size")
            return self.values[:, i]
        return np.clip(np.broadcast_to(self.rule(i, t, x), np.shape(x)), *self.U)


def solve_controlled_forward(s: Scenario, u: ControlPath | None = None, noise: NoiseIncrements | None = None,
                             tol: float = 1e-10, max_iter: int = 60, threads: int = 1, full: bool = False):
    """Picard-on-law solution of the controlled state equation."""
    noise = s.noise() if noise is None else noise
    Q, ens, diag = picard_law_solve(s.dynamics.coefficient_set(), s.x0, noise, tol=tol,
                                    max_iter=max_iter, u=u, threads=threads)
    return (ens, diag) if full else ens


def _controls(e: ParticleEnsemble) -> np.ndarray:
    return np.zeros_like(e.paths) if e.controls is None else e.controls


def objective_samples(s: Scenario, e: ParticleEnsemble) -> np.ndarray:
    """Per-particle contribution to ``J`` (inner expectations from the
    cross-section, left-point rule in time)."""
    grid = e.grid
    lamB, lamH = e.noise.path_intensity()
    U = _controls(e)
    c = s.costs
    acc = np.zeros(e.N)
    for i in range(grid.n_steps):
        x = e.paths[:, i]
        y = np.mean(np.broadcast_to(c.phi(x), x.shape))
        acc += np.broadcast_to(c.f(grid.knots[i], lamB[:, i], lamH[:, i], x, y, U[:, i]), x.shape) * grid.dt
    xT = e.paths[:, -1]
    yT = np.mean(np.broadcast_to(c.chi(xT), xT.shape))
    return acc + np.broadcast_to(c.g(xT, yT), xT.shape)


def estimate_objective(s: Scenario, e: ParticleEnsemble, u: ControlPath | None = None) -> float:
    return float(np.mean(objective_samples(s, e)))


# ---------------------------------------------------------------------------
# adjoint


@dataclass(frozen=True)
class AdjointSpec:
    """Coefficients ``A..E`` of ``dp = -(A + B p + E'[C p'] + ..) dt + q dmu``
    and the terminal value."""

    coeffs: LinearCoefficients
    terminal: np.ndarray


@dataclass
class AdjointSolution:
    bsde: BSDESolution
    pF: np.ndarray
    qF: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return self.bsde.Y

    @property
    def q(self) -> np.ndarray:
        return self.bsde.Z


def _along(s: Scenario, e: ParticleEnsemble, i: int):
    """``(t, lamB, lamH, x, E[X], E[phi(X)], u)`` at knot ``i``."""
    lamB, lamH = e.noise.path_intensity()
    x = e.paths[:, i]
    y1 = float(np.mean(np.broadcast_to(s.costs.phi(x), x.shape)))
    return e.grid.knots[i], lamB[:, i], lamH[:, i], x, float(np.mean(x)), y1, _controls(e)[:, i]


def _kappa_args(lamB, lamH, x, y, u):
    return (np.asarray(lamB, dtype=float)[..., None], np.asarray(lamH, dtype=float)[..., None],
            np.asarray(x, dtype=float)[..., None], y, np.asarray(u, dtype=float)[..., None])


def _coefficient_paths(s: Scenario, e: ParticleEnsemble):
    n = e.grid.n_steps
    S = e.noise.levy.M + 1
    z = e.noise.levy.slots
    dyn, c = s.dynamics, s.costs
    out = {k: np.empty((e.N, n)) for k in ("fx", "fy", "phix", "bx", "by")}
    out["kx"] = np.empty((e.N, n, S))
    out["ky"] = np.empty((e.N, n, S))
    for i in range(n):
        t, lb, lh, x, y2, y1, u = _along(s, e, i)
        shape = x.shape
        out["fx"][:, i] = np.broadcast_to(c.d("f_x", t, lb, lh, x, y1, u), shape)
        out["fy"][:, i] = np.broadcast_to(c.d("f_y", t, lb, lh, x, y1, u), shape)
        out["phix"][:, i] = np.broadcast_to(c.d("phi_x", x), shape)
        out["bx"][:, i] = np.broadcast_to(dyn.d("b_x", t, lb, lh, x, y2, u), shape)
        out["by"][:, i] = np.broadcast_to(dyn.d("b_y", t, lb, lh, x, y2, u), shape)
        ka = _kappa_args(lb, lh, x, y2, u)
        out["kx"][:, i] = np.broadcast_to(dyn.d("k_x", t, z, *ka), (e.N, S))
        out["ky"][:, i] = np.broadcast_to(dyn.d("k_y", t, z, *ka), (e.N, S))
    return out


def _terminal_adjoint(s: Scenario, e: ParticleEnsemble) -> np.ndarray:
    c = s.costs
    xT = e.paths[:, -1]
    yT = float(np.mean(np.broadcast_to(c.chi(xT), xT.shape)))
    gx = np.broadcast_to(c.d("g_x", xT, yT), xT.shape)
    gy = float(np.mean(np.broadcast_to(c.d("g_y", xT, yT), xT.shape)))
    return np.asarray(gx + gy * np.broadcast_to(c.d("chi_x", xT), xT.shape), dtype=float)


def assemble_adjoint(s: Scenario, e: ParticleEnsemble, copy: ParticleEnsemble | None = None) -> AdjointSpec:
    """``A = f_x + E'[f_y'] phi_x``, ``B = b_x``, ``C = b_y'``, ``D = kappa_x``,
    ``E = kappa_y'`` along the ensemble; primed factors come from ``copy``."""
    copy = e if copy is None else copy
    own = _coefficient_paths(s, e)
    cop = own if copy is e else _coefficient_paths(s, copy)
    co = LinearCoefficients(A=own["fx"], A_own=own["phix"], A_copy=cop["fy"],
                            B=own["bx"], C=cop["by"], D=own["kx"], E=cop["ky"])
    return AdjointSpec(co, _terminal_adjoint(s, e))


def project_to_F(sol: BSDESolution, e: ParticleEnsemble, basis: RegressionBasis | None = None):
    """``(pF, qF)``: conditional expectations of ``(Y, Z)`` given the
    observable filtration. Identity when the intensity is deterministic;
    otherwise a per-knot regression on ``(X, X^2, running int dG)``."""
    if e.noise.intensity.deterministic:
        return sol.Y.copy(), sol.Z.copy()
    basis = basis or RegressionBasis(degree=1)
    n = e.grid.n_steps
    G = np.concatenate((np.zeros((e.N, 1)), np.cumsum(e.noise.dG, axis=1)), axis=1)
    pF = np.empty_like(sol.Y)
    qF = np.empty_like(sol.Z)
    for i in range(n + 1):
        x = e.paths[:, i]
        F = basis.features(np.column_stack((x, x * x, G[:, i])))
        pF[:, i] = basis.project(F, sol.Y[:, i])
        if i < n:
            qF[:, i] = basis.project(F, sol.Z[:, i])
    return pF, qF


def solve_adjoint(spec: AdjointSpec, e: ParticleEnsemble, copy: ParticleEnsemble | None = None,
                  basis: RegressionBasis | None = None, tol: float = 1e-10, max_iter: int = 40,
                  F_basis: RegressionBasis | None = None) -> AdjointSolution:
    """Solve the adjoint equation. Its drift carries a minus sign relative to
    the solver convention ``dY = h dt + Z dmu``, hence the negation."""
    sol = solve_linear(spec.coeffs.negated(), spec.terminal, e, copy, basis, tol=tol, max_iter=max_iter)
    pF, qF = project_to_F(sol, e, F_basis)
    return AdjointSolution(sol, pF, qF)


# ---------------------------------------------------------------------------
# Hamiltonians


def _slots(q) -> np.ndarray:
    return q.slots() if hasattr(q, "slots") else np.asarray(q, dtype=float)


def _mass(lamB, lamH, lg: LevyGrid) -> np.ndarray:
    lamB = np.asarray(lamB, dtype=float)[..., None]
    lamH = np.asarray(lamH, dtype=float)[..., None]
    if not lg.M:
        return lamB
    lead = np.broadcast_shapes(lamB.shape[:-1], lamH.shape[:-1])
    return np.concatenate((np.broadcast_to(lamB, lead + (1,)),
                           np.broadcast_to(lamH * lg.weights, lead + (lg.M,))), axis=-1)


def hamiltonian(t, lamB, lamH, x, y1, y2, u, p, q, lg: LevyGrid, s: Scenario):
    """``f + b p + kappa(0) q(0) lamB + sum_k kappa(z_k) q(z_k) lamH nu_k``."""
    dyn = s.dynamics
    k = dyn.kappa(t, lg.slots, *_kappa_args(lamB, lamH, x, y2, u))
    noise_term = np.sum(k * _slots(q) * _mass(lamB, lamH, lg), axis=-1)
    return s.costs.f(t, lamB, lamH, x, y1, u) + dyn.b(t, lamB, lamH, x, y2, u) * p + noise_term


def f_hamiltonian(t, lamB, lamH, x, y1, y2, u, pF, qF, lg: LevyGrid, s: Scenario):
    """The same expression evaluated at the projected adjoint ``(pF, qF)``."""
    return hamiltonian(t, lamB, lamH, x, y1, y2, u, pF, qF, lg, s)


def hamiltonian_du(t, lamB, lamH, x, y1, y2, u, p, q, lg: LevyGrid, s: Scenario):
    """``dH/du``: analytic when the scenario supplies all ``u``-partials."""
    dyn, c = s.dynamics, s.costs
    have = all(k in dyn.partials for k in ("b_u", "k_u")) and "f_u" in c.partials
    if not have:
        return central_difference(lambda uu: hamiltonian(t, lamB, lamH, x, y1, y2, uu, p, q, lg, s), (u,), 0)
    ku = dyn.d("k_u", t, lg.slots, *_kappa_args(lamB, lamH, x, y2, u))
    return (c.d("f_u", t, lamB, lamH, x, y1, u) + dyn.d("b_u", t, lamB, lamH, x, y2, u) * p
            + np.sum(ku * _slots(q) * _mass(lamB, lamH, lg), axis=-1))


# ---------------------------------------------------------------------------
# variation process and Gateaux derivative


def _direction_values(v, e: ParticleEnsemble) -> np.ndarray:
    out = np.empty((e.N, e.grid.n_knots))
    for i in range(e.grid.n_knots):
        out[:, i] = np.broadcast_to(control_at(v, i, e.grid.knots[i], e.paths[:, i]), (e.N,))
    return out


def solve_variation(s: Scenario, e: ParticleEnsemble, v) -> ParticleEnsemble:
    """``dZ = (b_x Z + b_y E[Z] + b_u v) dt + int (kappa_x Z + kappa_y E[Z] + kappa_u v) dmu``,
    ``Z_0 = 0``, with coefficients frozen along the ensemble ``e``.

    ``E[Z]`` is the cross-sectional mean, which is what the law fixed point
    reduces to for coefficients that see the law only through its mean.
    """
    grid = e.grid
    n, dt = grid.n_steps, grid.dt
    dyn = s.dynamics
    z = e.noise.levy.slots
    V = _direction_values(v, e)
    Z = np.zeros((e.N, n + 1))
    for i in range(n):
        t, lb, lh, x, y2, _, u = _along(s, e, i)
        zi = Z[:, i]
        mz = float(np.mean(zi))
        drift = (dyn.d("b_x", t, lb, lh, x, y2, u) * zi + dyn.d("b_y", t, lb, lh, x, y2, u) * mz
                 + dyn.d("b_u", t, lb, lh, x, y2, u) * V[:, i])
        ka = _kappa_args(lb, lh, x, y2, u)
        loading = (dyn.d("k_x", t, z, *ka) * zi[:, None] + dyn.d("k_y", t, z, *ka) * mz
                   + dyn.d("k_u", t, z, *ka) * V[:, i, None])
        Z[:, i + 1] = zi + drift * dt + np.sum(loading * e.noise.slot_increments(i), axis=1)
    return ParticleEnsemble(grid, Z, e.noise, V, {})


@dataclass(frozen=True)
class GateauxResult:
    formula: float
    finite_difference: float
    se: float
    theta: float

    @property
    def gap(self) -> float:
        return abs(self.formula - self.finite_difference)


def gateaux_samples(s: Scenario, e: ParticleEnsemble, Z: ParticleEnsemble) -> np.ndarray:
    """Per-particle integrand of the derivative formula."""
    grid = e.grid
    c = s.costs
    V = Z.controls
    acc = np.zeros(e.N)
    for i in range(grid.n_steps):
        t, lb, lh, x, _, y1, u = _along(s, e, i)
        zi = Z.paths[:, i]
        inner = float(np.mean(c.d("phi_x", x) * zi))
        acc += (c.d("f_x", t, lb, lh, x, y1, u) * zi + c.d("f_y", t, lb, lh, x, y1, u) * inner
                + c.d("f_u", t, lb, lh, x, y1, u) * V[:, i]) * grid.dt
    xT = e.paths[:, -1]
    zT = Z.paths[:, -1]
    yT = float(np.mean(np.broadcast_to(c.chi(xT), xT.shape)))
    inner = float(np.mean(c.d("chi_x", xT) * zT))
    return acc + c.d("g_x", xT, yT) * zT + c.d("g_y", xT, yT) * inner


def gateaux_derivative(s: Scenario, u_hat: ControlPath | None, v, theta: float = 1e-3,
                       noise: NoiseIncrements | None = None, threads: int = 1) -> GateauxResult:
    """Derivative formula against ``(J(u+theta v) - J(u-theta v)) / (2 theta)``.

    The realised values of ``u_hat`` along the base run are frozen per
    particle, so both perturbed runs use open-loop controls on the same noise.
    """
    noise = s.noise() if noise is None else noise
    base = solve_controlled_forward(s, u_hat, noise, threads=threads)
    Zv = solve_variation(s, base, v)
    samples = np.broadcast_to(gateaux_samples(s, base, Zv), (base.N,))
    U0 = _controls(base)
    V = Zv.controls
    up = solve_controlled_forward(s, ControlPath.per_particle(U0 + theta * V, s.U), noise, threads=threads)
    dn = solve_controlled_forward(s, ControlPath.per_particle(U0 - theta * V, s.U), noise, threads=threads)
    fd = (estimate_objective(s, up) - estimate_objective(s, dn)) / (2 * theta)
    se = float(np.std(samples, ddof=1) / np.sqrt(base.N))
    return GateauxResult(float(np.mean(samples)), float(fd), se, theta)


def random_direction(grid: TimeGrid, seed: int, index: int, scale: float = 1.0, n_pieces: int = 5) -> np.ndarray:
    """Deterministic direction path, piecewise constant on ``n_pieces`` pieces
    with standard normal levels."""
    rng = substream(seed, "direction", 0, index)
    levels = rng.standard_normal(n_pieces) * scale
    idx = np.minimum((np.arange(grid.n_knots) * n_pieces) // grid.n_knots, n_pieces - 1)
    return levels[idx]


# ---------------------------------------------------------------------------
# maximum-principle checks


@dataclass
class MaxPrincipleReport:
    kind: str
    tolerances: dict
    verdicts: dict
    stationarity_residual: float = 0.0
    variational_residual: float = 0.0
    maximization_gap: float = 0.0
    concavity_violations: int = 0
    concavity_probes: int = 0
    knots: list = field(default_factory=list)
    dH_mean: list = field(default_factory=list)
    dH_se: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stationarity_residual": self.stationarity_residual,
            "variational_residual": self.variational_residual,
            "maximization_gap": self.maximization_gap,
            "concavity_violations": self.concavity_violations,
            "concavity_probes": self.concavity_probes,
            "tolerances": self.tolerances,
            "verdicts": self.verdicts,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return _output.dumps(self.to_dict())

    def write_dH_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knot", "dH_du_mean", "dH_du_se"])
            for i, m, se in zip(self.knots, self.dH_mean, self.dH_se):
                w.writerow([i, _output.fmt(m), _output.fmt(se)])


def _u_values(e: ParticleEnsemble, u) -> np.ndarray:
    if u is None:
        return _controls(e)
    a = np.asarray(u, dtype=float)
    return np.broadcast_to(a, e.paths.shape)


def check_necessary(s: Scenario, e: ParticleEnsemble, adj: AdjointSolution, u_values=None,
                    G: int = 101, tol: float = 1e-8) -> MaxPrincipleReport:
    """Variational inequality ``dH^F/du (v - u) <= 0`` over a ``U``-grid and
    stationarity at interior control values."""
    U = _u_values(e, u_values)
    vgrid = s.u_grid(G)
    lg = e.noise.levy
    lo, hi = s.U
    span = max(1.0, abs(lo), abs(hi))
    var_res = 0.0
    stat_res = 0.0
    means, ses, knots = [], [], []
    within = True
    for i in range(e.grid.n_steps):
        t, lb, lh, x, y2, y1, _ = _along(s, e, i)
        u = U[:, i]
        dH = np.broadcast_to(hamiltonian_du(t, lb, lh, x, y1, y2, u, adj.pF[:, i], adj.qF[:, i], lg, s), u.shape)
        gain = np.maximum(dH[:, None] * (vgrid[None, :] - u[:, None]), 0.0).max(axis=1)
        var_res = max(var_res, float(np.mean(gain)))
        interior = (u > lo + 1e-12 * span) & (u < hi - 1e-12 * span)
        d = dH[interior]
        m = float(np.mean(d)) if d.size else 0.0
        se = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        stat_res = max(stat_res, float(np.mean(np.abs(d))) if d.size else 0.0)
        within &= abs(m) <= 5 * se + tol
        knots.append(i)
        means.append(m)
        ses.append(se)
    return MaxPrincipleReport(
        "necessary", {"variational": tol, "stationarity": tol, "G": G},
        {"variational_inequality": var_res <= tol, "stationarity_within_5se": bool(within)},
        stationarity_residual=stat_res, variational_residual=var_res,
        knots=knots, dH_mean=means, dH_se=ses)


def _h_grid(s, t, lb, lh, x, y1, y2, p, q, vgrid, lg):
    """``max_v H^F`` over the grid for probe points ``x, y1, y2`` of shape ``(P,)``."""
    vals = f_hamiltonian(t, lb, lh, x[:, None], y1[:, None], y2[:, None], vgrid[None, :],
                         p, q[None, None, :] if np.ndim(q) == 1 else q, lg, s)
    return np.max(vals, axis=1)


def check_sufficient(s: Scenario, e: ParticleEnsemble, adj: AdjointSolution, u_values=None,
                     G: int = 101, n_probe: int = 200, tol: float = 1e-9, gap_tol: float = 1e-9,
                     seed: int = 0) -> MaxPrincipleReport:
    """(i) ``H^F`` at the control attains the ``U``-grid maximum; (ii) the
    grid maximum ``h`` is midpoint-concave in ``(x, y1, y2)`` at random
    probes, with ``(t, lam, pF, qF)`` taken from a random (knot, particle)."""
    U = _u_values(e, u_values)
    vgrid = s.u_grid(G)
    lg = e.noise.levy
    n = e.grid.n_steps
    gap = 0.0
    for i in range(n):
        t, lb, lh, x, y2, y1, _ = _along(s, e, i)
        p, q = adj.pF[:, i], adj.qF[:, i]
        Hg = f_hamiltonian(t, lb[:, None], lh[:, None], x[:, None], y1, y2, vgrid[None, :],
                           p[:, None], q[:, None, :], lg, s)
        Hu = f_hamiltonian(t, lb, lh, x, y1, y2, U[:, i], p, q, lg, s)
        gap = max(gap, float(np.max(np.max(Hg, axis=1) - Hu)))

    rng = substream(seed, "probe")
    violations = 0
    probes = 0
    alphas = np.array([0.25, 0.5, 0.75])
    lamB_all, lamH_all = e.noise.path_intensity()
    for _ in range(n_probe):
        i = int(rng.integers(n))
        k = int(rng.integers(e.N))
        x = e.paths[:, i]
        y1 = float(np.mean(np.broadcast_to(s.costs.phi(x), x.shape)))
        y2 = float(np.mean(x))
        lo = np.array([x.min() - 1.0, y1 - 1.0, y2 - 1.0])
        hi = np.array([x.max() + 1.0, y1 + 1.0, y2 + 1.0])
        P0, P1 = rng.uniform(lo, hi, size=(2, 3))
        pts = np.vstack((P0, P1, alphas[:, None] * P0 + (1 - alphas[:, None]) * P1))
        t = e.grid.knots[i]
        lb, lh = lamB_all[k, i], lamH_all[k, i]
        h = _h_grid(s, t, lb, lh, pts[:, 0], pts[:, 1], pts[:, 2], adj.pF[k, i], adj.qF[k, i], vgrid, lg)
        chord = alphas * h[0] + (1 - alphas) * h[1]
        violations += int(np.sum(h[2:] < chord - tol))
        probes += alphas.size
    gap = max(gap, 0.0)
    return MaxPrincipleReport(
        "sufficient", {"concavity": tol, "maximization": gap_tol, "G": G},
        {"maximization": gap <= gap_tol, "concavity": violations == 0},
        maximization_gap=gap, concavity_violations=violations, concavity_probes=probes)
