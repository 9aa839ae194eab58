"""Mean-field BSDEs ``dY = E'[h(..)] dt + int Z dmu``, ``Y_T = F``.

``E'`` averages over an independent copy of the solution. Numerically the
copy is a second forward ensemble drawn with a disjoint seed; the previous
Picard iterate is evaluated on it through the stored regression fits, which
makes ``E'[Y'] = E[Y]`` and ``E'[Y] = Y`` hold by construction.

Each Picard step freezes the primed arguments and solves the resulting
standard BSDE backward in time with least-squares regression:

* ``Z_i(0) ~ E_i[(Y_{i+1} - E_i Y_{i+1}) dG_i] / (lamB_i dt)`` and the same
  for each jump cell with ``dJ_{i,k}`` and ``lamH_i nu_k dt``;
* ``Y_i ~ E_i[Y_{i+1} - h(t_i, .., y_pred, Z_i) dt]`` with an explicit
  predictor ``y_pred`` and one correction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ExplosionError, InvalidArgument
from .mfsde import ParticleEnsemble
from .regression import Projection, RegressionBasis


def state_columns(ens: ParticleEnsemble, i: int) -> np.ndarray:
    """Regression inputs at knot ``i``: the state and both intensities."""
    lamB, lamH = ens.noise.path_intensity()
    return np.column_stack((ens.paths[:, i], lamB[:, i], lamH[:, i]))


def _slot_mass(ens: ParticleEnsemble, i: int) -> np.ndarray:
    """``(lamB_i, lamH_i nu_1, .., lamH_i nu_M)`` per particle (no ``dt``)."""
    lamB, lamH = ens.noise.path_intensity()
    w = ens.noise.levy.weights
    return np.column_stack((lamB[:, i], lamH[:, i, None] * w[None, :]))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearCoefficients:
    """Coefficients of a linear driver.

    ``h = A + A_own * A_copy' + B y + C' y' + sum_slots (D z l + E' z' l')``
    where primed factors live on the copy ensemble and ``l`` is the slot mass
    ``(lamB, lamH nu_k)``. Path-type coefficients take shapes ``()``,
    ``(n_steps,)`` or ``(P, n_steps)``; slot-type ones ``()``, ``(M+1,)``,
    ``(n_steps, M+1)`` or ``(P, n_steps, M+1)``.
    """

    A: np.ndarray = 0.0
    A_own: np.ndarray | None = None
    A_copy: np.ndarray | None = None
    B: np.ndarray = 0.0
    C: np.ndarray = 0.0
    D: np.ndarray = 0.0
    E: np.ndarray = 0.0

    def __post_init__(self):
        for name in ("A", "A_own", "A_copy", "B", "C"):
            v = getattr(self, name)
            if v is None:
                continue
            a = np.asarray(v, dtype=float)
            a = a.reshape((1,) * (2 - a.ndim) + a.shape) if a.ndim < 2 else a
            if a.ndim != 2 or not np.all(np.isfinite(a)):
                raise InvalidArgument(f"coefficient {name} must be finite with at most 2 axes")
            object.__setattr__(self, name, a)
        for name in ("D", "E"):
            a = np.asarray(getattr(self, name), dtype=float)
            a = a.reshape((1,) * (3 - a.ndim) + a.shape) if a.ndim < 3 else a
            if a.ndim != 3 or not np.all(np.isfinite(a)):
                raise InvalidArgument(f"coefficient {name} must be finite with at most 3 axes")
            object.__setattr__(self, name, a)
        if (self.A_own is None) != (self.A_copy is None):
            raise InvalidArgument("A_own and A_copy come in pairs")

    @staticmethod
    def _at(a: np.ndarray, i: int) -> np.ndarray:
        return a[:, i if a.shape[1] > 1 else 0]

    def lipschitz(self, lam_slots: np.ndarray | None = None) -> float:
        """Crude global Lipschitz bound ``max|B| + max|C| + max||D|| + max||E||``."""
        k = float(np.max(np.abs(self.B)) + np.max(np.abs(self.C)))
        for a in (self.D, self.E):
            if lam_slots is None:
                k += float(np.max(np.abs(a)))
            else:
                k += float(np.max(np.sqrt(np.sum(a ** 2 * lam_slots, axis=-1))))
        return k

    def negated(self) -> "LinearCoefficients":
        return LinearCoefficients(-self.A, self.A_own, None if self.A_copy is None else -self.A_copy,
                                  -self.B, -self.C, -self.D, -self.E)


@dataclass(frozen=True)
class Driver:
    """``h(t, lam, lam_c, y, y_c, z, z_c)`` with ``lam = (lamB, lamH)`` and
    ``z`` the slot values ``(z(0), z(z_1), ..)`` on the last axis; own and copy
    arguments broadcast against each other. Linear drivers carry their
    coefficients instead and are evaluated in closed form."""

    h: Callable | None
    K: float
    kind: str = "general"
    linear: LinearCoefficients | None = None

    def __post_init__(self):
        if self.kind not in ("general", "linear"):
            raise InvalidArgument(f"unknown driver kind {self.kind!r}")
        if self.kind == "linear" and self.linear is None:
            raise InvalidArgument("linear drivers need coefficients")
        if self.kind == "general" and self.h is None:
            raise InvalidArgument("general drivers need h")
        if not np.isfinite(self.K) or self.K < 0:
            raise InvalidArgument("Lipschitz constant must be finite and nonnegative")

    def default_beta(self) -> float:
        return 16.0 * self.K ** 2 + 1.0


@dataclass
class BSDESolution:
    grid: object
    Y: np.ndarray
    Z: np.ndarray
    proj_Y: list = field(repr=False, default_factory=list)
    proj_Z: list = field(repr=False, default_factory=list)
    terminal_residual: float = 0.0
    trace: list = field(default_factory=list)
    converged: bool = True
    iterations: int = 1
    beta: float | None = None
    basis: RegressionBasis = field(repr=False, default_factory=RegressionBasis)

    @property
    def Z0(self) -> np.ndarray:
        return self.Z[..., 0]

    @property
    def ZJ(self) -> np.ndarray:
        return self.Z[..., 1:]

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.trace, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]

    def evaluate(self, ens: ParticleEnsemble):
        """``(Y, Z)`` of this solution as functions of the state, evaluated on
        another ensemble. ``Y`` at the last knot is left undefined (NaN)."""
        n = self.grid.n_steps
        Y = np.full((ens.N, n + 1), np.nan)
        Z = np.zeros((ens.N, n, self.Z.shape[-1]))
        basis = self.basis
        for i in range(n):
            Fi = basis.features(state_columns(ens, i))
            Y[:, i] = self.proj_Y[i].predict(Fi)[:, 0]
            z = self.proj_Z[i].predict(Fi)
            Z[:, i] = np.where(_slot_mass(ens, i) > 0, z, 0.0)
        return Y, Z

    def to_csv(self, path) -> None:
        n = self.grid.n_steps
        S = self.Z.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle", "knot", "Y", "Z0"] + [f"Z{k}" for k in range(1, S)])
            for p in range(self.Y.shape[0]):
                for i in range(n + 1):
                    z = self.Z[p, i] if i < n else np.zeros(S)
                    w.writerow([p, i, format(self.Y[p, i], ".17g")] + [format(v, ".17g") for v in z])

    def trace_json(self) -> str:
        return json.dumps({"beta": self.beta, "iterations": self.iterations, "converged": self.converged,
                           "beta_norm_differences": [float(format(d, ".17g")) for d in self.trace]},
                          indent=2)


# ---------------------------------------------------------------------------


def eval_eprime(h: Callable, t: float, own: tuple, copy: tuple, chunk: int = 256) -> np.ndarray:
    """Partial expectation over the primed argument.

    ``own = (lamB, lamH, y, z)`` per particle, ``copy`` the same on the copy
    ensemble; returns ``(1/N') sum_m h(t, lam_n, lam'_m, y_n, y'_m, z_n, z'_m)``.
    """
    lamB, lamH, y, z = (np.asarray(a, dtype=float) for a in own)
    lamBc, lamHc, yc, zc = (np.asarray(a, dtype=float) for a in copy)
    if yc.size == 0:
        raise InvalidArgument("the copy ensemble is empty")
    N = y.shape[0]
    lamB = np.broadcast_to(lamB, (N,))
    lamH = np.broadcast_to(lamH, (N,))
    lamBc = np.broadcast_to(lamBc, yc.shape)
    lamHc = np.broadcast_to(lamHc, yc.shape)
    out = np.empty(N)
    for s in range(0, N, chunk):
        e = min(s + chunk, N)
        val = h(t, (lamB[s:e, None], lamH[s:e, None]), (lamBc[None, :], lamHc[None, :]),
                y[s:e, None], yc[None, :], z[s:e, None, :], zc[None, :, :])
        out[s:e] = np.mean(np.broadcast_to(val, (e - s, yc.size)), axis=1)
    return out


def backward_sweep(driver_tilde: Callable, terminal: np.ndarray, forward: ParticleEnsemble,
                   basis: RegressionBasis | None = None) -> BSDESolution:
    """One backward pass for the frozen driver ``h~(i, t, lamB, lamH, y, z)``."""
    basis = basis or RegressionBasis()
    grid = forward.grid
    n, dt = grid.n_steps, grid.dt
    F = np.asarray(terminal, dtype=float)
    N = forward.N
    if F.shape != (N,):
        raise InvalidArgument(f"terminal has shape {F.shape}, expected ({N},)")
    n_cols = state_columns(forward, 0).shape[1]
    if N < 10 * basis.n_features(n_cols) and N > 1:
        raise InvalidArgument("too few particles for the regression basis")
    lamB_all, lamH_all = forward.noise.path_intensity()
    S = forward.noise.levy.M + 1
    Y = np.empty((N, n + 1))
    Y[:, n] = F
    Z = np.zeros((N, n, S))
    proj_Y: list[Projection] = [None] * n
    proj_Z: list[Projection] = [None] * n
    knots = grid.knots
    for i in range(n - 1, -1, -1):
        Fi = basis.features(state_columns(forward, i))
        inc = forward.noise.slot_increments(i)
        mass = _slot_mass(forward, i) * dt
        y_next = Y[:, i + 1]
        y_hat = basis.fit(Fi, y_next).predict(Fi)[:, 0]
        dev = y_next - y_hat
        targets = np.divide(dev[:, None] * inc, mass, out=np.zeros_like(inc), where=mass > 0)
        pz = basis.fit(Fi, targets)
        Zi = np.where(mass > 0, pz.predict(Fi), 0.0)
        lb, lh = lamB_all[:, i], lamH_all[:, i]
        y_pred = y_hat - driver_tilde(i, knots[i], lb, lh, y_hat, Zi) * dt
        target = y_next - driver_tilde(i, knots[i], lb, lh, y_pred, Zi) * dt
        py = basis.fit(Fi, target)
        Y[:, i] = py.predict(Fi)[:, 0]
        if not np.all(np.isfinite(Y[:, i])):
            raise ExplosionError(int(np.argmax(~np.isfinite(Y[:, i]))), i, "Y")
        Z[:, i] = Zi
        proj_Y[i], proj_Z[i] = py, pz
    return BSDESolution(grid, Y, Z, proj_Y, proj_Z, float(np.max(np.abs(Y[:, n] - F))), basis=basis)


def beta_norm(dY: np.ndarray, dZ: np.ndarray, ens: ParticleEnsemble, beta: float) -> float:
    """``(sum_i e^{beta t_i} mean_n(|dY_i|^2 + ||dZ_i||^2_lam) dt)^(1/2)`` over
    the steps ``i = 0 .. n-1``."""
    grid = ens.grid
    n = grid.n_steps
    total = 0.0
    knots = grid.knots
    for i in range(n):
        zz = np.sum(dZ[:, i] ** 2 * _slot_mass(ens, i), axis=1)
        total += np.exp(beta * knots[i]) * np.mean(dY[:, i] ** 2 + zz) * grid.dt
    return float(np.sqrt(total))


def _linear_tilde(co: LinearCoefficients, forward: ParticleEnsemble, copy: ParticleEnsemble,
                  Yc: np.ndarray, Zc: np.ndarray) -> Callable:
    def h_tilde(i, t, lamB, lamH, y, z):
        own_l = _slot_mass(forward, i)
        cop_l = _slot_mass(copy, i)
        at = LinearCoefficients._at
        A = at(co.A, i)
        if co.A_copy is not None:
            A = A + np.mean(np.broadcast_to(at(co.A_copy, i), (copy.N,))) * at(co.A_own, i)
        meanC = np.mean(np.broadcast_to(at(co.C, i), (copy.N,)) * Yc[:, i])
        meanE = np.mean(np.sum(np.broadcast_to(at(co.E, i), Zc[:, i].shape) * Zc[:, i] * cop_l, axis=1))
        Dz = np.sum(np.broadcast_to(at(co.D, i), z.shape) * z * own_l, axis=1)
        return A + at(co.B, i) * y + meanC + Dz + meanE
    return h_tilde


def picard_bsde(driver: Driver, terminal: np.ndarray, forward: ParticleEnsemble,
                copy: ParticleEnsemble | None = None, basis: RegressionBasis | None = None,
                beta: float | None = None, tol: float = 1e-10, max_iter: int = 40) -> BSDESolution:
    """Iterate the frozen-copy map starting from ``(Y, Z) = 0``.

    The trace records the beta-norm of successive differences; the first
    entry is the distance of the first iterate from zero. ``tol`` is relative
    to the beta-norm of the current iterate, since the weight ``e^{beta T}``
    makes absolute thresholds meaningless for large ``K``.
    """
    basis = basis or RegressionBasis()
    copy = forward if copy is None else copy
    beta = driver.default_beta() if beta is None else float(beta)
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    n = forward.grid.n_steps
    S = forward.noise.levy.M + 1
    lamBc, lamHc = copy.noise.path_intensity()
    prev = None
    prevY = np.zeros((forward.N, n + 1))
    prevZ = np.zeros((forward.N, n, S))
    trace = []
    sol = None
    converged = False
    if max_iter < 1:
        raise InvalidArgument("max_iter must be at least 1")
    for it in range(max_iter):
        if prev is None:
            Yc = np.zeros((copy.N, n + 1))
            Zc = np.zeros((copy.N, n, S))
        else:
            Yc, Zc = prev.evaluate(copy)
        if driver.kind == "linear":
            h_tilde = _linear_tilde(driver.linear, forward, copy, Yc, Zc)
        else:
            def h_tilde(i, t, lamB, lamH, y, z, Yc=Yc, Zc=Zc):
                return eval_eprime(driver.h, t, (lamB, lamH, y, z),
                                   (lamBc[:, i], lamHc[:, i], Yc[:, i], Zc[:, i]))
        sol = backward_sweep(h_tilde, terminal, forward, basis)
        trace.append(beta_norm(sol.Y[:, :n] - prevY[:, :n], sol.Z - prevZ, forward, beta))
        scale = beta_norm(sol.Y[:, :n], sol.Z, forward, beta)
        prev, prevY, prevZ = sol, sol.Y, sol.Z
        converged = trace[-1] <= tol * scale or trace[-1] == 0.0
        if converged:
            break
    sol.trace = trace
    sol.iterations = len(trace)
    sol.converged = converged
    sol.beta = beta
    return sol


def solve_linear(coeffs: LinearCoefficients, terminal: np.ndarray, forward: ParticleEnsemble,
                 copy: ParticleEnsemble | None = None, basis: RegressionBasis | None = None,
                 beta: float | None = None, tol: float = 1e-10, max_iter: int = 40,
                 K: float | None = None) -> BSDESolution:
    """Linear mean-field BSDE; ``K`` defaults to the coefficients' bound."""
    copy = forward if copy is None else copy
    if K is None:
        lam = np.concatenate([_slot_mass(forward, i) for i in range(forward.grid.n_steps)])
        K = coeffs.lipschitz(lam.max(axis=0))
    driver = Driver(None, K, kind="linear", linear=coeffs)
    return picard_bsde(driver, terminal, forward, copy, basis, beta, tol, max_iter)
