"""Forward solvers for mean-field SDEs driven by the mixture noise.

Three entry points share one Euler step:

* :func:`euler_solve_fixed_law` freezes the law flow ``Q`` and integrates the
  resulting ordinary SDE;
* :func:`picard_law_solve` iterates ``Q -> law(X^Q)`` from the Dirac flow at
  ``x0`` with common random numbers until the law flow stops moving;
* :func:`interacting_particle_solve` replaces ``Q`` in-loop by the empirical
  cross-section of the particles.

Coefficients only see the law through declared features ``<g, Q_t>``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ExplosionError, InvalidArgument
from .measures import LawFlow, dirac_flow, law_flow, law_flow_distance
from .noise import IntensityModel, LevyGrid, NoiseIncrements, TimeGrid, sample_intensity, sample_noise


@dataclass(frozen=True)
class CoefficientSet:
    """Drift and noise coefficients of a scalar mean-field SDE.

    ``drift(t, lamB, lamH, x, feats, u)`` returns one value per particle;
    ``jump(t, z, lamB, lamH, x, feats, u)`` is called with ``z`` the row of
    slots ``(0, z_1, .., z_M)`` and column-shaped ``x``/``lam``/``u`` and must
    broadcast to ``(n_particles, M + 1)``. ``feats`` maps each name in
    ``features`` to ``<g, Q_t>`` (``g=None`` is the identity).
    """

    drift: Callable
    jump: Callable
    features: Mapping[str, Callable | None] = field(default_factory=lambda: {"mean": None})
    name: str = "custom"
    lipschitz: float = np.inf
    bound: float = np.inf

    @property
    def law_free(self) -> bool:
        return len(self.features) == 0


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything needed to draw the noise of one particle ensemble."""

    grid: TimeGrid
    intensity: IntensityModel
    levy: LevyGrid
    N: int
    seed: int = 0
    iid_intensity: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise InvalidArgument("ensemble needs at least one particle")

    def make_noise(self, seed: int | None = None) -> NoiseIncrements:
        seed = self.seed if seed is None else seed
        ip = sample_intensity(self.intensity, self.grid, seed,
                              n_paths=self.N if self.iid_intensity else None)
        return sample_noise(ip, self.levy, seed, n_paths=self.N)

    def copy_noise(self) -> NoiseIncrements:
        """Noise for an independent copy of the ensemble (disjoint seed)."""
        return self.make_noise(copy_seed(self.seed))

    def with_(self, **kw) -> "EnsembleConfig":
        d = dict(grid=self.grid, intensity=self.intensity, levy=self.levy, N=self.N,
                 seed=self.seed, iid_intensity=self.iid_intensity)
        d.update(kw)
        return EnsembleConfig(**d)


def copy_seed(seed: int) -> int:
    return int(seed) + 2 ** 31


@dataclass(frozen=True)
class ParticleEnsemble:
    grid: TimeGrid
    paths: np.ndarray
    noise: NoiseIncrements
    controls: np.ndarray | None = None
    features: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    @property
    def x0(self) -> float:
        return float(self.paths[0, 0])

    def law(self) -> LawFlow:
        return law_flow(self.grid, self.paths)

    def mean(self) -> np.ndarray:
        return self.paths.mean(axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particle", "knot", "value"])
            for p in range(self.N):
                for i, v in enumerate(self.paths[p]):
                    w.writerow([p, i, format(float(v), ".17g")])


@dataclass
class PicardDiagnostics:
    iterations: int
    distances: list
    converged: bool
    tol: float

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.distances, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


# ---------------------------------------------------------------------------


def control_at(u, i: int, t: float, x: np.ndarray) -> np.ndarray | float:
    """Control value at step ``i`` for particles in state ``x``.

    ``u`` is ``None`` (zero), a scalar, a ``(n_knots,)`` deterministic path, an
    ``(N, n_knots)`` per-particle path, or any object with ``at(i, t, x)``.
    """
    if u is None:
        return 0.0
    if hasattr(u, "at"):
        return u.at(i, t, x)
    a = np.asarray(u, dtype=float)
    if a.ndim == 0:
        return float(a)
    return a[..., i]


def _features(c: CoefficientSet, sample: np.ndarray) -> dict:
    out = {}
    for name, g in c.features.items():
        vals = sample if g is None else np.asarray(g(sample), dtype=float)
        out[name] = float(np.mean(vals))
    return out


def _rows(a, start, stop):
    a = np.asarray(a)
    return a if a.ndim == 0 else a[start:stop]


def _advance(c: CoefficientSet, noise: NoiseIncrements, i: int, x: np.ndarray, feats: dict,
             u, lamB, lamH, threads: int) -> np.ndarray:
    t = noise.grid.knots[i]
    dt = noise.grid.dt
    z = noise.levy.slots
    inc = noise.slot_increments(i)

    def work(start, stop):
        xs = x[start:stop]
        ub = np.broadcast_to(_rows(u, start, stop), xs.shape)
        lb = np.broadcast_to(_rows(lamB, start, stop), xs.shape)
        lh = np.broadcast_to(_rows(lamH, start, stop), xs.shape)
        b = np.broadcast_to(c.drift(t, lb, lh, xs, feats, ub), xs.shape)
        k = np.broadcast_to(c.jump(t, z, lb[:, None], lh[:, None], xs[:, None], feats, ub[:, None]),
                            (xs.size, z.size))
        return xs + b * dt + np.sum(k * inc[start:stop], axis=1)

    n = x.size
    if threads <= 1 or n < 2 * threads:
        return work(0, n)
    edges = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda ab: work(*ab), zip(edges[:-1], edges[1:])))
    return np.concatenate(parts)


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise ExplosionError(int(np.argmax(~np.isfinite(x))), step)


def _sweep(c: CoefficientSet, x0: float, noise: NoiseIncrements, u, feature_at, threads: int):
    grid = noise.grid
    N = noise.n_paths
    lamB_all, lamH_all = noise.path_intensity()
    paths = np.empty((N, grid.n_knots))
    paths[:, 0] = x0
    ctrl = np.zeros((N, grid.n_knots))
    feats_trace = {name: np.empty(grid.n_knots) for name in c.features}
    knots = grid.knots
    for i in range(grid.n_steps):
        x = paths[:, i]
        feats = feature_at(i, x)
        for name, v in feats.items():
            feats_trace[name][i] = v
        ui = control_at(u, i, knots[i], x)
        ctrl[:, i] = np.broadcast_to(ui, (N,))
        paths[:, i + 1] = _advance(c, noise, i, x, feats, ctrl[:, i], lamB_all[:, i], lamH_all[:, i], threads)
        _check_finite(paths[:, i + 1], i + 1)
    last = feature_at(grid.n_steps, paths[:, -1])
    for name, v in last.items():
        feats_trace[name][-1] = v
    ctrl[:, -1] = np.broadcast_to(control_at(u, grid.n_steps, knots[-1], paths[:, -1]), (N,))
    return ParticleEnsemble(grid, paths, noise, None if u is None else ctrl, feats_trace)


def euler_solve_fixed_law(c: CoefficientSet, Q: LawFlow, x0: float, noise: NoiseIncrements,
                          u=None, threads: int = 1) -> ParticleEnsemble:
    """Euler scheme with the law frozen at ``Q``; left-knot evaluation."""
    if Q.grid != noise.grid:
        raise InvalidArgument("law flow and noise live on different grids")
    cache = [_features(c, Q.atoms[i]) for i in range(Q.grid.n_knots)]
    return _sweep(c, x0, noise, u, lambda i, x: cache[i], threads)


def interacting_particle_solve(c: CoefficientSet, x0: float, noise: NoiseIncrements,
                               u=None, threads: int = 1) -> ParticleEnsemble:
    """N-particle system: features are taken from the current cross-section."""
    if noise.n_paths < 2 and not c.law_free:
        raise InvalidArgument("an interacting system needs at least two particles")
    return _sweep(c, x0, noise, u, lambda i, x: _features(c, x), threads)


def picard_law_solve(c: CoefficientSet, x0: float, noise: NoiseIncrements, tol: float = 1e-10,
                     max_iter: int = 50, u=None, threads: int = 1):
    """Fixed point of ``Q -> law(X^Q)`` under common random numbers.

    Starts from the Dirac flow at ``x0``. Returns the last law, the ensemble
    that produced it, and the iteration trace; running out of iterations is
    reported through ``converged=False`` rather than raised.
    """
    if tol <= 0:
        raise InvalidArgument("tol must be positive")
    Q = dirac_flow(noise.grid, x0, noise.n_paths)
    distances = []
    ens = None
    converged = False
    for _ in range(max_iter):
        ens = euler_solve_fixed_law(c, Q, x0, noise, u=u, threads=threads)
        Q_new = ens.law()
        distances.append(law_flow_distance(Q_new, Q))
        Q = Q_new
        if distances[-1] <= tol:
            converged = True
            break
    return Q, ens, PicardDiagnostics(len(distances), distances, converged, tol)


def moment_check(e: ParticleEnsemble) -> float:
    """Mean over particles of the running sup of ``|X|^2``."""
    return float(np.mean(np.max(np.abs(e.paths), axis=1) ** 2))


# ---------------------------------------------------------------------------
# small coefficient builders used by tests, presets and the control module


def linear_coefficients(a: float, c: float, sigma: float = 0.0, jump_sigma: float = 0.0) -> CoefficientSet:
    """``b = a x + c <id, Q>``, constant noise loadings."""
    def drift(t, lamB, lamH, x, feats, u):
        return a * x + c * feats["mean"]

    def jump(t, z, lamB, lamH, x, feats, u):
        return np.where(z == 0, sigma, jump_sigma) + 0.0 * x

    return CoefficientSet(drift, jump, {"mean": None}, name="linear-test",
                          lipschitz=abs(a) + abs(c), bound=abs(a) + abs(c))


def law_free_coefficients(drift: Callable, jump: Callable, name: str = "law-free") -> CoefficientSet:
    return CoefficientSet(drift, jump, {}, name=name)
