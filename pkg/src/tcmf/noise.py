"""Time grids, intensity processes and the doubly stochastic mixture noise.

The driving noise is a random field on ``[0, T] x R``. Mark ``0`` carries a
centred Gaussian field whose conditional variance per step is
``lamB_i * dt``; every nonzero mark ``z_k`` carries a compensated Poisson
count with conditional intensity ``lamH_i * nu_k * dt``. Conditionally on the
intensity path the two parts are independent, centred, and their second
moment on a window equals the variance measure computed by
:func:`lambda_measure`.

Arrays follow one layout throughout the package: a leading path axis, then
the time axis (``n_steps`` increments or ``n_steps + 1`` knots), then the mark
axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _quad

from . import _rng
from .errors import InvalidArgument


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"horizon must be positive, got {self.T!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be a positive integer, got {self.n_steps!r}")

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        # i * dt rather than linspace so that knots[i] == i * dt bitwise
        k = np.arange(self.n_steps + 1) * self.dt
        k[-1] = self.T
        return k

    @property
    def n_knots(self) -> int:
        return self.n_steps + 1

    def index_of(self, t: float) -> int:
        """Step index whose left knot is ``t`` (nearest knot)."""
        return int(round(t / self.dt))


def build_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(T), int(n_steps))


# ---------------------------------------------------------------------------
# intensity


@dataclass(frozen=True)
class IntensityModel:
    """Model for the pair ``(lamB, lamH)``.

    ``kind`` is one of

    * ``"constant"``: ``params = {"lamB": .., "lamH": ..}``
    * ``"function"``: ``params = {"lamB": f, "lamH": g}`` with callables of t
      (a missing component is identically zero)
    * ``"sqrt"``: one square-root diffusion factor
      ``dV = rev * (level - V) dt + vol * sqrt(V) dW`` started at ``init``,
      discretised with full truncation; ``lamB = scaleB * V`` and
      ``lamH = scaleH * V`` (both scales default to 1).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("constant", "function", "sqrt"):
            raise InvalidArgument(f"unknown intensity kind {self.kind!r}")
        p = self.params
        if self.kind == "constant":
            for key in ("lamB", "lamH"):
                if float(p.get(key, 0.0)) < 0:
                    raise InvalidArgument(f"{key} must be nonnegative")
        elif self.kind == "function":
            for key in ("lamB", "lamH"):
                if key in p and not callable(p[key]):
                    raise InvalidArgument(f"{key} must be callable for the function kind")
        else:
            for key in ("init", "rev", "level", "vol", "scaleB", "scaleH"):
                if float(p.get(key, 1.0 if key.startswith("scale") else 0.0)) < 0:
                    raise InvalidArgument(f"{key} must be nonnegative")

    @property
    def deterministic(self) -> bool:
        return self.kind != "sqrt" or float(self.params.get("vol", 0.0)) == 0.0

    @classmethod
    def constant(cls, lamB: float = 1.0, lamH: float = 0.0) -> "IntensityModel":
        return cls("constant", {"lamB": float(lamB), "lamH": float(lamH)})

    @classmethod
    def function(cls, lamB: Callable | None = None, lamH: Callable | None = None) -> "IntensityModel":
        params = {}
        if lamB is not None:
            params["lamB"] = lamB
        if lamH is not None:
            params["lamH"] = lamH
        return cls("function", params)

    @classmethod
    def square_root(cls, init: float, rev: float, level: float, vol: float,
                    scaleB: float = 1.0, scaleH: float = 1.0) -> "IntensityModel":
        return cls("sqrt", {"init": float(init), "rev": float(rev), "level": float(level),
                            "vol": float(vol), "scaleB": float(scaleB), "scaleH": float(scaleH)})


@dataclass(frozen=True)
class IntensityPath:
    """Sampled intensities at the knots; shape ``(n_knots,)`` when shared by
    all paths, ``(n_paths, n_knots)`` when drawn per path."""

    grid: TimeGrid
    lamB: np.ndarray
    lamH: np.ndarray
    deterministic: bool = True

    def __post_init__(self):
        for name in ("lamB", "lamH"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape[-1] != self.grid.n_knots:
                raise InvalidArgument(f"{name} has {a.shape[-1]} knots, grid has {self.grid.n_knots}")
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise InvalidArgument(f"{name} must be finite and nonnegative")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def per_path(self) -> bool:
        return self.lamB.ndim == 2 or self.lamH.ndim == 2

    def step_values(self, i: int, n_paths: int | None = None):
        """``(lamB_i, lamH_i)`` at the left knot of step ``i``; scalars when
        shared, arrays of length ``n_paths`` otherwise."""
        b = self.lamB[..., i]
        h = self.lamH[..., i]
        return b, h

    def rows(self, start: int, stop: int):
        """Per-path slices (or the shared path) for paths ``start:stop``."""
        b = self.lamB[start:stop] if self.lamB.ndim == 2 else self.lamB
        h = self.lamH[start:stop] if self.lamH.ndim == 2 else self.lamH
        return b, h


def _sqrt_paths(p: dict, grid: TimeGrid, rng: np.random.Generator, n: int | None) -> np.ndarray:
    shape = (grid.n_steps,) if n is None else (n, grid.n_steps)
    normals = rng.standard_normal(shape)
    dt = grid.dt
    out = np.empty(shape[:-1] + (grid.n_knots,))
    v = np.full(shape[:-1], p["init"], dtype=float)
    out[..., 0] = v
    sq = np.sqrt(dt)
    for i in range(grid.n_steps):
        vp = np.maximum(v, 0.0)
        v = v + p["rev"] * (p["level"] - vp) * dt + p["vol"] * np.sqrt(vp) * sq * normals[..., i]
        out[..., i + 1] = np.maximum(v, 0.0)
    return out


def sample_intensity(model: IntensityModel, grid: TimeGrid, seed: int = 0,
                     n_paths: int | None = None) -> IntensityPath:
    """Sample ``(lamB, lamH)`` on the knots.

    With ``n_paths=None`` one path is shared by every particle; otherwise each
    path gets its own draw (the iid switch). Deterministic kinds ignore the
    seed.
    """
    knots = grid.knots
    p = model.params
    if model.kind == "constant":
        lamB = np.full(grid.n_knots, float(p.get("lamB", 0.0)))
        lamH = np.full(grid.n_knots, float(p.get("lamH", 0.0)))
    elif model.kind == "function":
        zero = lambda t: np.zeros_like(t)
        lamB = np.asarray(np.broadcast_to(p.get("lamB", zero)(knots), knots.shape), dtype=float)
        lamH = np.asarray(np.broadcast_to(p.get("lamH", zero)(knots), knots.shape), dtype=float)
        if np.any(lamB < 0) or np.any(lamH < 0):
            raise InvalidArgument("intensity functions must be nonnegative on the grid")
    else:
        full = {"init": 0.0, "rev": 0.0, "level": 0.0, "vol": 0.0, "scaleB": 1.0, "scaleH": 1.0}
        full.update(p)
        if n_paths is None:
            v = _sqrt_paths(full, grid, _rng.substream(seed, "intensity"), None)
        else:
            v = np.empty((n_paths, grid.n_knots))
            for b, start, stop in _rng.blocks(n_paths):
                v[start:stop] = _sqrt_paths(full, grid, _rng.substream(seed, "intensity", 0, b),
                                            stop - start)
        return IntensityPath(grid, full["scaleB"] * v, full["scaleH"] * v,
                             deterministic=model.deterministic)
    if n_paths is not None:
        lamB = np.broadcast_to(lamB, (n_paths, grid.n_knots)).copy()
        lamH = np.broadcast_to(lamH, (n_paths, grid.n_knots)).copy()
    return IntensityPath(grid, lamB, lamH, deterministic=True)


# ---------------------------------------------------------------------------
# Levy measure


@dataclass(frozen=True)
class LevyGrid:
    """Finite mark grid: jump marks ``z_k`` and the mass ``nu_k`` of each cell."""

    marks: np.ndarray
    weights: np.ndarray
    truncation: float = 0.0

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.marks, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if z.shape != w.shape or z.ndim != 1:
            raise InvalidArgument("marks and weights must be 1-D arrays of equal length")
        if np.any(z == 0):
            raise InvalidArgument("mark 0 is reserved for the Gaussian component")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise InvalidArgument("mark weights must be positive and finite")
        if self.truncation < 0 or np.any(np.abs(z) < self.truncation):
            raise InvalidArgument("marks must satisfy |z| >= truncation >= 0")
        z.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "marks", z)
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return self.marks.size

    @property
    def slots(self) -> np.ndarray:
        """Mark coordinates including the Gaussian slot: ``(0, z_1, .., z_M)``."""
        return np.concatenate(([0.0], self.marks))

    def second_moment(self) -> float:
        return float(np.sum(self.marks ** 2 * self.weights))

    @classmethod
    def empty(cls) -> "LevyGrid":
        return cls(np.zeros(0), np.zeros(0))


def _cells(eps: float, a: float, M: int, spacing: str) -> np.ndarray:
    if spacing == "geometric":
        return np.geomspace(eps, a, M + 1)
    return np.linspace(eps, a, M + 1)


def discretize_levy(family: str, M: int = 1, eps: float = 0.0, **params) -> LevyGrid:
    """Discretise a jump measure into ``M`` cells per side.

    Families:

    * ``"atoms"``: ``marks=..., weights=...`` passed through unchanged.
    * ``"uniform"``: density ``c`` (default 1) on ``[-a, -eps] U [eps, a]``.
    * ``"exp-tails"``: density ``c * exp(-|z|) / |z|**(1 + alpha)`` on
      ``eps <= |z| <= a`` (``a`` defaults to 20), geometric cells.

    Each cell gets its exact mass as weight and the mark whose square is the
    cell's mean of ``z**2``, so ``sum(z_k**2 * nu_k)`` reproduces the
    truncated second moment up to the quadrature error of the cell integrals.
    """
    if family == "atoms":
        return LevyGrid(params["marks"], params["weights"], truncation=float(eps))
    if M < 1:
        raise InvalidArgument("M must be at least 1")
    if eps <= 0:
        raise InvalidArgument(f"family {family!r} has infinite activity near 0; need eps > 0")
    a = float(params.get("a", 1.0 if family == "uniform" else 20.0))
    if a <= eps:
        raise InvalidArgument(f"empty mark support: eps={eps} >= a={a}")
    c = float(params.get("c", 1.0))
    if c <= 0:
        raise InvalidArgument("density scale c must be positive")

    if family == "uniform":
        edges = _cells(eps, a, M, "linear")
        lo, hi = edges[:-1], edges[1:]
        mass = c * (hi - lo)
        m2 = c * (hi ** 3 - lo ** 3) / 3.0
    elif family == "exp-tails":
        alpha = float(params.get("alpha", 0.5))
        if not 0 <= alpha < 2:
            raise InvalidArgument("alpha must lie in [0, 2)")
        dens = lambda z: c * np.exp(-z) / z ** (1.0 + alpha)
        edges = _cells(eps, a, M, "geometric")
        mass = np.array([_quad.quad(dens, l, h, epsabs=0, epsrel=1e-12)[0]
                         for l, h in zip(edges[:-1], edges[1:])])
        m2 = np.array([_quad.quad(lambda z: z * z * dens(z), l, h, epsabs=0, epsrel=1e-12)[0]
                       for l, h in zip(edges[:-1], edges[1:])])
    else:
        raise InvalidArgument(f"unknown jump family {family!r}")

    z_pos = np.sqrt(m2 / mass)
    marks = np.concatenate((-z_pos[::-1], z_pos))
    weights = np.concatenate((mass[::-1], mass))
    return LevyGrid(marks, weights, truncation=float(eps))


def truncated_second_moment(family: str, eps: float, **params) -> float:
    """Closed-form / adaptive-quadrature value of the truncated second moment."""
    c = float(params.get("c", 1.0))
    if family == "uniform":
        a = float(params.get("a", 1.0))
        return 2.0 * c * (a ** 3 - eps ** 3) / 3.0
    if family == "exp-tails":
        a = float(params.get("a", 20.0))
        alpha = float(params.get("alpha", 0.5))
        val, _ = _quad.quad(lambda z: c * z * z * np.exp(-z) / z ** (1.0 + alpha), eps, a,
                            epsabs=0, epsrel=1e-12, limit=200)
        return 2.0 * val
    raise InvalidArgument(f"unknown jump family {family!r}")


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseIncrements:
    """Per-step increments of the mixture noise for ``n_paths`` paths.

    ``dG[p, i]`` is the Gaussian increment over ``(t_i, t_{i+1}]``;
    ``counts[p, i, k]`` the number of jumps with mark ``z_k`` and
    ``dJ[p, i, k] = counts - lamH_i * nu_k * dt`` the compensated count, i.e.
    the value of the centred Poisson measure on that cell.
    """

    grid: TimeGrid
    intensity: IntensityPath
    levy: LevyGrid
    dG: np.ndarray
    dJ: np.ndarray
    counts: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.dG.shape[0]

    def path_intensity(self):
        """``(lamB, lamH)`` broadcast to ``(n_paths, n_knots)`` views."""
        shape = (self.n_paths, self.grid.n_knots)
        return (np.broadcast_to(self.intensity.lamB, shape),
                np.broadcast_to(self.intensity.lamH, shape))

    def slot_increments(self, i: int) -> np.ndarray:
        """Increments at step ``i`` stacked over slots ``(0, z_1, .., z_M)``."""
        return np.concatenate((self.dG[:, i, None], self.dJ[:, i, :]), axis=1)

    def subset(self, start: int, stop: int) -> "NoiseIncrements":
        ip = self.intensity
        if ip.per_path:
            b, h = ip.rows(start, stop)
            ip = IntensityPath(ip.grid, b, h, ip.deterministic)
        return NoiseIncrements(self.grid, ip, self.levy, self.dG[start:stop],
                               self.dJ[start:stop], self.counts[start:stop], self.seed)

    def to_csv(self, path, particle: int = 0) -> None:
        """Write ``step, t, dG, dJ_1 .. dJ_M`` for one path."""
        knots = self.grid.knots
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "dG"] + [f"dJ_{k + 1}" for k in range(self.levy.M)])
            for i in range(self.grid.n_steps):
                w.writerow([i, _fmt(knots[i]), _fmt(self.dG[particle, i])]
                           + [_fmt(v) for v in self.dJ[particle, i]])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def sample_noise(ip: IntensityPath, lg: LevyGrid, seed: int, n_paths: int | None = None) -> NoiseIncrements:
    """Draw Gaussian and compensated Poisson increments given the intensity.

    The Gaussian part and the Poisson count of each mark come from separate
    sub-streams, blocked over paths. ``n_paths`` defaults to the number of
    per-path intensity rows, or 1 for a shared path.
    """
    grid = ip.grid
    if n_paths is None:
        n_paths = ip.lamB.shape[0] if ip.per_path else 1
    if ip.per_path and (ip.lamB.shape[0] != n_paths and ip.lamB.ndim == 2):
        raise InvalidArgument("per-path intensity rows do not match n_paths")
    n, M, dt = grid.n_steps, lg.M, grid.dt
    dG = np.empty((n_paths, n))
    counts = np.empty((n_paths, n, M), dtype=np.int64)
    dJ = np.empty((n_paths, n, M))
    for b, start, stop in _rng.blocks(n_paths):
        lamB, lamH = ip.rows(start, stop)
        lamB = np.broadcast_to(lamB[..., :-1], (stop - start, n))
        lamH = np.broadcast_to(lamH[..., :-1], (stop - start, n))
        g = _rng.substream(seed, "gauss", 0, b).standard_normal((stop - start, n))
        dG[start:stop] = g * np.sqrt(lamB * dt)
        for k in range(M):
            rate = lamH * lg.weights[k] * dt
            c = _rng.substream(seed, "poisson", k, b).poisson(rate)
            counts[start:stop, :, k] = c
            dJ[start:stop, :, k] = c - rate
    for a in (dG, dJ, counts):
        a.setflags(write=False)
    return NoiseIncrements(grid, ip, lg, dG, dJ, counts, int(seed))


# ---------------------------------------------------------------------------
# windows, integrals, seminorm


def _window_steps(grid: TimeGrid, s: float, t: float) -> np.ndarray:
    if not (0.0 <= s < t <= grid.T * (1 + 1e-12)):
        raise InvalidArgument(f"malformed time window ({s}, {t}] on [0, {grid.T}]")
    knots = grid.knots
    tol = 1e-9 * grid.dt
    left, right = knots[:-1], knots[1:]
    return np.nonzero((left >= s - tol) & (right <= t + tol))[0]


def _mark_mask(lg: LevyGrid, marks) -> np.ndarray:
    mask = np.zeros(lg.M, dtype=bool)
    if marks is None:
        mask[:] = True
    else:
        idx = np.asarray(list(marks), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= lg.M):
            raise InvalidArgument("mark index out of range")
        mask[idx] = True
    return mask


def lambda_measure(window: tuple, ip: IntensityPath, lg: LevyGrid, gaussian: bool = True,
                   marks: Sequence[int] | None = None) -> np.ndarray | float:
    """Variance measure of the window ``(s, t] x B``.

    ``B`` contains mark 0 when ``gaussian`` is true and the jump cells listed
    in ``marks`` (indices into ``lg.marks``; ``None`` means all of them). Steps
    count when their interval lies inside ``(s, t]``. Returns one value per
    path when the intensity is drawn per path.
    """
    s, t = window
    steps = _window_steps(ip.grid, s, t)
    mask = _mark_mask(lg, marks)
    dt = ip.grid.dt
    lamB = ip.lamB[..., steps]
    lamH = ip.lamH[..., steps]
    total = float(gaussian) * lamB.sum(axis=-1) * dt
    total = total + lamH.sum(axis=-1) * lg.weights[mask].sum() * dt
    return float(total) if np.ndim(total) == 0 else total


def noise_measure(window: tuple, noise: NoiseIncrements, gaussian: bool = True,
                  marks: Sequence[int] | None = None) -> np.ndarray:
    """Value of the noise on ``(s, t] x B`` for every path."""
    s, t = window
    steps = _window_steps(noise.grid, s, t)
    mask = _mark_mask(noise.levy, marks)
    val = float(gaussian) * noise.dG[:, steps].sum(axis=1)
    if mask.any():
        val = val + noise.dJ[:, steps][:, :, mask].sum(axis=(1, 2))
    return val


@dataclass(frozen=True)
class MarkFunction:
    """A function of the mark: ``v0`` at the Gaussian slot and ``v[..., k]``
    at ``z_k``. Leading axes (paths, steps) broadcast."""

    v0: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v0", np.asarray(self.v0, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    @classmethod
    def from_slots(cls, a) -> "MarkFunction":
        a = np.asarray(a, dtype=float)
        return cls(a[..., 0], a[..., 1:])

    def slots(self) -> np.ndarray:
        v0 = np.asarray(self.v0)
        v = np.asarray(self.v)
        shape = np.broadcast_shapes(v0.shape, v.shape[:-1])
        return np.concatenate((np.broadcast_to(v0, shape)[..., None],
                               np.broadcast_to(v, shape + v.shape[-1:])), axis=-1)


def lambda_seminorm(alpha: MarkFunction, lamB, lamH, lg: LevyGrid):
    """``sqrt(|a(0)|^2 lamB + sum_k |a(z_k)|^2 lamH nu_k)``, broadcasting."""
    sq = np.abs(alpha.v0) ** 2 * lamB
    if lg.M:
        sq = sq + np.sum(np.abs(alpha.v) ** 2 * lg.weights, axis=-1) * lamH
    return np.sqrt(sq)


def integrate(phi: MarkFunction | Callable, noise: NoiseIncrements) -> np.ndarray:
    """Ito sum ``sum_i phi_i(0) dG_i + sum_{i,k} phi_i(z_k) dJ_{i,k}`` per path.

    ``phi`` is either a :class:`MarkFunction` whose arrays broadcast to
    ``(n_paths, n_steps)`` / ``(n_paths, n_steps, M)``, or a callable
    ``phi(i, history) -> MarkFunction`` evaluated at the left knot of each step,
    where ``history`` is the noise truncated to steps ``< i``. Only the
    callable form can express integrands built from past increments, and it
    enforces predictability by construction.
    """
    if callable(phi):
        total = np.zeros(noise.n_paths)
        for i in range(noise.grid.n_steps):
            val = phi(i, _History(noise, i))
            total = total + np.broadcast_to(val.v0, (noise.n_paths,)) * noise.dG[:, i]
            if noise.levy.M:
                v = np.broadcast_to(val.v, (noise.n_paths, noise.levy.M))
                total = total + np.sum(v * noise.dJ[:, i, :], axis=1)
        return total
    n_paths, n = noise.n_paths, noise.grid.n_steps
    v0 = np.broadcast_to(phi.v0, (n_paths, n))
    total = np.sum(v0 * noise.dG, axis=1)
    if noise.levy.M:
        v = np.broadcast_to(phi.v, (n_paths, n, noise.levy.M))
        total = total + np.sum(v * noise.dJ, axis=(1, 2))
    return total


class _History:
    """Read-only view of the noise strictly before step ``i``."""

    def __init__(self, noise: NoiseIncrements, i: int):
        self.grid = noise.grid
        self.levy = noise.levy
        self.step = i
        self.t = noise.grid.knots[i]
        self.dG = noise.dG[:, :i]
        self.dJ = noise.dJ[:, :i]
        lamB, lamH = noise.path_intensity()
        # intensity is observable up to and including the left knot
        self.lamB = lamB[:, : i + 1]
        self.lamH = lamH[:, : i + 1]
