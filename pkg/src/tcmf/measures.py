"""Empirical measures on the line, the quadratic Wasserstein distance, and
law flows (one marginal measure per grid knot)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .noise import TimeGrid


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight atoms, stored sorted."""

    atoms: np.ndarray

    @property
    def N(self) -> int:
        return self.atoms.size

    def mean(self) -> float:
        return float(np.mean(self.atoms))

    def shift(self, c: float) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.atoms + c)


def empirical(values) -> EmpiricalMeasure:
    a = np.asarray(values, dtype=float).ravel()
    if a.size == 0:
        raise InvalidArgument("an empirical measure needs at least one atom")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("atoms must be finite")
    a = np.sort(a)
    a.setflags(write=False)
    return EmpiricalMeasure(a)


def _quantile_w2_sq(p: np.ndarray, q: np.ndarray) -> float:
    """Squared W2 between sorted equal-weight samples of any sizes.

    Both quantile functions are step functions on the partitions
    ``{i / n}`` and ``{j / m}``; integrating the squared gap over the merged
    partition is exact.
    """
    n, m = p.size, q.size
    if n == m:
        d = p - q
        return float(np.dot(d, d) / n)
    # merged breakpoints as exact rationals over n * m
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    widths = np.diff(cuts) / (n * m)
    mids2 = cuts[:-1] + cuts[1:]  # 2 * midpoint, in units of 1 / (n * m)
    ip = mids2 // (2 * m)
    iq = mids2 // (2 * n)
    d = p[ip] - q[iq]
    return float(np.sum(widths * d * d))


def wasserstein2(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> float:
    """Quadratic Wasserstein distance; on the line the sorted (quantile)
    coupling is optimal."""
    return float(np.sqrt(_quantile_w2_sq(P.atoms, Q.atoms)))


def mean_functional(P: EmpiricalMeasure, g: Callable = None) -> float:
    """``<g, P> = (1/N) sum g(atom)``; identity when ``g`` is omitted."""
    vals = P.atoms if g is None else np.asarray(g(P.atoms), dtype=float)
    return float(np.mean(np.broadcast_to(vals, P.atoms.shape)))


@dataclass(frozen=True)
class LawFlow:
    """Marginal laws at each knot: ``atoms[i]`` holds the sorted sample at
    ``t_i``. Between knots the flow is constant on ``[t_i, t_{i+1})``."""

    grid: TimeGrid
    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim != 2 or a.shape[0] != self.grid.n_knots:
            raise InvalidArgument("law flow needs one sample row per knot")
        a.setflags(write=False)
        object.__setattr__(self, "atoms", a)

    @property
    def N(self) -> int:
        return self.atoms.shape[1]

    def at(self, i: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.atoms[i])

    def at_time(self, t: float) -> EmpiricalMeasure:
        i = int(np.searchsorted(self.grid.knots, t, side="right")) - 1
        return self.at(min(max(i, 0), self.grid.n_steps))

    def feature(self, g: Callable | None, i: int) -> float:
        return mean_functional(self.at(i), g)

    def means(self) -> np.ndarray:
        return self.atoms.mean(axis=1)

    def to_csv(self, path) -> None:
        """Knot index, time, and the deciles of each marginal."""
        levels = np.linspace(0.0, 1.0, 11)
        qs = np.quantile(self.atoms, levels, axis=1).T
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knot", "t"] + [f"q{int(round(100 * l)):03d}" for l in levels])
            for i, (t, row) in enumerate(zip(self.grid.knots, qs)):
                w.writerow([i, format(t, ".17g")] + [format(v, ".17g") for v in row])


def law_flow(grid: TimeGrid, paths: np.ndarray) -> LawFlow:
    """Law flow of an ``(N, n_knots)`` path array."""
    return LawFlow(grid, np.sort(np.asarray(paths, dtype=float), axis=0).T)


def dirac_flow(grid: TimeGrid, x0: float, N: int = 1) -> LawFlow:
    return LawFlow(grid, np.full((grid.n_knots, N), float(x0)))


def law_flow_distance(Q1: LawFlow, Q2: LawFlow) -> float:
    """Largest marginal W2 distance over the knots.

    Used in place of the W2 distance between path-space laws: it is a lower
    bound for it (the sup-norm coupling dominates each marginal coupling)
    and is cheap enough to monitor a fixed-point iteration.
    """
    if Q1.grid != Q2.grid:
        raise InvalidArgument("law flows live on different grids")
    a, b = Q1.atoms, Q2.atoms
    if a.shape == b.shape:
        d2 = np.mean((a - b) ** 2, axis=1)
        return float(np.sqrt(d2.max()))
    return max(float(np.sqrt(_quantile_w2_sq(a[i], b[i]))) for i in range(a.shape[0]))
