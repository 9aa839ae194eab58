"""Least-squares conditional expectations on a polynomial basis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import RegressionError


def poly_features(cols: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree ``1..degree`` in the columns of ``cols``
    (the constant is handled by centring)."""
    cols = np.atleast_2d(np.asarray(cols, dtype=float))
    if cols.shape[1] == 0 or degree == 0:
        return np.zeros((cols.shape[0], 0))
    out = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(cols.shape[1]), d):
            out.append(np.prod(cols[:, combo], axis=1))
    return np.column_stack(out)


@dataclass(frozen=True)
class Projection:
    """A fitted linear map ``features -> targets`` (intercept included)."""

    keep: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    constant: np.ndarray  # targets that were exactly constant on the sample

    def predict(self, F: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.intercept, (F.shape[0], self.intercept.size)).copy()
        if self.coef.size:
            Fs = (F[:, self.keep] - self.shift) / self.scale
            out += Fs @ self.coef
        # constant targets are reproduced bitwise
        out[:, self.constant] = self.intercept[self.constant]
        return out


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials up to ``degree`` in the state columns, ridge-regularised."""

    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0 or self.ridge < 0:
            raise ValueError("degree and ridge must be nonnegative")

    def features(self, cols: np.ndarray) -> np.ndarray:
        return poly_features(cols, self.degree)

    def n_features(self, n_cols: int) -> int:
        return poly_features(np.zeros((1, n_cols)), self.degree).shape[1] + 1

    def fit(self, F: np.ndarray, Y: np.ndarray) -> Projection:
        """Fit ``Y`` (``(N,)`` or ``(N, k)``) on the feature matrix ``F``."""
        Y2 = Y[:, None] if Y.ndim == 1 else Y
        N = F.shape[0]
        constant = np.ptp(Y2, axis=0) == 0 if N else np.ones(Y2.shape[1], bool)
        ymean = np.where(constant, Y2[0] if N else 0.0, Y2.mean(axis=0))

        if F.shape[1]:
            # columns that do not vary carry no information beyond the intercept
            keep = np.nonzero(F.std(axis=0) > 1e-12 * (1 + np.abs(F.mean(axis=0))))[0]
        else:
            keep = np.zeros(0, dtype=int)
        if keep.size == 0:
            return Projection(keep, np.zeros(0), np.zeros(0), np.zeros((0, Y2.shape[1])), ymean, constant)
        Fk = F[:, keep]
        shift = Fk.mean(axis=0)
        scale = Fk.std(axis=0)
        Fs = (Fk - shift) / scale
        Yc = np.where(constant, 0.0, Y2 - ymean)
        G = Fs.T @ Fs / N
        rhs = Fs.T @ Yc / N
        coef = None
        for lam in (self.ridge, max(self.ridge, 1e-6), 1e-3):
            try:
                A = G + lam * np.eye(G.shape[0])
                coef = np.linalg.solve(A, rhs)
                if np.all(np.isfinite(coef)) and np.linalg.cond(A) < 1e12:
                    break
            except np.linalg.LinAlgError:
                coef = None
        if coef is None or not np.all(np.isfinite(coef)):
            raise RegressionError("regression matrix singular even after ridge fallback")
        coef[:, constant] = 0.0
        return Projection(keep, shift, scale, coef, ymean, constant)

    def project(self, F: np.ndarray, Y: np.ndarray) -> np.ndarray:
        out = self.fit(F, Y).predict(F)
        return out[:, 0] if Y.ndim == 1 else out
