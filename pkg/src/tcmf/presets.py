"""Named coefficient and cost families used by configs, tests and examples."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .control import Costs, Dynamics, Scenario
from .errors import InvalidArgument


def _zero(*args):
    return 0.0 * np.asarray(args[-1], dtype=float)


def _const(c: float) -> Callable:
    return lambda *args: c + 0.0 * np.asarray(args[-1], dtype=float)


def _theta(theta) -> Callable:
    if callable(theta):
        return theta
    th = float(theta)
    return lambda t: th


def _loading(sigma: float, sigma_jump) -> Callable:
    """Noise loading ``sigma`` on the Gaussian slot, ``sigma_jump(z)`` (or a
    constant) on the jump slots; state- and control-free."""
    sj = sigma_jump if callable(sigma_jump) else (lambda z, c=float(sigma_jump): c + 0.0 * z)

    def kappa(t, z, lamB, lamH, x, y, u):
        z = np.asarray(z, dtype=float)
        row = np.where(z == 0, float(sigma), sj(z))
        return row + 0.0 * (np.asarray(x, dtype=float) + np.asarray(u, dtype=float))

    return kappa


_NO_NOISE_PARTIALS = {"k_x": _zero, "k_y": _zero, "k_u": _zero}


def vasicek_dynamics(theta=1.0, sigma: float = 0.0, sigma_jump=0.0) -> Dynamics:
    th = _theta(theta)

    def b(t, lamB, lamH, x, y, u):
        return th(t) * (-x + y - u)

    partials = {
        "b_x": lambda t, lamB, lamH, x, y, u: -th(t) + 0.0 * x,
        "b_y": lambda t, lamB, lamH, x, y, u: th(t) + 0.0 * x,
        "b_u": lambda t, lamB, lamH, x, y, u: -th(t) + 0.0 * x,
        **_NO_NOISE_PARTIALS,
    }
    K = float(theta) * 3 if not callable(theta) else np.inf
    return Dynamics(b, _loading(sigma, sigma_jump), partials, name="vasicek", K=K)


def linear_dynamics(a: float = -1.0, c: float = 0.5, d: float = 0.0, sigma: float = 0.0,
                    jump_sigma: float = 0.0) -> Dynamics:
    """``b = a x + c E[X] + d u`` with constant loadings."""
    def b(t, lamB, lamH, x, y, u):
        return a * x + c * y + d * u

    partials = {
        "b_x": _const(a), "b_y": _const(c), "b_u": _const(d), **_NO_NOISE_PARTIALS,
    }
    return Dynamics(b, _loading(sigma, jump_sigma), partials, name="linear-test",
                    K=abs(a) + abs(c) + abs(d))


def ou_dynamics(rate: float = 1.0, level: float = 0.0, sigma: float = 0.3, jump_sigma: float = 0.0) -> Dynamics:
    """Law-free Ornstein-Uhlenbeck drift ``rate (level - x) - u``."""
    def b(t, lamB, lamH, x, y, u):
        return rate * (level - x) - u

    partials = {
        "b_x": _const(-rate), "b_y": _zero, "b_u": _const(-1.0), **_NO_NOISE_PARTIALS,
    }
    dyn = Dynamics(b, _loading(sigma, jump_sigma), partials, name="ou-test", K=abs(rate) + 1)
    return dyn


def zero_dynamics() -> Dynamics:
    partials = {"b_x": _zero, "b_y": _zero, "b_u": _zero, **_NO_NOISE_PARTIALS}
    return Dynamics(lambda t, lamB, lamH, x, y, u: 0.0 * x + 0.0 * u, _loading(0.0, 0.0), partials,
                    name="zero", K=0.0)


def nonlinear_dynamics(a: float = 1.0, c: float = 0.5, e: float = 0.5, sigma: float = 0.3,
                       jump_sigma: float = 0.2) -> Dynamics:
    """``b = -a x + c tanh(y) - u + e sin(x)`` with control- and
    state-dependent loadings. No analytic partials: derivatives fall back to
    central differences."""
    def b(t, lamB, lamH, x, y, u):
        return -a * x + c * np.tanh(y) - u + e * np.sin(x)

    def kappa(t, z, lamB, lamH, x, y, u):
        z = np.asarray(z, dtype=float)
        gauss = sigma * (1.0 + 0.2 * np.sin(u) + 0.1 * np.tanh(x - y))
        jump = jump_sigma * z * (1.0 + 0.1 * np.cos(x) + 0.1 * np.tanh(u))
        return np.where(z == 0, gauss, jump)

    return Dynamics(b, kappa, {}, name="nonlinear-test", K=a + c + e + 1)


DYNAMICS = {
    "vasicek": vasicek_dynamics,
    "linear-test": linear_dynamics,
    "ou-test": ou_dynamics,
    "zero": zero_dynamics,
    "nonlinear-test": nonlinear_dynamics,
}


# ---------------------------------------------------------------------------


def vasicek_costs() -> Costs:
    return Costs(
        f=lambda t, lamB, lamH, x, y, u: -x ** 2 - y ** 2 - u ** 2,
        g=lambda x, y: 0.0 * x,
        phi=lambda x: x,
        chi=lambda x: 0.0 * x,
        partials={
            "f_x": lambda t, lamB, lamH, x, y, u: -2.0 * x,
            "f_y": lambda t, lamB, lamH, x, y, u: -2.0 * y + 0.0 * x,
            "f_u": lambda t, lamB, lamH, x, y, u: -2.0 * u,
            "g_x": lambda x, y: 0.0 * x,
            "g_y": lambda x, y: 0.0 * x,
            "phi_x": lambda x: 1.0 + 0.0 * x,
            "chi_x": lambda x: 0.0 * x,
        },
        name="vasicek",
    )


def zero_costs() -> Costs:
    z = lambda *a: 0.0 * np.asarray(a[-1], dtype=float)
    return Costs(f=z, g=z, phi=lambda x: x, chi=lambda x: 0.0 * x,
                 partials={"f_x": z, "f_y": z, "f_u": z, "g_x": z, "g_y": z,
                           "phi_x": lambda x: 1.0 + 0.0 * x, "chi_x": lambda x: 0.0 * x},
                 name="zero")


def quadratic_control_costs(weight: float = 1.0) -> Costs:
    """``f = -weight u^2``, ``g = 0``."""
    z = lambda *a: 0.0 * np.asarray(a[-1], dtype=float)
    return Costs(f=lambda t, lamB, lamH, x, y, u: -weight * u ** 2 + 0.0 * x, g=lambda x, y: 0.0 * x,
                 partials={"f_x": z, "f_y": z, "f_u": lambda t, lamB, lamH, x, y, u: -2.0 * weight * u + 0.0 * x,
                           "g_x": z, "g_y": z, "phi_x": lambda x: 1.0 + 0.0 * x,
                           "chi_x": lambda x: 0.0 * x},
                 name="quadratic-control")


def linear_terminal_costs() -> Costs:
    """``f = 0``, ``g = x``: the adjoint is the constant 1 for law-free
    dynamics without drift."""
    z = lambda *a: 0.0 * np.asarray(a[-1], dtype=float)
    return Costs(f=z, g=lambda x, y: x + 0.0 * y,
                 partials={"f_x": z, "f_y": z, "f_u": z, "g_x": lambda x, y: 1.0 + 0.0 * x, "g_y": z,
                           "phi_x": lambda x: 1.0 + 0.0 * x, "chi_x": lambda x: 0.0 * x},
                 name="linear-terminal")


def nonlinear_costs() -> Costs:
    """Smooth non-quadratic costs; partials by central differences."""
    return Costs(
        f=lambda t, lamB, lamH, x, y, u: -x ** 2 - 0.5 * y ** 2 - u ** 2 + 0.1 * np.cos(x) + 0.2 * x * y,
        g=lambda x, y: -0.5 * x ** 2 - 0.3 * y ** 2 + 0.1 * x,
        phi=np.sin,
        chi=np.tanh,
        name="nonlinear-test",
    )


def convex_x_costs() -> Costs:
    """``f = x^2 - u^2``: the maximised Hamiltonian is convex in ``x``."""
    return Costs(
        f=lambda t, lamB, lamH, x, y, u: x ** 2 - u ** 2,
        g=lambda x, y: 0.0 * x,
        partials={
            "f_x": lambda t, lamB, lamH, x, y, u: 2.0 * x,
            "f_y": lambda t, lamB, lamH, x, y, u: 0.0 * x,
            "f_u": lambda t, lamB, lamH, x, y, u: -2.0 * u + 0.0 * x,
        },
        name="convex-x",
    )


COSTS = {
    "vasicek": vasicek_costs,
    "zero": zero_costs,
    "quadratic-control": quadratic_control_costs,
    "linear-terminal": linear_terminal_costs,
    "nonlinear-test": nonlinear_costs,
    "convex-x": convex_x_costs,
}


def dynamics(name: str, **params) -> Dynamics:
    try:
        return DYNAMICS[name](**params)
    except KeyError:
        raise InvalidArgument(f"unknown coefficient preset {name!r}; known: {sorted(DYNAMICS)}") from None
    except TypeError as exc:
        raise InvalidArgument(f"bad parameters for {name!r}: {exc}") from None


def costs(name: str, **params) -> Costs:
    try:
        return COSTS[name](**params)
    except KeyError:
        raise InvalidArgument(f"unknown cost preset {name!r}; known: {sorted(COSTS)}") from None
    except TypeError as exc:
        raise InvalidArgument(f"bad parameters for {name!r}: {exc}") from None


def scenario(dyn: str, cost: str, *, grid, intensity, levy, x0: float, N: int, U=(0.0, 1.0),
             seed: int = 0, dyn_params: dict | None = None, cost_params: dict | None = None,
             iid_intensity: bool = False) -> Scenario:
    return Scenario(dynamics(dyn, **(dyn_params or {})), costs(cost, **(cost_params or {})), U, grid,
                    intensity, levy, x0, N, seed, iid_intensity, name=f"{dyn}/{cost}")
