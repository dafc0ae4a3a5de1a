"""Limiting system: RK4 for the nonlocal reaction ODE on (V, W) and exact
method-of-characteristics transport for the adaptation profiles.

The characteristics of d_t f + d_w(A(V(t), w) f) = 0 are linear, so profiles
are always evaluated in one shot from t=0 through the integrating factor
e^{bt} and the accumulated source S(t) = int_0^t e^{bs} (a V(s) + c) ds
(trapezoidal in the V history): f(t, w) = e^{bt} f0(e^{bt} w - S(t)).
Chained grid-to-grid interpolation would pile up smoothing; this never does.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ContractViolation
from .model import ModelConfig, eval_drift, nonlocal_operator_L
from .phase_space import SpatialGrid

Profile = Callable[[int, np.ndarray], np.ndarray]  # (node index, w) -> density


@dataclass(frozen=True)
class LimitState:
    """Limit voltage V(x), its adaptation mean W(x), and the transported
    adaptation profile, carried as the initial profile plus the accumulated
    characteristic source S(x)."""

    V: np.ndarray
    W: np.ndarray
    profile0: Profile
    S: np.ndarray
    t: float
    b: float

    @staticmethod
    def from_initial(V0: np.ndarray, W0: np.ndarray, profile0: Profile, b: float):
        return LimitState(
            V=np.array(V0, dtype=float),
            W=np.array(W0, dtype=float),
            profile0=profile0,
            S=np.zeros_like(np.asarray(V0, dtype=float)),
            t=0.0,
            b=b,
        )

    def bar_mu(self, ix: int, w: np.ndarray) -> np.ndarray:
        """Evaluate the transported profile at arbitrary w."""
        growth = np.exp(self.b * self.t)
        return growth * self.profile0(ix, growth * w - self.S[ix])

    def bar_mu_grid(self, w_nodes: np.ndarray) -> np.ndarray:
        out = np.empty((self.V.size, w_nodes.size))
        for ix in range(self.V.size):
            out[ix] = self.bar_mu(ix, w_nodes)
        return out

    def validate(self, w_nodes: np.ndarray, dw: float, tol: float = 1e-8) -> None:
        if not np.all(np.isfinite(self.V)):
            raise ContractViolation("limit voltage not finite")
        grid = self.bar_mu_grid(w_nodes)
        if np.any(grid < 0):
            raise ContractViolation("limit profile negative")
        mass = grid.sum(axis=1) * dw
        if np.abs(mass - 1.0).max() > tol:
            raise ContractViolation("limit profile mass defect")


def _rhs(model: ModelConfig, V: np.ndarray, W: np.ndarray):
    dV = eval_drift(model.drift, V) - W - nonlocal_operator_L(model, V)
    dW = model.adaptation.a * V + model.adaptation.c - model.adaptation.b * W
    return dV, dW


def step_limit_V(state: LimitState, dt: float, model: ModelConfig,
                 blowup_guard: float = 80.0) -> LimitState:
    """RK4 update of the coupled (V, W) system plus the characteristic source
    accumulator (trapezoid of e^{bs}(a V(s) + c) across the step)."""
    a, b, c = model.adaptation.a, model.adaptation.b, model.adaptation.c
    V, W, t = state.V, state.W, state.t
    k1V, k1W = _rhs(model, V, W)
    k2V, k2W = _rhs(model, V + 0.5 * dt * k1V, W + 0.5 * dt * k1W)
    k3V, k3W = _rhs(model, V + 0.5 * dt * k2V, W + 0.5 * dt * k2W)
    k4V, k4W = _rhs(model, V + dt * k3V, W + dt * k3W)
    Vn = V + dt / 6.0 * (k1V + 2 * k2V + 2 * k3V + k4V)
    Wn = W + dt / 6.0 * (k1W + 2 * k2W + 2 * k3W + k4W)
    if np.abs(Vn).max() > blowup_guard:
        raise ContractViolation(
            f"limit voltage blow-up: |V| = {np.abs(Vn).max():.3e} at t = {t + dt:.3f}"
        )
    Sn = state.S + 0.5 * dt * (
        np.exp(b * t) * (a * V + c) + np.exp(b * (t + dt)) * (a * Vn + c)
    )
    return replace(state, V=Vn, W=Wn, S=Sn, t=t + dt)


def evolve_bar_mu(state: LimitState, w_nodes: np.ndarray) -> np.ndarray:
    """Grid view of the transported adaptation profile at the state's time."""
    return state.bar_mu_grid(w_nodes)


def evolve_bar_nu(bar_nu0: Profile, t: float, b: float, nx: int,
                  w_nodes: np.ndarray) -> np.ndarray:
    """Exact solution of d_t f - b d_w(w f) = 0:
    f(t, x, w) = e^{bt} f0(x, e^{bt} w), evaluated directly (no stepping).
    Arguments outside the profile's support evaluate to 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    growth = np.exp(b * t)
    out = np.empty((nx, w_nodes.size))
    for ix in range(nx):
        out[ix] = growth * bar_nu0(ix, growth * w_nodes)
    return out


def grid_profile(values: np.ndarray, w_nodes: np.ndarray) -> Profile:
    """Wrap per-node grid samples as a linearly interpolated profile
    (zero outside the grid)."""
    values = np.asarray(values, dtype=float)

    def prof(ix: int, w: np.ndarray) -> np.ndarray:
        return np.interp(w, w_nodes, values[ix], left=0.0, right=0.0)

    return prof


def gaussian_profile(means: np.ndarray, sigma: float) -> Profile:
    """Per-node Gaussian profile with common width."""
    means = np.asarray(means, dtype=float)
    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))

    def prof(ix: int, w: np.ndarray) -> np.ndarray:
        return norm * np.exp(-0.5 * ((w - means[ix]) / sigma) ** 2)

    return prof


def limit_trajectory_to_csv(path, times: np.ndarray, x_nodes: np.ndarray,
                            V_hist: np.ndarray, W_hist: np.ndarray) -> None:
    """Export t, x, V, W rows (V_hist/W_hist shaped (nt, nx))."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "V", "W"])
        for it, t in enumerate(times):
            for ix, x in enumerate(x_nodes):
                writer.writerow([repr(float(t)), repr(float(x)),
                                 repr(float(V_hist[it, ix])), repr(float(W_hist[it, ix]))])


def solve_limit(
    model: ModelConfig,
    space: SpatialGrid,
    V0: np.ndarray,
    W0: np.ndarray,
    profile0: Profile,
    dt: float,
    t_end: float,
) -> tuple[np.ndarray, list[LimitState]]:
    """Integrate the limit system to t_end; returns (times, states per step)."""
    state = LimitState.from_initial(V0, W0, profile0, model.adaptation.b)
    n = int(round(t_end / dt))
    states = [state]
    for _ in range(n):
        state = step_limit_V(state, dt, model)
        states.append(state)
    times = dt * np.arange(n + 1)
    return times, states
