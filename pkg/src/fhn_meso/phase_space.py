"""Grids, density storage, moments, Maxwellians, the concentration rate and
the blow-up / press-down changes of variable.

Phase-space integrals use the plain cell sum dv*dw*sum(...), which is the
quadrature the conservative solvers preserve exactly; spatial integrals over
K=[0,1] use trapezoidal weights. Densities produced here are immutable
snapshots: every operation returns a new field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ContractViolation

MASS_TOL = 1e-10


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform tensor grid on [-L_v, L_v] x [-L_w, L_w], endpoints included."""

    nv: int
    nw: int
    L_v: float = 8.0
    L_w: float = 8.0

    def __post_init__(self):
        if self.nv < 4 or self.nw < 4:
            raise ValueError("need at least 4 nodes per phase direction")
        if self.L_v <= 0 or self.L_w <= 0:
            raise ValueError("phase box half-widths must be positive")

    @property
    def v_nodes(self) -> np.ndarray:
        return np.linspace(-self.L_v, self.L_v, self.nv)

    @property
    def w_nodes(self) -> np.ndarray:
        return np.linspace(-self.L_w, self.L_w, self.nw)

    @property
    def dv(self) -> float:
        return 2.0 * self.L_v / (self.nv - 1)

    @property
    def dw(self) -> float:
        return 2.0 * self.L_w / (self.nw - 1)

    @property
    def cell_area(self) -> float:
        return self.dv * self.dw


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform nodes on K = [0,1] with trapezoidal quadrature weights."""

    nx: int

    def __post_init__(self):
        if self.nx < 2:
            raise ValueError("need at least 2 spatial nodes")

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def weights(self) -> np.ndarray:
        dx = 1.0 / (self.nx - 1)
        w = np.full(self.nx, dx)
        w[0] = w[-1] = 0.5 * dx
        return w


@dataclass(frozen=True)
class DensityField:
    """Non-negative density mu[x, v, w], unit mass per spatial node."""

    values: np.ndarray
    grid: PhaseGrid
    space: SpatialGrid
    time_stamp: float = 0.0

    def validate(self, mass_tol: float = MASS_TOL) -> None:
        if self.values.shape != (self.space.nx, self.grid.nv, self.grid.nw):
            raise ContractViolation(
                f"density shape {self.values.shape} does not match grids"
            )
        if np.any(self.values < 0):
            raise ContractViolation("density has negative entries")
        defect = np.abs(self.mass_per_node() - 1.0).max()
        if defect > mass_tol:
            raise ContractViolation(f"per-node mass defect {defect:.3e} > {mass_tol:.1e}")

    def mass_per_node(self) -> np.ndarray:
        return self.values.sum(axis=(1, 2)) * self.grid.cell_area

    def with_values(self, values: np.ndarray, t: float | None = None) -> "DensityField":
        return replace(
            self, values=values, time_stamp=self.time_stamp if t is None else t
        )

    def normalized(self) -> "DensityField":
        mass = self.mass_per_node()
        return self.with_values(self.values / mass[:, None, None])

    def w_marginal(self) -> np.ndarray:
        """Marginal in w, shape (nx, nw)."""
        return self.values.sum(axis=1) * self.grid.dv

    def v_marginal(self) -> np.ndarray:
        return self.values.sum(axis=2) * self.grid.dw


@dataclass(frozen=True)
class MacroFields:
    """Per-node averaged voltage V and adaptation W."""

    V: np.ndarray
    W: np.ndarray

    def validate(self, grid: PhaseGrid | None = None) -> None:
        if not (np.all(np.isfinite(self.V)) and np.all(np.isfinite(self.W))):
            raise ContractViolation("macro moments are not finite")
        if grid is not None:
            if np.abs(self.V).max() > grid.L_v or np.abs(self.W).max() > grid.L_w:
                raise ContractViolation("macro moments escape the phase box")


@dataclass(frozen=True)
class ThetaField:
    """Concentration rate theta(t, x), solving
    (1/2) d(theta^2)/dt + (rho0/eps) theta^2 = rho0,  theta(0) = theta0.

    theta0=1 is the general (ill-prepared) scaling; theta0=sqrt(eps) is the
    time-homogeneous scaling where theta stays sqrt(eps) for all t.
    """

    epsilon: float
    rho0: np.ndarray
    t: float = 0.0
    theta0: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")
        if self.theta0 < np.sqrt(self.epsilon) - 1e-12 or self.theta0 > 1.0 + 1e-12:
            raise ValueError("theta0 must lie in [sqrt(eps), 1]")

    def squared_at(self, t: float) -> np.ndarray:
        decay = np.exp(-2.0 * self.rho0 * t / self.epsilon)
        return self.epsilon + (self.theta0**2 - self.epsilon) * decay

    def at(self, t: float) -> np.ndarray:
        return np.sqrt(self.squared_at(t))

    @property
    def values(self) -> np.ndarray:
        return self.at(self.t)

    def advanced(self, dt: float) -> "ThetaField":
        return replace(self, t=self.t + dt)

    def ode_residual(self, t: float | None = None) -> np.ndarray:
        """|1/2 d(theta^2)/dt + (rho0/eps) theta^2 - rho0| with the analytic
        derivative of the closed form."""
        s = self.t if t is None else t
        decay = np.exp(-2.0 * self.rho0 * s / self.epsilon)
        dsq = -(2.0 * self.rho0 / self.epsilon) * (self.theta0**2 - self.epsilon) * decay
        return np.abs(0.5 * dsq + self.rho0 / self.epsilon * self.squared_at(s) - self.rho0)

    def inv_square_integral(self, t0: float, t1: float) -> np.ndarray:
        """Exact integral of 1/theta^2 over [t0, t1] (per node)."""
        # int 1/theta^2 = t/eps + ln(theta^2)/(2 rho0), from the closed form
        def antider(t):
            return t / self.epsilon + np.log(self.squared_at(t)) / (2.0 * self.rho0)

        return antider(t1) - antider(t0)

    def inv_integral(self, t0: float, t1: float) -> np.ndarray:
        """Integral of 1/theta over [t0, t1], composite Simpson (1/theta is
        smooth and monotone; 8 panels are ample at solver step sizes)."""
        n = 8
        s = np.linspace(t0, t1, 2 * n + 1)
        vals = 1.0 / self.at(s[:, None]).T  # (nx, 2n+1)
        h = (t1 - t0) / (2 * n)
        weights = np.ones(2 * n + 1)
        weights[1:-1:2] = 4.0
        weights[2:-1:2] = 2.0
        return (vals * weights).sum(axis=1) * h / 3.0


def theta(t: float, epsilon: float, rho0: np.ndarray | float) -> np.ndarray | float:
    """Closed-form concentration rate with theta(0) = 1:
    theta^2 = eps (1 - exp(-2 rho0 t / eps)) + exp(-2 rho0 t / eps)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if not (0.0 < epsilon <= 1.0):
        raise ValueError("epsilon must lie in (0, 1]")
    decay = np.exp(-2.0 * np.asarray(rho0) * t / epsilon)
    out = np.sqrt(epsilon * (1.0 - decay) + decay)
    return float(out) if np.isscalar(rho0) else out


def macro_moments(mu: DensityField) -> MacroFields:
    """V(x) = int v mu du, W(x) = int w mu du."""
    mu.validate()
    area = mu.grid.cell_area
    V = np.einsum("xvw,v->x", mu.values, mu.grid.v_nodes) * area
    W = np.einsum("xvw,w->x", mu.values, mu.grid.w_nodes) * area
    return MacroFields(V=V, W=W)


def moment_q(mu: DensityField, q: int, p: int = 3) -> np.ndarray:
    """M_q[mu](x) = int |u|^q mu du for even q in [2, 2p]."""
    if q % 2 != 0 or not (2 <= q <= 2 * p):
        raise ValueError(f"q must be even in [2, {2 * p}], got {q}")
    vv = mu.grid.v_nodes[:, None] ** 2 + mu.grid.w_nodes[None, :] ** 2
    return np.einsum("xvw,vw->x", mu.values, vv ** (q // 2)) * mu.grid.cell_area


def centered_moment_q(mu: DensityField, q: int, p: int = 3) -> np.ndarray:
    """D_q[mu](x) = int |v - V(x)|^q mu du with V from macro_moments."""
    if q % 2 != 0 or not (2 <= q <= 2 * p):
        raise ValueError(f"q must be even in [2, {2 * p}], got {q}")
    V = macro_moments(mu).V
    dev = np.abs(mu.grid.v_nodes[None, :] - V[:, None]) ** q  # (nx, nv)
    return np.einsum("xvw,xv->x", mu.values, dev) * mu.grid.cell_area


def maxwellian(rho: float, v_nodes: np.ndarray, dv: float) -> np.ndarray:
    """Sampled M_rho(v) = sqrt(rho/2pi) exp(-rho v^2/2), renormalized to unit
    discrete mass so it is an exact fixed point of the discrete Fokker-Planck
    operator."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    raw = np.sqrt(rho / (2.0 * np.pi)) * np.exp(-0.5 * rho * v_nodes**2)
    return raw / (raw.sum() * dv)


def maxwellian_mass_defect(rho: float, v_nodes: np.ndarray, dv: float) -> float:
    """|raw discrete mass - 1| of the sampled Maxwellian before renormalization."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    raw = np.sqrt(rho / (2.0 * np.pi)) * np.exp(-0.5 * rho * v_nodes**2)
    return abs(float(raw.sum() * dv) - 1.0)


@dataclass
class TruncationTelemetry:
    """Mass lost to grid truncation by interpolation-based changes of variable."""

    mass_lost: float = 0.0
    renorm_factor_max: float = 1.0

    def record(self, lost: float, factor: float) -> None:
        self.mass_lost = max(self.mass_lost, lost)
        self.renorm_factor_max = max(self.renorm_factor_max, abs(factor))


def _interp_v_pchip(values: np.ndarray, v_nodes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Monotone cubic interpolation along the v axis; outside the grid -> 0.
    values: (nv, nw), targets: (nv_t,) -> (nv_t, nw)."""
    interp = PchipInterpolator(v_nodes, values, axis=0, extrapolate=False)
    out = interp(targets)
    return np.nan_to_num(out, nan=0.0, copy=False)


def _interp_w_linear(values: np.ndarray, w_nodes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Linear interpolation along the w axis; outside the grid -> 0.
    values: (nv, nw), targets: (nw_t,) -> (nv, nw_t)."""
    nw = w_nodes.size
    dw = w_nodes[1] - w_nodes[0]
    pos = (targets - w_nodes[0]) / dw
    idx = np.floor(pos).astype(int)
    frac = pos - idx
    valid = (pos >= 0.0) & (pos <= nw - 1)
    idx = np.clip(idx, 0, nw - 2)
    left = values[:, idx]
    right = values[:, idx + 1]
    out = left * (1.0 - frac)[None, :] + right * frac[None, :]
    out[:, ~valid] = 0.0
    return out


def _change_of_variable(
    src: DensityField,
    v_targets: np.ndarray,  # (nx, nv)
    w_targets: np.ndarray,  # (nx, nw)
    jacobian: np.ndarray,  # (nx,)
    telemetry: TruncationTelemetry | None,
    t: float,
) -> DensityField:
    grid = src.grid
    out = np.empty_like(src.values)
    for ix in range(src.space.nx):
        tmp = _interp_v_pchip(src.values[ix], grid.v_nodes, v_targets[ix])
        out[ix] = _interp_w_linear(tmp, grid.w_nodes, w_targets[ix])
    out *= jacobian[:, None, None]
    np.clip(out, 0.0, None, out=out)  # PCHIP/linear keep sign; clear round-off
    mass = out.sum(axis=(1, 2)) * grid.cell_area
    if np.any(mass <= 0):
        raise ContractViolation("change of variable lost all mass at a node")
    if telemetry is not None:
        telemetry.record(float(np.abs(1.0 - mass).max()), float(np.abs(1.0 / mass).max()))
    out /= mass[:, None, None]
    return DensityField(values=out, grid=grid, space=src.space, time_stamp=t)


def blow_up(
    mu: DensityField,
    macro: MacroFields,
    theta_values: np.ndarray,
    telemetry: TruncationTelemetry | None = None,
) -> DensityField:
    """Rescale into the concentration frame:
    nu(x, v, w) = theta(x) * mu(x, V(x) + theta(x) v, W(x) + w)."""
    grid = mu.grid
    v_t = macro.V[:, None] + theta_values[:, None] * grid.v_nodes[None, :]
    w_t = macro.W[:, None] + grid.w_nodes[None, :]
    return _change_of_variable(mu, v_t, w_t, theta_values, telemetry, mu.time_stamp)


def press_down(
    nu: DensityField,
    macro: MacroFields,
    theta_values: np.ndarray,
    target_grid: PhaseGrid | None = None,
    telemetry: TruncationTelemetry | None = None,
) -> DensityField:
    """Inverse of blow_up: mu(x, v, w) = nu(x, (v - V)/theta, w - W) / theta."""
    grid = target_grid or nu.grid
    v_t = (grid.v_nodes[None, :] - macro.V[:, None]) / theta_values[:, None]
    w_t = grid.w_nodes[None, :] - macro.W[:, None]
    # evaluate nu at the rescaled points, then divide by theta (Jacobian)
    out = np.empty((nu.space.nx, grid.nv, grid.nw))
    for ix in range(nu.space.nx):
        tmp = _interp_v_pchip(nu.values[ix], nu.grid.v_nodes, v_t[ix])
        out[ix] = _interp_w_linear(tmp, nu.grid.w_nodes, w_t[ix])
    out /= theta_values[:, None, None]
    np.clip(out, 0.0, None, out=out)
    mass = out.sum(axis=(1, 2)) * grid.cell_area
    if np.any(mass <= 0):
        raise ContractViolation("press_down lost all mass at a node")
    if telemetry is not None:
        telemetry.record(float(np.abs(1.0 - mass).max()), float(np.abs(1.0 / mass).max()))
    out /= mass[:, None, None]
    return DensityField(values=out, grid=grid, space=nu.space, time_stamp=nu.time_stamp)


def compose_asymptotic_profile(
    V: np.ndarray,
    bar_mu: np.ndarray,  # (nx, nw), unit mass per node
    theta_values: np.ndarray,
    rho0: np.ndarray,
    grid: PhaseGrid,
    space: SpatialGrid,
    t: float = 0.0,
) -> DensityField:
    """mu(x, v, w) = M_{rho0/theta^2}(v - V(x)) * bar_mu(x, w): the product
    profile every convergence check compares against."""
    nx = space.nx
    values = np.empty((nx, grid.nv, grid.nw))
    for ix in range(nx):
        prof = maxwellian(rho0[ix] / theta_values[ix] ** 2, grid.v_nodes - V[ix], grid.dv)
        values[ix] = prof[:, None] * bar_mu[ix][None, :]
    f = DensityField(values=values, grid=grid, space=space, time_stamp=t)
    return f.normalized()


# ---------------------------------------------------------------------------
# Density dump format: one JSON header line, then the raw (x, v, w)-ordered
# float64 little-endian array.
# ---------------------------------------------------------------------------


def write_density(path, field: DensityField, eps: float) -> None:
    header = {
        "nx": field.space.nx,
        "nv": field.grid.nv,
        "nw": field.grid.nw,
        "Lv": field.grid.L_v,
        "Lw": field.grid.L_w,
        "t": field.time_stamp,
        "eps": eps,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(field.values.astype("<f8").tobytes(order="C"))


def read_density(path) -> tuple[DensityField, float]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    grid = PhaseGrid(nv=header["nv"], nw=header["nw"], L_v=header["Lv"], L_w=header["Lw"])
    space = SpatialGrid(nx=header["nx"])
    values = np.frombuffer(raw, dtype="<f8").reshape(header["nx"], header["nv"], header["nw"]).copy()
    f = DensityField(values=values, grid=grid, space=space, time_stamp=header["t"])
    return f, header["eps"]
