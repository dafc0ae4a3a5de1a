"""Time integration of the kinetic density and of its rescaled version, with
an implicit Chang-Cooper treatment of the stiff Fokker-Planck part.

Splitting per step (rescaled mode):
  half upwind transport (smooth drift) -> implicit Chang-Cooper over the
  exact integral of 1/theta^2 (stiff relaxation, diffusion, and the linear
  -w/theta coupling) -> half transport -> RK2 macro update -> theta closed
  form. The transport halves sub-cycle internally so every explicit sub-step
  satisfies its CFL bound; cost per step is uniform in eps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CFLViolation, ContractViolation
from . import model as model_mod
from .model import ModelConfig, eval_drift
from .phase_space import (
    DensityField,
    MacroFields,
    PhaseGrid,
    SpatialGrid,
    ThetaField,
    macro_moments,
    maxwellian,
)


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    t_end: float = 2.0
    cfl_safety: float = 0.45
    mode: str = "auto"  # auto | direct_kinetic | rescaled_coupled

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0 < self.cfl_safety < 1):
            raise ValueError("cfl_safety must lie in (0, 1)")
        if self.mode not in ("auto", "direct_kinetic", "rescaled_coupled"):
            raise ValueError(f"unknown solver mode {self.mode!r}")

    def resolve_mode(self, eps: float) -> str:
        if self.mode != "auto":
            return self.mode
        return "rescaled_coupled" if eps < 0.05 else "direct_kinetic"


@dataclass
class StepTelemetry:
    """Per-run counters: conservation defects, clamps, frame-centering drift."""

    mass_defect_max: float = 0.0
    negative_clamp_min: float = 0.0
    clamp_count: int = 0
    centering_v_max: float = 0.0
    centering_w_max: float = 0.0
    transport_substeps: int = 0

    def record_mass(self, defect: float) -> None:
        self.mass_defect_max = max(self.mass_defect_max, abs(defect))

    def record_clamp(self, worst: float, count: int) -> None:
        self.negative_clamp_min = min(self.negative_clamp_min, worst)
        self.clamp_count += count


@dataclass(frozen=True)
class CoupledState:
    """Rescaled-frame solution nu plus the macro frame (V, W) and theta."""

    nu: DensityField
    macro: MacroFields
    theta: ThetaField
    t: float

    def validate(self, centering_tol: float = 1e-6) -> None:
        self.nu.validate()
        m = macro_moments(self.nu)
        worst = max(np.abs(m.V).max(), np.abs(m.W).max())
        if worst > centering_tol:
            raise ContractViolation(
                f"rescaled frame not centered: |mean| = {worst:.3e} > {centering_tol:.1e}"
            )

    def centering_residual(self) -> tuple[float, float]:
        m = macro_moments(self.nu)
        return float(np.abs(m.V).max()), float(np.abs(m.W).max())


# ---------------------------------------------------------------------------
# Chang-Cooper implicit Fokker-Planck step
# ---------------------------------------------------------------------------


def _chang_cooper_delta(wcc: np.ndarray) -> np.ndarray:
    """CC weights delta = 1/w - 1/(e^w - 1); the flux then vanishes exactly on
    the sampled equilibrium whose log-ratio between neighbours is w."""
    out = np.empty_like(wcc)
    small = np.abs(wcc) < 1e-8
    big_pos = wcc > 30.0
    big_neg = wcc < -30.0
    mid = ~(small | big_pos | big_neg)
    ws = wcc[mid]
    out[mid] = 1.0 / ws - 1.0 / np.expm1(ws)
    out[small] = 0.5 - wcc[small] / 12.0
    out[big_pos] = 1.0 / wcc[big_pos]  # e^w dominates
    out[big_neg] = 1.0 / wcc[big_neg] + 1.0
    return out


def _thomas_batched(lower, diag, upper, rhs):
    """Solve tridiagonal systems batched over leading axes.

    lower/diag/upper/rhs: (..., n); lower[..., 0] and upper[..., -1] unused.
    """
    n = diag.shape[-1]
    cp = np.empty_like(diag)
    dp = np.empty_like(rhs)
    cp[..., 0] = upper[..., 0] / diag[..., 0]
    dp[..., 0] = rhs[..., 0] / diag[..., 0]
    for i in range(1, n):
        denom = diag[..., i] - lower[..., i] * cp[..., i - 1]
        cp[..., i] = upper[..., i] / denom
        dp[..., i] = (rhs[..., i] - lower[..., i] * dp[..., i - 1]) / denom
    out = np.empty_like(rhs)
    out[..., -1] = dp[..., -1]
    for i in range(n - 2, -1, -1):
        out[..., i] = dp[..., i] - cp[..., i] * out[..., i + 1]
    return out


def chang_cooper_line_step(
    lines: np.ndarray,  # (..., nv) densities along v
    dt_eff: np.ndarray,  # (...,) effective step per line
    drift_mid: np.ndarray,  # (..., nv-1) drift coefficient at interfaces
    dv: float,
) -> np.ndarray:
    """Implicit finite-volume step of d_t f = d_v[ drift f + d_v f ] with
    no-flux boundaries. Conserves each line mass exactly (column sums are 1)
    and preserves positivity (M-matrix)."""
    wcc = drift_mid * dv
    delta = _chang_cooper_delta(wcc)
    # interface flux F_{i+1/2} = coefL f_i + coefR f_{i+1}
    coefL = drift_mid * delta - 1.0 / dv
    coefR = drift_mid * (1.0 - delta) + 1.0 / dv
    lam = dt_eff[..., None] / dv
    nv = lines.shape[-1]
    diag = np.ones(lines.shape)
    upper = np.zeros(lines.shape)
    lower = np.zeros(lines.shape)
    # row i gains -(lam)(F_{i+1/2} - F_{i-1/2}) on the implicit side
    diag[..., : nv - 1] -= lam * coefL
    upper[..., : nv - 1] = -lam * coefR
    diag[..., 1:] += lam * coefR
    lower[..., 1:] = lam * coefL
    return _thomas_batched(lower, diag, upper, lines)


def fokker_planck_step(
    nu: DensityField,
    dt: float,
    rho0: np.ndarray,
    prefactor: np.ndarray | float = 1.0,
    w_shift: np.ndarray | None = None,
    telemetry: StepTelemetry | None = None,
) -> DensityField:
    """Implicit Chang-Cooper update of d_t nu = prefactor * d_v[rho0 v nu + d_v nu]
    per (x, w) line. The sampled-and-renormalized Maxwellian M_rho0 is an exact
    fixed point. `w_shift` (per node) generalizes the drift to rho0 v - s w,
    which the coupled stepper uses to absorb the stiff linear coupling."""
    grid, space = nu.grid, nu.space
    v_mid = 0.5 * (grid.v_nodes[:-1] + grid.v_nodes[1:])
    pref = np.broadcast_to(np.asarray(prefactor, dtype=float), (space.nx,))
    drift = rho0[:, None, None] * v_mid[None, :, None]  # (nx, nv-1, 1)
    if w_shift is not None:
        drift = drift - w_shift[:, None, None] * grid.w_nodes[None, None, :]
    drift = np.broadcast_to(drift, (space.nx, grid.nv - 1, grid.nw))
    # lines along v: reorder to (nx, nw, nv)
    lines = np.ascontiguousarray(np.swapaxes(nu.values, 1, 2))
    drift_mid = np.ascontiguousarray(np.moveaxis(drift, 1, 2))
    dt_eff = np.broadcast_to((dt * pref)[:, None], (space.nx, grid.nw))
    out = chang_cooper_line_step(lines, dt_eff, drift_mid, grid.dv)
    values = np.swapaxes(out, 1, 2)
    values, clamp_worst, clamp_count = _clamp_negative(values)
    if telemetry is not None:
        telemetry.record_clamp(clamp_worst, clamp_count)
        telemetry.record_mass(
            float(np.abs(values.sum(axis=(1, 2)) * grid.cell_area - 1.0).max())
        )
    return nu.with_values(values, nu.time_stamp + dt)


def _clamp_negative(values: np.ndarray) -> tuple[np.ndarray, float, int]:
    worst = float(values.min())
    if worst >= 0.0:
        return values, 0.0, 0
    if worst < -1e-12:
        raise ContractViolation(f"solver produced negative density {worst:.3e}")
    count = int((values < 0).sum())
    np.clip(values, 0.0, None, out=values)
    return values, worst, count


# ---------------------------------------------------------------------------
# Conservative first-order upwind transport
# ---------------------------------------------------------------------------


def _upwind_flux_divergence(values, pv, mv, pw, mw, dv, dw):
    """Flux divergence of the 2D upwind scheme with no-flux boundaries.
    pv/mv: positive/negative parts of the v-interface drift (nx, nv-1, nw);
    pw/mw: same at w interfaces (nx, nv, nw-1)."""
    fv = pv * values[:, :-1, :] + mv * values[:, 1:, :]
    fw = pw * values[:, :, :-1] + mw * values[:, :, 1:]
    div = np.zeros_like(values)
    div[:, :-1, :] += fv / dv
    div[:, 1:, :] -= fv / dv
    div[:, :, :-1] += fw / dw
    div[:, :, 1:] -= fw / dw
    return div


def transport_cfl_limit(drift_v, drift_w, dv, dw) -> float:
    """Largest dt with combined Courant number 1 for the 2D upwind step."""
    rate = float(np.abs(drift_v).max() / dv + np.abs(drift_w).max() / dw)
    return np.inf if rate == 0.0 else 1.0 / rate


def transport_step(
    nu: DensityField,
    drift_v: np.ndarray,
    drift_w: np.ndarray,
    dt: float,
    telemetry: StepTelemetry | None = None,
) -> DensityField:
    """One conservative upwind step of d_t nu + d_v(a nu) + d_w(c nu) = 0.

    drift_v / drift_w are interface fields broadcastable to (nx, nv-1, nw)
    and (nx, nv, nw-1). Rejects the step when the combined Courant number
    exceeds 1 (positivity bound)."""
    grid = nu.grid
    drift_v = np.broadcast_to(drift_v, (nu.space.nx, grid.nv - 1, grid.nw))
    drift_w = np.broadcast_to(drift_w, (nu.space.nx, grid.nv, grid.nw - 1))
    limit = transport_cfl_limit(drift_v, drift_w, grid.dv, grid.dw)
    if dt > limit:
        raise CFLViolation(dt, limit)
    pv, mv = np.maximum(drift_v, 0.0), np.minimum(drift_v, 0.0)
    pw, mw = np.maximum(drift_w, 0.0), np.minimum(drift_w, 0.0)
    values = nu.values - dt * _upwind_flux_divergence(
        nu.values, pv, mv, pw, mw, grid.dv, grid.dw
    )
    values, clamp_worst, clamp_count = _clamp_negative(values)
    if telemetry is not None:
        telemetry.record_clamp(clamp_worst, clamp_count)
        telemetry.record_mass(
            float(np.abs(values.sum(axis=(1, 2)) * grid.cell_area - 1.0).max())
        )
    return nu.with_values(values, nu.time_stamp + dt)


def _upwind_sweep(values, pos, neg, h, axis_v: bool):
    """One conservative upwind sub-step along a single phase direction."""
    out = values.copy()
    if axis_v:
        flux = pos * values[:, :-1, :] + neg * values[:, 1:, :]
        out[:, :-1, :] -= h * flux
        out[:, 1:, :] += h * flux
    else:
        flux = pos * values[:, :, :-1] + neg * values[:, :, 1:]
        out[:, :, :-1] -= h * flux
        out[:, :, 1:] += h * flux
    return out


def _subcycled_transport(nu, drift_v, drift_w, duration, cfl_safety, telemetry):
    """Apply upwind transport over `duration` by directional sweeps, each
    sub-cycled to its own Courant bound (the v drift usually binds; sweeping
    the directions separately avoids paying its CFL count on the w fluxes)."""
    grid = nu.grid
    drift_v = np.broadcast_to(drift_v, (nu.space.nx, grid.nv - 1, grid.nw))
    drift_w = np.broadcast_to(drift_w, (nu.space.nx, grid.nv, grid.nw - 1))
    rate_v = float(np.abs(drift_v).max()) / grid.dv
    rate_w = float(np.abs(drift_w).max()) / grid.dw
    nsub_v = max(1, int(np.ceil(duration * rate_v / cfl_safety)))
    nsub_w = max(1, int(np.ceil(duration * rate_w / cfl_safety)))
    pv, mv = np.maximum(drift_v, 0.0), np.minimum(drift_v, 0.0)
    pw, mw = np.maximum(drift_w, 0.0), np.minimum(drift_w, 0.0)
    values = nu.values
    worst, count = 0.0, 0
    hv = duration / nsub_v / grid.dv
    for _ in range(nsub_v):
        values = _upwind_sweep(values, pv, mv, hv, axis_v=True)
        values, w0, c0 = _clamp_negative(values)
        worst, count = min(worst, w0), count + c0
    hw = duration / nsub_w / grid.dw
    for _ in range(nsub_w):
        values = _upwind_sweep(values, pw, mw, hw, axis_v=False)
        values, w0, c0 = _clamp_negative(values)
        worst, count = min(worst, w0), count + c0
    if telemetry is not None:
        telemetry.transport_substeps += nsub_v + nsub_w
        telemetry.record_clamp(worst, count)
        telemetry.record_mass(
            float(np.abs(values.sum(axis=(1, 2)) * grid.cell_area - 1.0).max())
        )
    return nu.with_values(values, nu.time_stamp + duration)


# ---------------------------------------------------------------------------
# Coupled rescaled stepper
# ---------------------------------------------------------------------------


def _rescaled_drifts(state: CoupledState, model: ModelConfig, theta_vals: np.ndarray,
                     E: np.ndarray):
    """Smooth part of the rescaled drift fields at v/w interfaces.

    drift_v = theta^{-1}[N(V + theta v) - N(V)] - v (Psi*_r rho0) - E/theta
    (the stiff -w/theta part lives in the implicit step);
    drift_w = A0(theta v, w) = a theta v - b w.
    """
    grid = state.nu.grid
    V = state.macro.V
    psi_rho = model.psi_conv_rho0
    v_mid = 0.5 * (grid.v_nodes[:-1] + grid.v_nodes[1:])
    shifted = eval_drift(model.drift, V[:, None] + theta_vals[:, None] * v_mid[None, :])
    base = eval_drift(model.drift, V)[:, None]
    a_v = (shifted - base) / theta_vals[:, None] \
        - v_mid[None, :] * psi_rho[:, None] - (E / theta_vals)[:, None]
    w_mid = 0.5 * (grid.w_nodes[:-1] + grid.w_nodes[1:])
    a_w = (model.adaptation.a * theta_vals[:, None, None] * grid.v_nodes[None, :, None]
           - model.adaptation.b * w_mid[None, None, :])
    return a_v[:, :, None], a_w


def _macro_rhs(model: ModelConfig, V: np.ndarray, W: np.ndarray, E: np.ndarray):
    dV = eval_drift(model.drift, V) + E - W - model_mod.nonlocal_operator_L(model, V)
    dW = model.adaptation.a * V + model.adaptation.c - model.adaptation.b * W
    return dV, dW


def step_rescaled_coupled(
    state: CoupledState,
    dt: float,
    model: ModelConfig,
    cfl_safety: float = 0.45,
    telemetry: StepTelemetry | None = None,
) -> CoupledState:
    """One Strang-split step of the coupled rescaled system."""
    grid = state.nu.grid
    theta_now = state.theta.at(state.t)
    theta_next = state.theta.at(state.t + dt)
    E = model_mod.nonlinearity_error_rescaled(
        model, state.nu.values, grid.v_nodes, grid.cell_area, state.macro.V, theta_now
    )

    a_v, a_w = _rescaled_drifts(state, model, theta_now, E)
    nu = _subcycled_transport(state.nu, a_v, a_w, 0.5 * dt, cfl_safety, telemetry)

    # implicit step over the exact time integrals of the stiff factors; the
    # -w term of b0 lands on the flux side with drift rho v + theta w, so the
    # conditional equilibrium sits at -theta w / rho
    dtau2 = state.theta.inv_square_integral(state.t, state.t + dt)
    dtau1 = state.theta.inv_integral(state.t, state.t + dt)
    w_shift = -dtau1 / dtau2  # effective theta weighting of the -w coupling
    nu = fokker_planck_step(nu, 1.0, model.rho0.values, prefactor=dtau2,
                            w_shift=w_shift, telemetry=telemetry)

    a_v, a_w = _rescaled_drifts(replace(state, nu=nu), model, theta_next, E)
    nu = _subcycled_transport(nu, a_v, a_w, 0.5 * dt, cfl_safety, telemetry)
    nu = nu.with_values(
        nu.values / (nu.mass_per_node()[:, None, None]), state.t + dt
    )

    # macro update (RK2, E frozen over the step)
    V, W = state.macro.V, state.macro.W
    k1V, k1W = _macro_rhs(model, V, W, E)
    k2V, k2W = _macro_rhs(model, V + dt * k1V, W + dt * k1W, E)
    macro = MacroFields(V=V + 0.5 * dt * (k1V + k2V), W=W + 0.5 * dt * (k1W + k2W))

    if telemetry is not None:
        mv, mw = macro_moments(nu).V, macro_moments(nu).W
        telemetry.centering_v_max = max(telemetry.centering_v_max, float(np.abs(mv).max()))
        telemetry.centering_w_max = max(telemetry.centering_w_max, float(np.abs(mw).max()))
    return CoupledState(nu=nu, macro=macro, theta=state.theta.advanced(dt), t=state.t + dt)


def step_direct_kinetic(
    mu: DensityField,
    dt: float,
    epsilon: float,
    model: ModelConfig,
    cfl_safety: float = 0.45,
    telemetry: StepTelemetry | None = None,
    warn: list | None = None,
) -> DensityField:
    """Same splitting in the unrescaled frame: upwind transport with the slow
    drift (N(v) - w - K_Psi, A(v, w)), then one implicit Chang-Cooper step
    with drift (rho0/eps)(v - V) and unit diffusion."""
    grid = mu.grid
    if np.sqrt(epsilon) < grid.dv and warn is not None:
        warn.append(
            f"stiffness advisory: eps={epsilon:g} below grid scale dv={grid.dv:g}; "
            "accuracy not guaranteed"
        )
    V = macro_moments(mu).V
    slope, offset = model_mod.nonlocal_interaction_field(model, V)
    v_mid = 0.5 * (grid.v_nodes[:-1] + grid.v_nodes[1:])
    a_v = (eval_drift(model.drift, v_mid)[None, :] - slope[:, None] * v_mid[None, :]
           - offset[:, None])[:, :, None] - grid.w_nodes[None, None, :]
    w_mid = 0.5 * (grid.w_nodes[:-1] + grid.w_nodes[1:])
    a_w = model_mod.eval_adaptation(
        model.adaptation, grid.v_nodes[None, :, None], w_mid[None, None, :]
    ) * np.ones((mu.space.nx, 1, 1))

    out = _subcycled_transport(mu, a_v, a_w, 0.5 * dt, cfl_safety, telemetry)
    # stiff relaxation toward V with unit diffusion, Chang-Cooper form
    rho_eff = model.rho0.values / epsilon
    lines = np.ascontiguousarray(np.swapaxes(out.values, 1, 2))
    drift_mid = rho_eff[:, None, None] * (v_mid[None, None, :] - V[:, None, None])
    drift_mid = np.broadcast_to(drift_mid, (mu.space.nx, grid.nw, grid.nv - 1))
    dt_eff = np.full((mu.space.nx, grid.nw), dt)
    solved = chang_cooper_line_step(lines, dt_eff, drift_mid, grid.dv)
    out = out.with_values(np.swapaxes(solved, 1, 2), out.time_stamp)

    out = _subcycled_transport(out, a_v, a_w, 0.5 * dt, cfl_safety, telemetry)
    values, clamp_worst, clamp_count = _clamp_negative(out.values.copy())
    mass = values.sum(axis=(1, 2)) * grid.cell_area
    if telemetry is not None:
        telemetry.record_clamp(clamp_worst, clamp_count)
        telemetry.record_mass(float(np.abs(mass - 1.0).max()))
    return mu.with_values(values / mass[:, None, None], mu.time_stamp + dt)


def marginal_residual(history: list[CoupledState], a: float, b: float) -> np.ndarray:
    """Finite-difference residual of the marginal equation
    d_t bar-nu - b d_w(w bar-nu) + a theta d_w int v nu dv = 0
    at the middle of the stored history; returns the per-node L1(w) norm."""
    if len(history) < 2:
        raise ValueError("marginal_residual needs at least 2 stored steps")
    mid = len(history) // 2
    lo = max(0, mid - 1)
    hi = min(len(history) - 1, mid + 1)
    sm, sp = history[lo], history[hi]
    st = history[mid]
    grid = st.nu.grid
    dt = sp.t - sm.t
    bar_dot = (sp.nu.w_marginal() - sm.nu.w_marginal()) / dt
    bar = st.nu.w_marginal()
    w = grid.w_nodes
    transport = b * np.gradient(w[None, :] * bar, grid.dw, axis=1)
    vflux = (st.nu.values * grid.v_nodes[None, :, None]).sum(axis=1) * grid.dv
    theta_vals = st.theta.at(st.t)
    source = a * theta_vals[:, None] * np.gradient(vflux, grid.dw, axis=1)
    resid = bar_dot - transport + source
    return np.abs(resid).sum(axis=1) * grid.dw


def relaxed_maxwellian_field(rho0: np.ndarray, grid: PhaseGrid, space: SpatialGrid,
                             bar_profile: np.ndarray) -> DensityField:
    """M_rho0 (x) bar_profile product field (the Fokker-Planck local
    equilibrium in the rescaled frame)."""
    values = np.empty((space.nx, grid.nv, grid.nw))
    for ix in range(space.nx):
        prof = maxwellian(rho0[ix], grid.v_nodes, grid.dv)
        values[ix] = prof[:, None] * bar_profile[ix][None, :]
    return DensityField(values=values, grid=grid, space=space).normalized()
