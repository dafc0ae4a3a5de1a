"""Entropy, free-energy, Fisher, weighted-norm and inequality diagnostics.

All functionals act on single-node (nv, nw) slices or (nw,) profiles with
the plain-cell quadrature of the phase grid. Log-based quantities use the
0*ln 0 = 0 convention with entries below 1e-300 treated as zero. Everything
here is a pure function; fan-out over (x, time) pairs is safe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .phase_space import DensityField, PhaseGrid, maxwellian

LOG_FLOOR = 1e-300
FD_FLOOR = 1e-150  # cells below this are excluded from log-derivative stencils
OVERFLOW_GUARD = 1e300


# ---------------------------------------------------------------------------
# Entropies and Fisher information
# ---------------------------------------------------------------------------


def boltzmann_entropy(slice_values: np.ndarray, cell: float) -> float:
    """H[f] = int f ln f."""
    f = np.asarray(slice_values, dtype=float)
    if np.any(f < 0):
        raise ValueError("entropy needs a non-negative slice")
    contrib = np.where(f > LOG_FLOOR, f * np.log(np.maximum(f, LOG_FLOOR)), 0.0)
    return float(contrib.sum() * cell)


def free_energy(nu_slice: np.ndarray, rho: float, grid: PhaseGrid) -> float:
    """E[nu] = int nu ln(nu / M_rho) du against the sampled Maxwellian."""
    prof = maxwellian(rho, grid.v_nodes, grid.dv)
    log_m = np.log(prof)[:, None]
    f = np.asarray(nu_slice, dtype=float)
    contrib = np.where(
        f > LOG_FLOOR, f * (np.log(np.maximum(f, LOG_FLOOR)) - log_m), 0.0
    )
    return float(contrib.sum() * grid.cell_area)


def fisher_information_with_flag(
    nu_slice: np.ndarray, rho: float, grid: PhaseGrid
) -> tuple[float, bool]:
    """I[nu | M_rho] = int |d_v ln(nu / M_rho)|^2 nu du.

    Centered differences of ln nu plus the analytic d_v ln M_rho = -rho v.
    Returns (value, unreliable); unreliable is set when more than half of the
    cells sit at the positivity floor."""
    f = np.asarray(nu_slice, dtype=float)
    valid = f > FD_FLOOR
    floored_fraction = 1.0 - valid.mean()
    logf = np.log(np.maximum(f, FD_FLOOR))
    dlog = np.gradient(logf, grid.dv, axis=0)
    score = dlog + rho * grid.v_nodes[:, None]
    ok = valid & np.roll(valid, 1, axis=0) & np.roll(valid, -1, axis=0)
    ok[0, :] = ok[-1, :] = False  # one-sided stencils are not trusted
    value = float((np.where(ok, score**2, 0.0) * f).sum() * grid.cell_area)
    return value, floored_fraction > 0.5


def fisher_information(nu_slice: np.ndarray, rho: float, grid: PhaseGrid) -> float:
    return fisher_information_with_flag(nu_slice, rho, grid)[0]


def relative_entropy(nu_slice: np.ndarray, rho: float, grid: PhaseGrid) -> float:
    """H[nu | M_rho (x) bar-nu] with bar-nu the w-marginal of the slice."""
    f = np.asarray(nu_slice, dtype=float)
    bar = f.sum(axis=0) * grid.dv
    prof = maxwellian(rho, grid.v_nodes, grid.dv)
    target = prof[:, None] * bar[None, :]
    contrib = np.where(
        (f > LOG_FLOOR) & (target > LOG_FLOOR),
        f * (np.log(np.maximum(f, LOG_FLOOR)) - np.log(np.maximum(target, LOG_FLOOR))),
        0.0,
    )
    return float(contrib.sum() * grid.cell_area)


def pinsker_check(nu_slice: np.ndarray, rho: float, grid: PhaseGrid,
                  tol: float = 1e-10) -> tuple[bool, float]:
    """Csiszar-Kullback: ||nu - M (x) bar-nu||_1^2 <= 2 H[nu | M (x) bar-nu].
    Returns (ok, slack)."""
    f = np.asarray(nu_slice, dtype=float)
    bar = f.sum(axis=0) * grid.dv
    prof = maxwellian(rho, grid.v_nodes, grid.dv)
    l1 = float(np.abs(f - prof[:, None] * bar[None, :]).sum() * grid.cell_area)
    h = relative_entropy(nu_slice, rho, grid)
    slack = 2.0 * h - l1**2
    return slack >= -tol, slack


def half_entropy(f: np.ndarray, g: np.ndarray, cell: float) -> float:
    """H_1/2[f|g] = int f ln(2f / (f + g))."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    h = 0.5 * (f + g)
    contrib = np.where(
        f > LOG_FLOOR,
        f * (np.log(np.maximum(f, LOG_FLOOR)) - np.log(np.maximum(h, LOG_FLOOR))),
        0.0,
    )
    return float(contrib.sum() * cell)


def half_fisher(f: np.ndarray, g: np.ndarray, dv: float, dw: float) -> float:
    """I_1/2[f|g] = int |grad ln(2f / (f + g))|^2 f, finite differences in
    both phase directions."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    h = 0.5 * (f + g)
    ratio = np.log(np.maximum(f, FD_FLOOR)) - np.log(np.maximum(h, FD_FLOOR))
    valid = (f > FD_FLOOR) & (h > FD_FLOOR)
    gv = np.gradient(ratio, dv, axis=0)
    gw = np.gradient(ratio, dw, axis=1)
    ok = valid.copy()
    for ax, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        ok &= np.roll(valid, shift, axis=ax)
    ok[0, :] = ok[-1, :] = False
    ok[:, 0] = ok[:, -1] = False
    return float((np.where(ok, gv**2 + gw**2, 0.0) * f).sum() * dv * dw)


@dataclass(frozen=True)
class SandwichResult:
    lower_ok: bool
    upper_ok: bool
    lower_slack: float
    upper_slack: float


def ck_sandwich(f: np.ndarray, g: np.ndarray, cell: float,
                tol: float = 1e-10) -> SandwichResult:
    """(1/8) ||f - g||_1^2 <= H_1/2[f|g] <= ||f - g||_1 for unit-mass f, g."""
    l1 = float(np.abs(np.asarray(f) - np.asarray(g)).sum() * cell)
    h = half_entropy(f, g, cell)
    lower = h - l1**2 / 8.0
    upper = l1 - h
    return SandwichResult(lower >= -tol, upper >= -tol, lower, upper)


# ---------------------------------------------------------------------------
# Weighted Sobolev norms, projection, dissipation
# ---------------------------------------------------------------------------

WEIGHT_VARIANTS = ("m_eps", "m_minus", "m_plus", "bar_m", "bar_m_minus", "bar_m_plus")


@dataclass(frozen=True)
class WeightSpec:
    """Gaussian-growth weight family. kappa must exceed 1/(2b) for the
    weighted-L2 propagation estimates to close; validated where b is known."""

    kappa: float = 1.0
    variant: str = "m_eps"

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.variant not in WEIGHT_VARIANTS:
            raise ValueError(f"unknown weight variant {self.variant!r}")

    def validate_against(self, b: float) -> None:
        if self.kappa <= 1.0 / (2.0 * b):
            raise ValueError(
                f"kappa must exceed 1/(2 b) = {1.0 / (2.0 * b):g}, got {self.kappa:g}"
            )

    def phase_weight(self, rho: float, grid: PhaseGrid) -> np.ndarray:
        """(nv, nw) weight; m_eps carries the 2 pi / sqrt(rho kappa) prefactor,
        m_{-/+} carry (rho kappa)^{-1/2} with exponent factors 1/8 and 2.
        Overflow to inf is deliberate; the norm guards catch it."""
        quad = rho * grid.v_nodes[:, None] ** 2 + self.kappa * grid.w_nodes[None, :] ** 2
        with np.errstate(over="ignore"):
            if self.variant == "m_eps":
                return 2.0 * np.pi / np.sqrt(rho * self.kappa) * np.exp(0.5 * quad)
            if self.variant == "m_minus":
                return (rho * self.kappa) ** -0.5 * np.exp(quad / 8.0)
            if self.variant == "m_plus":
                return (rho * self.kappa) ** -0.5 * np.exp(2.0 * quad)
        raise ValueError(f"{self.variant} is a marginal weight; use w_weight")

    def w_weight(self, w_nodes: np.ndarray) -> np.ndarray:
        quad = self.kappa * w_nodes**2
        if self.variant == "bar_m":
            return np.sqrt(2.0 * np.pi / self.kappa) * np.exp(0.5 * quad)
        if self.variant == "bar_m_minus":
            return self.kappa**-0.5 * np.exp(quad / 8.0)
        if self.variant == "bar_m_plus":
            return self.kappa**-0.5 * np.exp(2.0 * quad)
        raise ValueError(f"{self.variant} is a phase weight; use phase_weight")


def _w_derivative(values: np.ndarray, dw: float, order: int) -> np.ndarray:
    out = values
    for _ in range(order):
        out = np.gradient(out, dw, axis=-1)
    return out


def weighted_norm(
    nu_slice: np.ndarray,
    k: int,
    weight: WeightSpec,
    grid: PhaseGrid,
    rho: float | None = None,
) -> float:
    """||nu||_{H^k_w(m)}^2 = sum_{l<=k} int |d_w^l nu|^2 m du, square-rooted.

    Accepts (nv, nw) slices with a phase weight or (nw,) profiles with a
    marginal weight. Returns inf when the weighted integrand overflows
    (tails too fat for the weight)."""
    if k not in (0, 1, 2):
        raise ValueError("k must be 0, 1 or 2")
    values = np.asarray(nu_slice, dtype=float)
    if values.ndim == 2:
        if rho is None:
            raise ValueError("phase-weight norms need rho")
        sqrtm = np.sqrt(weight.phase_weight(rho, grid))
        cell = grid.cell_area
    elif values.ndim == 1:
        sqrtm = np.sqrt(weight.w_weight(grid.w_nodes))
        cell = grid.dw
    else:
        raise ValueError("slice must be 1D or 2D")
    total = 0.0
    for order in range(k + 1):
        y = _w_derivative(values, grid.dw, order) * sqrtm
        if not np.all(np.isfinite(y)) or np.any(np.abs(y) ** 2 >= OVERFLOW_GUARD):
            return float("inf")
        total += float((y**2).sum() * cell)
    return float(np.sqrt(total))


def projection_pi(nu: DensityField, rho0: np.ndarray) -> tuple[DensityField, np.ndarray]:
    """Pi nu = M_rho0 (x) bar-nu and the signed remainder nu_perp = nu - Pi nu
    (returned as a raw array since it carries no positivity invariant)."""
    grid = nu.grid
    bar = nu.w_marginal()
    values = np.empty_like(nu.values)
    for ix in range(nu.space.nx):
        prof = maxwellian(rho0[ix], grid.v_nodes, grid.dv)
        values[ix] = prof[:, None] * bar[ix][None, :]
    pi = nu.with_values(values)
    return pi, nu.values - values


def fp_dissipation(nu_slice: np.ndarray, rho: float, weight: WeightSpec,
                   grid: PhaseGrid) -> float:
    """D_rho[nu] = int |d_v(nu m)|^2 m^{-1} du (finite differences in v)."""
    m = weight.phase_weight(rho, grid)
    y = np.asarray(nu_slice, dtype=float) * m
    if not np.all(np.isfinite(y)) or np.any(np.abs(y) >= OVERFLOW_GUARD):
        return float("inf")
    dy = np.gradient(y, grid.dv, axis=0)
    return float((dy**2 / m).sum() * grid.cell_area)


def poincare_gap(nu_perp_slice: np.ndarray, rho: float, weight: WeightSpec,
                 grid: PhaseGrid) -> float:
    """Slack D_rho[nu_perp] - ||nu_perp||^2_{L2(m)} of the Gaussian-Poincare
    inequality (valid in this constant-free form for rho >= 1)."""
    m = weight.phase_weight(rho, grid)
    lhs = float((np.asarray(nu_perp_slice) ** 2 * m).sum() * grid.cell_area)
    return fp_dissipation(nu_perp_slice, rho, weight, grid) - lhs


def poincare_w_gaps(nu_slice: np.ndarray, rho: float, weight: WeightSpec,
                    grid: PhaseGrid) -> tuple[float, float]:
    """Slacks of the two w-direction Poincare estimates in L2(m):
    ||nu|| <= kappa^{-1/2} ||d_w nu||  and  ||w nu|| <= (2/kappa) ||d_w nu||."""
    m = weight.phase_weight(rho, grid)
    f = np.asarray(nu_slice, dtype=float)
    dfw = np.gradient(f, grid.dw, axis=1)
    n_f = np.sqrt((f**2 * m).sum() * grid.cell_area)
    n_df = np.sqrt((dfw**2 * m).sum() * grid.cell_area)
    n_wf = np.sqrt(((grid.w_nodes[None, :] * f) ** 2 * m).sum() * grid.cell_area)
    kappa = weight.kappa
    return n_df / np.sqrt(kappa) - n_f, (2.0 / kappa) * n_df - n_wf


# ---------------------------------------------------------------------------
# Equicontinuity and the shear change of variable
# ---------------------------------------------------------------------------


def translate_w(values: np.ndarray, cells: int) -> np.ndarray:
    """Grid-exact translation tau_{w0} f(w) = f(w + w0) for w0 = cells * dw,
    zero-filled at the exposed boundary."""
    if cells == 0:
        return values.copy()
    out = np.zeros_like(values)
    if cells > 0:
        out[..., :-cells] = values[..., cells:]
    else:
        out[..., -cells:] = values[..., :cells]
    return out


def equicontinuity_modulus(nu: DensityField, w0_cells: list[int]) -> np.ndarray:
    """||nu - tau_{w0} nu||_{L1} per (x, w0) for grid-exact shifts.
    Returns an array of shape (len(w0_cells), nx)."""
    for c in w0_cells:
        if not isinstance(c, (int, np.integer)):
            raise ValueError("shifts must be whole numbers of cells")
    out = np.empty((len(w0_cells), nu.space.nx))
    for i, c in enumerate(w0_cells):
        shifted = translate_w(nu.values, int(c))
        out[i] = np.abs(nu.values - shifted).sum(axis=(1, 2)) * nu.grid.cell_area
    return out


def equicontinuity_constant(nu0: DensityField, b: float) -> tuple[float, float]:
    """C = sqrt(max(8 m1, 1/b)) with m1 measured from the initial data as
    sup_x int (1 + |v|) |d_w nu0| du. Returns (C, m1)."""
    grid = nu0.grid
    dfw = np.gradient(nu0.values, grid.dw, axis=2)
    weight = 1.0 + np.abs(grid.v_nodes)[None, :, None]
    m1 = float((np.abs(dfw) * weight).sum(axis=(1, 2)).max() * grid.cell_area)
    return float(np.sqrt(max(8.0 * m1, 1.0 / b))), m1


def shear_gamma(a: float, eps: float, theta_values: np.ndarray,
                rho0: np.ndarray) -> np.ndarray:
    """gamma(t, x) = a eps theta(t, x) / rho0(x), the shear that cancels the
    cross term in the marginal equation."""
    return a * eps * theta_values / rho0


def shear_transform(nu: DensityField, gamma: np.ndarray) -> DensityField:
    """g(x, v, w) = nu(x, v, w - gamma(x) v) by linear interpolation in w.
    Measure preserving up to grid truncation (telemetry via mass renorm)."""
    grid = nu.grid
    out = np.empty_like(nu.values)
    w = grid.w_nodes
    for ix in range(nu.space.nx):
        for iv, v in enumerate(grid.v_nodes):
            out[ix, iv] = np.interp(w - gamma[ix] * v, w, nu.values[ix, iv],
                                    left=0.0, right=0.0)
    return nu.with_values(out)


# ---------------------------------------------------------------------------
# Differential-inequality monitor (half-entropy decay along twin trajectories)
# ---------------------------------------------------------------------------


def monitor_rate_bound(
    coef_v: np.ndarray,  # (nv,) integrand coefficient B0(...,-gamma v) + b theta v
    sheared: np.ndarray,  # (nv, nw) sheared field g
    bar_sheared: np.ndarray,  # (nw,) its marginal
    bar_target: np.ndarray,  # (nw,) limit marginal
    lam: float,
    grid: PhaseGrid,
) -> float:
    """R(t) = 1/4 int |int coef g/bar-g dv|^2 bar-g dw
             + lam int |d_w(w bar-target)| + lam |d_w^2 bar-target| dw,
    the rate bound paired with d/dt H_1/2[bar-g | bar-target]."""
    num = (coef_v[:, None] * sheared).sum(axis=0) * grid.dv
    safe = np.maximum(bar_sheared, LOG_FLOOR)
    r1 = 0.25 * float((num**2 / safe).sum() * grid.dw)
    w = grid.w_nodes
    d1 = np.gradient(w * bar_target, grid.dw)
    d2 = np.gradient(np.gradient(bar_target, grid.dw), grid.dw)
    r2 = lam * float((np.abs(d1) + lam * np.abs(d2)).sum() * grid.dw)
    return r1 + r2


# ---------------------------------------------------------------------------
# CSV emission (run_id, t, x, functional_name, value, flags)
# ---------------------------------------------------------------------------


def write_diagnostics_csv(path, rows: list[tuple]) -> None:
    """rows: (run_id, t, x, functional_name, value, flags)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "t", "x", "functional_name", "value", "flags"])
        for run_id, t, x, name, value, flags in rows:
            writer.writerow([run_id, repr(float(t)), repr(float(x)), name,
                             repr(float(value)), flags])
