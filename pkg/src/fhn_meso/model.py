"""Model coefficients of the network: confining drift N, linear adaptation A,
long-range kernel Psi, spatial density rho0, and the nonlocal couplings they
induce. All evaluations are pure functions of immutable configuration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .phase_space import DensityField, SpatialGrid, macro_moments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DriftSpec:
    """Polynomial voltage drift N(v), ascending coefficients.

    The leading coefficient must be strictly negative with odd degree >= 3 so
    that omega(v) = N(v)/v -> -inf as |v| -> inf (confinement). The default is
    the cubic N(v) = v - v^3.
    """

    coefficients: tuple[float, ...] = (0.0, 1.0, 0.0, -1.0)
    growth_exponent_p: int = 3

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.size < 4:
            raise ValueError("drift polynomial must have degree >= 3")
        deg = coeffs.size - 1
        if deg % 2 == 0 or coeffs[-1] >= 0:
            raise ValueError(
                "confinement requires odd degree >= 3 with a strictly negative "
                "leading coefficient"
            )
        if self.growth_exponent_p < 2:
            raise ValueError("growth exponent p must be an integer >= 2")

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, v):
        return eval_drift(self, v)

    def derivative(self, v):
        coeffs = np.asarray(self.coefficients)
        dcoeffs = coeffs[1:] * np.arange(1, coeffs.size)
        return np.polynomial.polynomial.polyval(np.asarray(v, dtype=float), dcoeffs)

    def omega(self, v):
        """omega(v) = N(v)/v, the confinement ratio (v != 0)."""
        v = np.asarray(v, dtype=float)
        return eval_drift(self, v) / v


def eval_drift(spec: DriftSpec, v):
    """Horner evaluation of N(v)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("drift input must be finite")
    acc = np.zeros_like(v)
    for c in reversed(spec.coefficients):
        acc = acc * v + c
    return float(acc) if acc.ndim == 0 else acc


@dataclass(frozen=True)
class AdaptationParams:
    """A(v, w) = a v - b w + c; b > 0 is required by the e^{bt} transport
    scaling of the adaptation marginal."""

    a: float = 1.0
    b: float = 1.0
    c: float = 0.0

    def __post_init__(self):
        if self.b <= 0:
            raise ValueError("adaptation needs b > 0")


def eval_adaptation(params: AdaptationParams, v, w):
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise ValueError("adaptation inputs must be finite")
    out = params.a * v - params.b * w + params.c
    return float(out) if out.ndim == 0 else out


def eval_adaptation_linear(params: AdaptationParams, v, w):
    """A0(v, w) = A(v, w) - A(0, 0) = a v - b w."""
    out = params.a * np.asarray(v, float) - params.b * np.asarray(w, float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelSpec:
    """Long-range interaction kernel Psi(x, x') on K x K.

    kinds: gaussian(sigma), exponential(lam), constant(value),
    custom-table (explicit matrix). `mass`, when set, rescales each row so
    that int Psi(x, x') dx' = mass. exponent_r > 1 is the integrability
    exponent of the stored kernel bound (conjugate-style factor
    r' = (r-1)/r kept for bookkeeping).
    """

    kind: str = "gaussian"
    sigma: float = 0.2
    lam: float = 0.5
    value: float = 1.0
    table: tuple | None = None
    mass: float | None = 1.0
    exponent_r: float = 2.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "exponential", "constant", "custom-table"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.exponent_r <= 1:
            raise ValueError("kernel exponent r must exceed 1")
        if self.kind == "custom-table" and self.table is None:
            raise ValueError("custom-table kernel needs a table")

    @property
    def r_conj(self) -> float:
        return (self.exponent_r - 1.0) / self.exponent_r

    def matrix(self, space: SpatialGrid) -> np.ndarray:
        x = space.x_nodes
        dist = np.abs(x[:, None] - x[None, :])
        if self.kind == "gaussian":
            mat = np.exp(-0.5 * (dist / self.sigma) ** 2)
        elif self.kind == "exponential":
            mat = np.exp(-dist / self.lam)
        elif self.kind == "constant":
            mat = np.full((space.nx, space.nx), self.value)
        else:
            mat = np.asarray(self.table, dtype=float)
            if mat.shape != (space.nx, space.nx):
                raise ValueError(
                    f"kernel table shape {mat.shape} does not match nx={space.nx}"
                )
        if not np.all(np.isfinite(mat)):
            raise ValueError("kernel matrix has non-finite entries")
        if self.mass is not None and self.kind != "custom-table":
            row = mat @ space.weights
            safe = np.where(np.abs(row) > 0, row, 1.0)
            mat = mat * (self.mass / safe)[:, None]
        return mat


@dataclass(frozen=True)
class SpatialDensity:
    """rho0(x), the neuron density over K, pinched in [m_star, 1/m_star]."""

    values: np.ndarray
    m_star: float = 0.75

    def __post_init__(self):
        if not (0 < self.m_star <= 1):
            raise ValueError("m_star must lie in (0, 1]")
        v = np.asarray(self.values, dtype=float)
        if np.any(v < self.m_star - 1e-12) or np.any(v > 1.0 / self.m_star + 1e-12):
            raise ValueError("rho0 escapes [m_star, 1/m_star]")

    @staticmethod
    def constant(space: SpatialGrid, value: float = 1.0, m_star: float = 0.75):
        return SpatialDensity(values=np.full(space.nx, value), m_star=m_star)

    @staticmethod
    def cosine(space: SpatialGrid, base: float = 1.15, amplitude: float = 0.15,
               m_star: float = 0.75):
        vals = base + amplitude * np.cos(2.0 * np.pi * space.x_nodes)
        vals = np.clip(vals, m_star, 1.0 / m_star)
        return SpatialDensity(values=vals, m_star=m_star)


@dataclass(frozen=True)
class ModelConfig:
    """Frozen bundle of all coefficients plus the discretized kernel."""

    drift: DriftSpec
    adaptation: AdaptationParams
    kernel: KernelSpec
    rho0: SpatialDensity
    space: SpatialGrid
    psi_matrix: np.ndarray = field(init=False)
    kernel_bound: float = field(init=False)
    kernel_row_l1: float = field(init=False)

    def __post_init__(self):
        mat = self.kernel.matrix(self.space)
        wx = self.space.weights
        r = self.kernel.exponent_r
        bound = (np.abs(mat.T) @ wx + np.abs(mat) ** r @ wx).max()
        object.__setattr__(self, "psi_matrix", mat)
        object.__setattr__(self, "kernel_bound", float(bound))
        object.__setattr__(self, "kernel_row_l1", float((np.abs(mat) @ wx).max()))

    @property
    def psi_conv_rho0(self) -> np.ndarray:
        return conv_right(self, self.rho0.values)

    def check_assumptions(self, v_max: float = 8.0, n: int = 2001) -> dict:
        """Numeric confinement / integrability checks on [-v_max, v_max],
        logged at configuration time. Returns the evaluated bounds."""
        v = np.linspace(1.0, v_max, n)
        omega = self.drift.omega(np.concatenate([-v[::-1], v]))
        growth = np.abs(self.drift.omega(v)) / v ** (self.drift.growth_exponent_p - 1)
        # sup over |v| >= 1 of v^2 omega(v) - C0 N'(v), for a few C0 > 0
        vv = np.concatenate([-v[::-1], v])
        conf = {
            c0: float(np.max(vv**2 * self.drift.omega(vv) - c0 * self.drift.derivative(vv)))
            for c0 in (1.0, 10.0)
        }
        report = {
            "omega_sup": float(omega.max()),
            "omega_at_1": float(self.drift.omega(1.0)),
            "growth_ratio_sup": float(growth.max()),
            "confinement_sup": conf,
            "kernel_bound": self.kernel_bound,
            "kernel_row_l1": self.kernel_row_l1,
            "rho0_min": float(np.min(self.rho0.values)),
            "rho0_max": float(np.max(self.rho0.values)),
        }
        finite = all(
            np.isfinite(val)
            for val in [report["omega_sup"], report["growth_ratio_sup"], self.kernel_bound]
        )
        if not finite:
            raise ValueError("model assumption check produced non-finite bounds")
        log.info("model assumption checks: %s", report)
        return report


def conv_right(model: ModelConfig, g: np.ndarray) -> np.ndarray:
    """(Psi *_r g)(x) = int_K Psi(x, x') g(x') dx' by trapezoidal quadrature."""
    g = np.asarray(g, dtype=float)
    if g.shape != (model.space.nx,):
        raise ValueError(f"grid function shape {g.shape} != ({model.space.nx},)")
    return model.psi_matrix @ (model.space.weights * g)


def nonlocal_operator_L(model: ModelConfig, V: np.ndarray) -> np.ndarray:
    """L_rho0[V] = V (Psi *_r rho0) - Psi *_r (rho0 V)."""
    V = np.asarray(V, dtype=float)
    rho = model.rho0.values
    return V * conv_right(model, rho) - conv_right(model, rho * V)


def nonlocal_interaction(model: ModelConfig, mu: DensityField, ix: int, v: float) -> float:
    """K_Psi[rho0 mu](x_i, v) = v (Psi *_r rho0)(x_i) - (Psi *_r rho0 V)(x_i),
    the moment reduction of the double integral against (v - v')."""
    mu.validate()
    V = macro_moments(mu).V
    rho = model.rho0.values
    return float(
        v * conv_right(model, rho)[ix] - conv_right(model, rho * V)[ix]
    )


def nonlocal_interaction_field(model: ModelConfig, V: np.ndarray) -> np.ndarray:
    """K_Psi as a per-node affine map of v: returns (slope, offset) arrays so
    K(x, v) = slope(x) * v + offset(x)."""
    rho = model.rho0.values
    return conv_right(model, rho), -conv_right(model, rho * V)


def nonlinearity_error(model: ModelConfig, mu_slice: np.ndarray,
                       v_nodes: np.ndarray, cell_area: float) -> float:
    """E(mu) = int N(v) mu du - N(V) on a single (v, w) slice."""
    mass = mu_slice.sum() * cell_area
    if mass <= 0:
        raise ValueError("zero-mass slice")
    dens = mu_slice / mass
    V = float((dens.sum(axis=1) * v_nodes).sum() * cell_area)
    mean_N = float((dens.sum(axis=1) * eval_drift(model.drift, v_nodes)).sum() * cell_area)
    return mean_N - eval_drift(model.drift, V)


def nonlinearity_error_rescaled(
    model: ModelConfig,
    nu_values: np.ndarray,  # (nx, nv, nw)
    v_nodes: np.ndarray,
    cell_area: float,
    V: np.ndarray,
    theta_values: np.ndarray,
) -> np.ndarray:
    """E(mu^eps) per node, evaluated in the rescaled frame:
    E = int [N(V + theta v) - N(V)] nu du (exact change of variables)."""
    v_marg = nu_values.sum(axis=2) * cell_area  # (nx, nv)
    shifted = eval_drift(model.drift, V[:, None] + theta_values[:, None] * v_nodes[None, :])
    base = eval_drift(model.drift, V)
    return (v_marg * (shifted - base[:, None])).sum(axis=1)
