"""Run-configuration schema: JSON in, validated RunBundle out.

Unknown keys are rejected with their dotted path; defaults are filled and the
effective config is echoed next to the outputs so a run can be reproduced
from its artifacts alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import harness as h
from . import kinetic_solver as kin
from .errors import ConfigError
from .model import (
    AdaptationParams,
    DriftSpec,
    KernelSpec,
    ModelConfig,
    SpatialDensity,
)
from .phase_space import PhaseGrid, SpatialGrid

# (default, description) per dotted key; drives both validation and --help
SCHEMA: dict[str, tuple] = {
    "model.drift_coefficients": ([0.0, 1.0, 0.0, -1.0], "ascending coefficients of the voltage drift polynomial N(v)"),
    "model.growth_exponent_p": (3, "growth exponent p of the confinement bound on N(v)/v"),
    "model.adaptation.a": (1.0, "adaptation coupling a in A(v,w) = a v - b w + c"),
    "model.adaptation.b": (0.5, "adaptation decay b > 0"),
    "model.adaptation.c": (0.0, "adaptation offset c"),
    "model.kernel.kind": ("gaussian", "kernel kind: gaussian | exponential | constant | custom-table"),
    "model.kernel.sigma": (0.2, "gaussian kernel width"),
    "model.kernel.lam": (0.5, "exponential kernel decay length"),
    "model.kernel.value": (1.0, "constant kernel value"),
    "model.kernel.table": (None, "nx-by-nx matrix for kind=custom-table"),
    "model.kernel.mass": (1.0, "per-row kernel mass normalization (null = raw kernel)"),
    "model.kernel.exponent_r": (2.0, "integrability exponent r > 1 of the kernel bound"),
    "model.rho0.kind": ("cosine", "spatial density kind: constant | cosine"),
    "model.rho0.value": (1.0, "constant spatial density value"),
    "model.rho0.base": (1.15, "cosine spatial density base"),
    "model.rho0.amplitude": (0.15, "cosine spatial density amplitude"),
    "model.rho0.m_star": (0.75, "pinching constant: m_star <= rho0 <= 1/m_star"),
    "grids.nx": (8, "spatial nodes on K = [0,1]"),
    "grids.nv": (256, "voltage nodes on [-L_v, L_v]"),
    "grids.nw": (128, "adaptation nodes on [-L_w, L_w]"),
    "grids.L_v": (8.0, "voltage half-width"),
    "grids.L_w": (8.0, "adaptation half-width"),
    "solver.dt": (1e-3, "outer time step"),
    "solver.t_end": (2.0, "simulate-mode end time"),
    "solver.cfl_safety": (0.45, "Courant safety factor of explicit sub-steps, in (0,1)"),
    "solver.mode": ("auto", "auto | direct_kinetic | rescaled_coupled (auto: rescaled below eps=0.05)"),
    "solver.checkpoint_every": (0, "checkpoint period in steps (0 = off)"),
    "weights.kappa": (2.0, "adaptation weight exponent kappa, must exceed 1/(2 b)"),
    "weights.alpha_star": (0.25, "initial-layer decay rate, in (0, 1 - 1/(2 b kappa))"),
    "experiment.epsilon_list": ([0.1, 0.05, 0.025, 0.0125], "strictly decreasing interaction strengths in (0,1]"),
    "experiment.initial_data": ("well_prepared", "well_prepared | ill_prepared_wide | ill_prepared_shifted"),
    "experiment.horizon": (2.0, "sweep horizon T"),
    "experiment.n_sample_times": (40, "number of sample times (geometric near t=0)"),
    "experiment.seed": (1234, "seed of the randomized suites"),
    "experiment.sigma_v": (0.7, "ill-prepared initial voltage spread"),
    "experiment.sigma_w": (0.8, "initial adaptation spread"),
    "experiment.V0_base": (0.3, "initial voltage profile base"),
    "experiment.V0_amplitude": (0.2, "initial voltage profile cosine amplitude"),
    "experiment.W0_base": (0.1, "initial adaptation profile base"),
    "experiment.W0_amplitude": (0.2, "initial adaptation profile sine amplitude"),
    "experiment.shift_v": (0.25, "macro voltage offset of ill_prepared_shifted data"),
    "experiment.shift_w": (-0.15, "macro adaptation offset of ill_prepared_shifted data"),
    "validation.mass_tolerance": (1e-10, "per-node mass-defect tolerance"),
    "validation.centering_tolerance": (1e-6, "rescaled-frame centering tolerance at construction"),
    "validation.inequality_abs_tolerance": (1e-9, "absolute slack of the inequality suites"),
    "validation.inequality_rel_tolerance": (0.02, "relative slack of the inequality suites"),
    "validation.envelope_margin": (1.5, "margin applied to constants fitted on the coarsest epsilon"),
    "validation.monitor_tolerance": (0.1, "relative slack of the half-entropy decay monitor"),
    "validation.n_random_pairs": (1000, "random density pairs per inequality release test"),
    "output.emit_checkpoints": (False, "write density checkpoints during simulate"),
    "output.emit_diagnostics_csv": (True, "write per-functional diagnostics rows during simulate"),
}

# default choices the spec leaves open; echoed in every report
DEFAULT_CHOICES = [
    "adaptation a=1, b=0.5, c=0 (units not fixed by the model; b sized so the",
    "  adaptation marginal stays grid-resolved over the horizon)",
    "kernel Psi = gaussian(sigma=0.2), row-normalized to unit mass",
    "rho0 cosine in [1.0, 1.3] with m_star = 0.75 (kept >= 1 so the",
    "  constant-free Poincare / log-Sobolev forms hold)",
    "kappa = 1/b, alpha_star = (1 - 1/(2 b kappa)) / 2",
]


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; `raw` is the fully-defaulted dict."""

    raw: dict

    def __getitem__(self, dotted: str):
        node = self.raw
        for part in dotted.split("."):
            node = node[part]
        return node

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _set(tree: dict, dotted: str, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _walk(prefix: str, node, flat: dict):
    if isinstance(node, dict):
        for key, val in node.items():
            _walk(f"{prefix}.{key}" if prefix else key, val, flat)
    else:
        flat[prefix] = node


def parse_config_dict(user: dict) -> RunConfig:
    if not isinstance(user, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    flat_user: dict = {}
    _walk("", user, flat_user)
    for key in flat_user:
        if key not in SCHEMA:
            # a custom kernel table is a nested list; _walk flattens dicts only
            raise ConfigError(key, "unknown key")
    tree: dict = {}
    for key, (default, _desc) in SCHEMA.items():
        value = flat_user.get(key, default)
        _validate_value(key, value)
        _set(tree, key, value)
    cfg = RunConfig(raw=tree)
    _cross_validate(cfg)
    return cfg


def _validate_value(key: str, value) -> None:
    default, _ = SCHEMA[key]
    if value is None and default is None:
        return
    if key == "model.kernel.mass" and value is None:
        return
    if key == "model.kernel.table":
        if value is not None and not isinstance(value, list):
            raise ConfigError(key, "must be a matrix (list of lists) or null")
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return


def _cross_validate(cfg: RunConfig) -> None:
    b = cfg["model.adaptation.b"]
    if b <= 0:
        raise ConfigError("model.adaptation.b", "must be positive")
    kappa = cfg["weights.kappa"]
    if kappa <= 1.0 / (2.0 * b):
        raise ConfigError(
            "weights.kappa",
            f"must exceed 1/(2 b) = {1.0 / (2.0 * b):g}, got {kappa:g}",
        )
    alpha = cfg["weights.alpha_star"]
    upper = 1.0 - 1.0 / (2.0 * b * kappa)
    if not (0.0 < alpha < upper):
        raise ConfigError("weights.alpha_star", f"must lie in (0, {upper:g})")
    for key in ("solver.dt", "solver.t_end", "experiment.horizon"):
        if cfg[key] <= 0:
            raise ConfigError(key, "must be positive")
    if not (0.0 < cfg["solver.cfl_safety"] < 1.0):
        raise ConfigError("solver.cfl_safety", "must lie in (0, 1)")
    eps = cfg["experiment.epsilon_list"]
    if not eps or any(not (0 < e <= 1) for e in eps):
        raise ConfigError("experiment.epsilon_list", "entries must lie in (0, 1]")
    if any(e1 <= e2 for e1, e2 in zip(eps, eps[1:])):
        raise ConfigError("experiment.epsilon_list", "must be strictly decreasing")
    kinds = ("well_prepared", "ill_prepared_wide", "ill_prepared_shifted")
    if cfg["experiment.initial_data"] not in kinds:
        raise ConfigError("experiment.initial_data", f"must be one of {kinds}")
    if cfg["model.rho0.kind"] not in ("constant", "cosine"):
        raise ConfigError("model.rho0.kind", "must be constant or cosine")
    if cfg["solver.mode"] not in ("auto", "direct_kinetic", "rescaled_coupled"):
        raise ConfigError("solver.mode", "must be auto, direct_kinetic or rescaled_coupled")


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return parse_config_dict(user)


def build_bundle(cfg: RunConfig) -> h.RunBundle:
    space = SpatialGrid(nx=cfg["grids.nx"])
    grid = PhaseGrid(
        nv=cfg["grids.nv"], nw=cfg["grids.nw"],
        L_v=cfg["grids.L_v"], L_w=cfg["grids.L_w"],
    )
    try:
        drift = DriftSpec(
            coefficients=tuple(float(c) for c in cfg["model.drift_coefficients"]),
            growth_exponent_p=cfg["model.growth_exponent_p"],
        )
    except ValueError as exc:
        raise ConfigError("model.drift_coefficients", str(exc)) from exc
    adaptation = AdaptationParams(
        a=cfg["model.adaptation.a"], b=cfg["model.adaptation.b"], c=cfg["model.adaptation.c"]
    )
    table = cfg["model.kernel.table"]
    kernel = KernelSpec(
        kind=cfg["model.kernel.kind"],
        sigma=cfg["model.kernel.sigma"],
        lam=cfg["model.kernel.lam"],
        value=cfg["model.kernel.value"],
        table=tuple(map(tuple, table)) if table is not None else None,
        mass=cfg["model.kernel.mass"],
        exponent_r=cfg["model.kernel.exponent_r"],
    )
    if cfg["model.rho0.kind"] == "constant":
        rho0 = SpatialDensity.constant(space, cfg["model.rho0.value"], cfg["model.rho0.m_star"])
    else:
        rho0 = SpatialDensity.cosine(
            space, cfg["model.rho0.base"], cfg["model.rho0.amplitude"], cfg["model.rho0.m_star"]
        )
    model = ModelConfig(drift=drift, adaptation=adaptation, kernel=kernel,
                        rho0=rho0, space=space)
    model.check_assumptions(v_max=cfg["grids.L_v"])
    solver = kin.SolverConfig(
        dt=cfg["solver.dt"], t_end=cfg["solver.t_end"],
        cfl_safety=cfg["solver.cfl_safety"], mode=cfg["solver.mode"],
    )
    experiment = h.ExperimentSpec(
        epsilon_list=tuple(cfg["experiment.epsilon_list"]),
        initial_data=cfg["experiment.initial_data"],
        horizon=cfg["experiment.horizon"],
        n_sample_times=cfg["experiment.n_sample_times"],
        seed=cfg["experiment.seed"],
        sigma_v=cfg["experiment.sigma_v"],
        sigma_w=cfg["experiment.sigma_w"],
        V0_base=cfg["experiment.V0_base"],
        V0_amplitude=cfg["experiment.V0_amplitude"],
        W0_base=cfg["experiment.W0_base"],
        W0_amplitude=cfg["experiment.W0_amplitude"],
        shift_v=cfg["experiment.shift_v"],
        shift_w=cfg["experiment.shift_w"],
    )
    validation = h.ValidationSpec(
        mass_tolerance=cfg["validation.mass_tolerance"],
        centering_tolerance=cfg["validation.centering_tolerance"],
        inequality_abs_tolerance=cfg["validation.inequality_abs_tolerance"],
        inequality_rel_tolerance=cfg["validation.inequality_rel_tolerance"],
        envelope_margin=cfg["validation.envelope_margin"],
        monitor_tolerance=cfg["validation.monitor_tolerance"],
        n_random_pairs=cfg["validation.n_random_pairs"],
    )
    return h.RunBundle(
        model=model, grid=grid, space=space, solver=solver,
        experiment=experiment, kappa=cfg["weights.kappa"],
        alpha_star=cfg["weights.alpha_star"], validation=validation,
    )


def help_text() -> str:
    lines = ["configuration keys (JSON, nested by dots shown here):"]
    for key, (default, desc) in SCHEMA.items():
        lines.append(f"  {key:42s} default={json.dumps(default)}  {desc}")
    return "\n".join(lines)
