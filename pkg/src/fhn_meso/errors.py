"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation received a state that breaks a documented invariant
    (unnormalized density, inconsistent grids, ...)."""


class CFLViolation(RuntimeError):
    """An explicit transport step was asked to run past its CFL bound.

    Carries the largest admissible step so callers can subdivide.
    """

    def __init__(self, dt: float, required_dt: float):
        self.dt = dt
        self.required_dt = required_dt
        super().__init__(
            f"CFL violation: dt={dt:.3e} exceeds admissible {required_dt:.3e}"
        )


class ConfigError(ValueError):
    """Run-config schema violation; `field` is the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
