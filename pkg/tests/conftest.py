import numpy as np
import pytest

from fhn_meso import model as mdl
from fhn_meso import phase_space as ps


@pytest.fixture
def space4():
    return ps.SpatialGrid(nx=4)


@pytest.fixture
def grid_small():
    return ps.PhaseGrid(nv=96, nw=80, L_v=8.0, L_w=8.0)


@pytest.fixture
def default_model(space4):
    return mdl.ModelConfig(
        drift=mdl.DriftSpec(),
        adaptation=mdl.AdaptationParams(a=1.0, b=0.5, c=0.0),
        kernel=mdl.KernelSpec(),
        rho0=mdl.SpatialDensity.constant(space4, 1.0),
        space=space4,
    )


def gaussian_field(grid, space, sv=1.0, sw=1.0, cv=0.0, cw=0.0):
    gv = np.exp(-0.5 * ((grid.v_nodes - cv) / sv) ** 2)
    gw = np.exp(-0.5 * ((grid.w_nodes - cw) / sw) ** 2)
    vals = np.broadcast_to(gv[:, None] * gw[None, :], (space.nx, grid.nv, grid.nw)).copy()
    return ps.DensityField(values=vals, grid=grid, space=space).normalized()


def random_field(grid, space, rng, n_bumps=3):
    vals = np.zeros((space.nx, grid.nv, grid.nw))
    v, w = np.meshgrid(grid.v_nodes, grid.w_nodes, indexing="ij")
    for ix in range(space.nx):
        for _ in range(n_bumps):
            cv = rng.uniform(-2.5, 2.5)
            cw = rng.uniform(-2.5, 2.5)
            sv = rng.uniform(0.5, 1.5)
            sw = rng.uniform(0.5, 1.5)
            vals[ix] += rng.uniform(0.3, 1.0) * np.exp(
                -0.5 * ((v - cv) / sv) ** 2 - 0.5 * ((w - cw) / sw) ** 2
            )
    return ps.DensityField(values=vals, grid=grid, space=space).normalized()
