"""Shared fixtures: one desk-scale reference run reused across the suite."""

import numpy as np
import pytest

from wavecast import galerkin, pod, swe


@pytest.fixture(scope="session")
def ref_config():
    return swe.SimConfig()


@pytest.fixture(scope="session")
def ref_grid(ref_config):
    return ref_config.build_grid()


@pytest.fixture(scope="session")
def ref_snapshots(ref_config, ref_grid):
    return swe.run_simulation(ref_config, grid=ref_grid)


@pytest.fixture(scope="session")
def ref_matrix(ref_snapshots):
    return pod.assemble(ref_snapshots)


@pytest.fixture(scope="session")
def ref_basis(ref_matrix):
    return pod.decompose(ref_matrix)


@pytest.fixture(scope="session")
def ref_trunc(ref_basis):
    return pod.truncate(ref_basis)


@pytest.fixture(scope="session")
def ref_ops(ref_trunc, ref_grid):
    return galerkin.assemble_operators(ref_trunc, ref_grid)


@pytest.fixture(scope="session")
def ref_prescaled(ref_ops):
    return galerkin.prescale(ref_ops)


def small_grid(n=16, depth=400.0, f=0.0):
    """Square planar test grid with flat bathymetry."""
    z_b = np.full((n, n), -depth)
    return swe.Grid(nx=n, ny=n, dx=1000.0, dy=1000.0, z_b=z_b, f=f,
                    lon0=0.0, lat0=0.0, dlon=1000.0 / swe.M_PER_DEG,
                    dlat=1000.0 / swe.M_PER_DEG)


def centered_bump(grid, amp=1.0, sigma_cells=2.0):
    """Gaussian surface bump centered on the grid."""
    ic = np.arange(grid.ny) - (grid.ny - 1) / 2.0
    jc = np.arange(grid.nx) - (grid.nx - 1) / 2.0
    r2 = (ic[:, None] * grid.dy) ** 2 + (jc[None, :] * grid.dx) ** 2
    sigma = sigma_cells * min(grid.dx, grid.dy)
    bump = amp * np.exp(-r2 / (2.0 * sigma**2))
    h = grid.rest_thickness() + bump
    zeros = np.zeros_like(h)
    return swe.FlowState(h=h, u=zeros, v=zeros.copy(), t=0.0)
