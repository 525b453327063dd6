"""Solver tests: stencils, initial conditions, stepping, conservation,
configuration, and the snapshot file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavecast import swe
from wavecast.errors import CflError, ConfigError, DomainError, StructuralError
from wavecast.stencils import ddx, ddy

from conftest import centered_bump, small_grid


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

class TestStencils:
    def test_linear_field_exact(self):
        # centered and one-sided second-order stencils are exact on linears
        y, x = np.mgrid[0:8, 0:8]
        f = 2.0 * x + 3.0 * y
        assert np.allclose(ddx(f, 1.0, "onesided"), 2.0, atol=1e-12)
        assert np.allclose(ddy(f, 1.0, "onesided"), 3.0, atol=1e-12)

    def test_quadratic_interior_exact(self):
        y, x = np.mgrid[0:9, 0:9]
        f = x.astype(float) ** 2
        d = ddx(f, 1.0, "onesided")
        assert np.allclose(d, 2.0 * x, atol=1e-12)

    def test_periodic_wraps(self):
        x = np.arange(8.0)
        f = np.sin(2 * np.pi * x / 8.0)[None, :].repeat(3, axis=0)
        d = ddx(f, 1.0, "periodic")
        expect = (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1)) / 2.0
        assert np.allclose(d, expect, atol=1e-14)

    def test_odd_ghost_antisymmetry(self):
        # odd ghosts: derivative at the wall sees -f0, so d = (f1 + f0)/2dx
        f = np.array([[1.0, 2.0, 3.0, 4.0]])
        d = ddx(f, 1.0, "odd")
        assert d[0, 0] == pytest.approx((2.0 + 1.0) / 2.0)
        assert d[0, -1] == pytest.approx((-4.0 - 3.0) / 2.0)

    def test_even_ghost_zero_gradient(self):
        f = np.array([[1.0, 2.0, 3.0, 4.0]])
        d = ddx(f, 1.0, "even")
        assert d[0, 0] == pytest.approx((2.0 - 1.0) / 2.0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            ddx(np.zeros((4, 4)), 1.0, "cubic")


# ---------------------------------------------------------------------------
# gaussian_initial_condition
# ---------------------------------------------------------------------------

class TestInitialCondition:
    def test_peak_at_epicenter_and_rest_velocities(self, ref_grid):
        state = swe.gaussian_initial_condition(ref_grid, 174.0, -21.0, 2.0)
        i0, j0 = ref_grid.lonlat_to_index(174.0, -21.0)
        eta = state.eta(ref_grid)
        assert np.unravel_index(np.argmax(eta), eta.shape) == (i0, j0)
        assert np.all(state.u == 0.0) and np.all(state.v == 0.0)

    def test_zero_magnitude_limit(self, ref_grid):
        state = swe.gaussian_initial_condition(ref_grid, 174.0, -21.0, 1e-12)
        assert np.max(np.abs(state.eta(ref_grid))) < 1e-11

    def test_added_volume_scales_with_magnitude(self, ref_grid):
        rest = ref_grid.rest_thickness().sum() * ref_grid.cell_area
        v1 = swe.total_volume(
            swe.gaussian_initial_condition(ref_grid, 174.0, -21.0, 1.0),
            ref_grid) - rest
        v2 = swe.total_volume(
            swe.gaussian_initial_condition(ref_grid, 174.0, -21.0, 2.0),
            ref_grid) - rest
        assert v2 / v1 == pytest.approx(2.0, rel=1e-9)

    def test_epicenter_outside_grid(self, ref_grid):
        with pytest.raises(DomainError):
            swe.gaussian_initial_condition(ref_grid, 100.0, -21.0, 1.0)

    def test_epicenter_on_land(self):
        grid = small_grid()
        z_b = grid.z_b.copy()
        z_b[8, 8] = 10.0
        land_grid = swe.Grid(nx=grid.nx, ny=grid.ny, dx=grid.dx, dy=grid.dy,
                             z_b=z_b, lon0=grid.lon0, lat0=grid.lat0,
                             dlon=grid.dlon, dlat=grid.dlat)
        lon, lat = land_grid.lonlat_of_index(8, 8)
        with pytest.raises(DomainError):
            swe.gaussian_initial_condition(land_grid, lon, lat, 1.0)


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------

class TestStep:
    def test_rest_state_is_fixed_point(self):
        grid = small_grid()
        h = grid.rest_thickness()
        state = swe.FlowState(h=h, u=np.zeros_like(h), v=np.zeros_like(h))
        out = swe.step(state, grid, dt=1.0)
        assert np.array_equal(out.h, state.h)
        assert np.all(out.u == 0.0) and np.all(out.v == 0.0)

    def test_rest_state_nonflat_bathymetry(self):
        # well-balanced: eta = 0 over variable depth stays at rest
        n = 16
        y, x = np.mgrid[0:n, 0:n]
        z_b = -300.0 - 100.0 * np.sin(2 * np.pi * x / n)
        grid = swe.Grid(nx=n, ny=n, dx=1000.0, dy=1000.0, z_b=z_b)
        h = grid.rest_thickness()
        state = swe.FlowState(h=h, u=np.zeros_like(h), v=np.zeros_like(h))
        for _ in range(100):
            state = swe.step(state, grid, dt=5.0)
        assert np.max(np.abs(state.u)) < 1e-12
        assert np.max(np.abs(state.v)) < 1e-12
        assert np.max(np.abs(state.eta(grid))) < 1e-12

    def test_volume_conserved_100_steps(self):
        grid = small_grid()
        state = centered_bump(grid)
        v0 = swe.total_volume(state, grid)
        for _ in range(100):
            state = swe.step(state, grid, dt=5.0)
        assert abs(swe.total_volume(state, grid) - v0) / v0 < 1e-6

    def test_rotational_symmetry(self):
        grid = small_grid(n=17)  # odd so the bump center is a cell center
        state = centered_bump(grid)
        for _ in range(20):
            state = swe.step(state, grid, dt=5.0)
        eta = state.eta(grid)
        assert np.max(np.abs(eta - np.rot90(eta))) < 1e-10

    def test_cfl_violation_rejected(self):
        grid = small_grid()
        state = centered_bump(grid)
        with pytest.raises(CflError):
            swe.step(state, grid, dt=1e4)

    def test_unknown_boundary_mode(self):
        grid = small_grid()
        state = centered_bump(grid)
        with pytest.raises(ConfigError):
            swe.step(state, grid, dt=1.0, bc="absorbing")

    def test_drag_decays_momentum(self):
        n = 16
        grid = swe.Grid(nx=n, ny=n, dx=1000.0, dy=1000.0,
                        z_b=np.full((n, n), -400.0), c_d=0.01)
        h = grid.rest_thickness()
        state = swe.FlowState(h=h, u=np.full_like(h, 0.5),
                              v=np.zeros_like(h))
        out = state
        for _ in range(10):
            out = swe.step(out, grid, dt=5.0, bc="periodic")
        assert np.max(np.abs(out.u)) < 0.5

    @given(dt=st.floats(min_value=0.5, max_value=5.0))
    @settings(max_examples=10, deadline=None)
    def test_volume_conserved_any_dt(self, dt):
        grid = small_grid()
        state = centered_bump(grid)
        v0 = swe.total_volume(state, grid)
        for _ in range(5):
            state = swe.step(state, grid, dt=dt)
        assert abs(swe.total_volume(state, grid) - v0) / v0 < 1e-12


# ---------------------------------------------------------------------------
# run_simulation and SimConfig
# ---------------------------------------------------------------------------

class TestRunSimulation:
    def test_frame_count_near_200(self, ref_snapshots):
        assert 150 <= ref_snapshots.n_t <= 250

    def test_zero_duration(self, ref_config):
        cfg = swe.SimConfig(duration=0.0)
        snaps = swe.run_simulation(cfg)
        assert snaps.n_t == 1

    def test_duration_cadence_mismatch(self):
        with pytest.raises(ConfigError):
            swe.run_simulation(swe.SimConfig(duration=100.0, cadence=36.0))

    def test_deterministic_reruns_byte_identical(self, tmp_path):
        cfg = swe.SimConfig(duration=360.0)
        a, b = tmp_path / "a.snap", tmp_path / "b.snap"
        swe.save_snapshots(swe.run_simulation(cfg), a)
        swe.save_snapshots(swe.run_simulation(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_config_roundtrip(self):
        cfg = swe.SimConfig(nx=32, ic_mag=3.0, f_mode="latitude",
                            boundaries="periodic")
        assert swe.SimConfig.from_ini(cfg.to_ini()) == cfg

    def test_bad_config_value(self):
        with pytest.raises(ConfigError):
            swe.SimConfig.from_ini("[grid]\nnx = many\n")

    def test_wave_speed_matches_shallow_water_theory(self):
        # front arrival time at a probe vs sqrt(g H)
        n = 128
        depth = 400.0
        grid = swe.Grid(nx=n, ny=n, dx=500.0, dy=500.0,
                        z_b=np.full((n, n), -depth))
        state = centered_bump(grid, amp=0.01, sigma_cells=3.0)
        c_theory = np.sqrt(grid.g * depth)
        probe = (n // 2, n - 10)  # same row, 54 cells right of center
        dist = (probe[1] - (n - 1) / 2.0) * grid.dx
        dt = 2.0
        trace = []
        for _ in range(260):  # stop before wall reflections reach the probe
            state = swe.step(state, grid, dt)
            trace.append(state.eta(grid)[probe])
        t_peak = (int(np.argmax(trace)) + 1) * dt
        c_measured = dist / t_peak
        assert abs(c_measured - c_theory) / c_theory < 0.05


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

class TestSnapshotFormat:
    def test_roundtrip(self, tmp_path):
        cfg = swe.SimConfig(duration=360.0)
        snaps = swe.run_simulation(cfg)
        path = tmp_path / "run.snap"
        swe.save_snapshots(snaps, path)
        back = swe.load_snapshots(path)
        assert back.n_t == snaps.n_t
        for a, b in zip(snaps.states, back.states):
            assert np.array_equal(a.h, b.h)
            assert np.array_equal(a.u, b.u)
            assert np.array_equal(a.v, b.v)

    def test_header_layout(self, tmp_path):
        cfg = swe.SimConfig(duration=72.0)
        snaps = swe.run_simulation(cfg)
        path = tmp_path / "run.snap"
        swe.save_snapshots(snaps, path)
        raw = path.read_bytes()
        assert raw[:7] == b"RPSNAP1"
        import struct
        nx, ny, n_t, nf = struct.unpack_from("<4I", raw, 7)
        assert (nx, ny, n_t, nf) == (cfg.nx, cfg.ny, snaps.n_t, 3)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.snap"
        path.write_bytes(b"NOTSNAP" + b"\x00" * 64)
        with pytest.raises(StructuralError):
            swe.load_snapshots(path)

    def test_grid_mismatch_rejected(self, tmp_path):
        cfg = swe.SimConfig(duration=72.0)
        snaps = swe.run_simulation(cfg)
        path = tmp_path / "run.snap"
        swe.save_snapshots(snaps, path)
        with pytest.raises(StructuralError):
            swe.load_snapshots(path, grid=small_grid())
