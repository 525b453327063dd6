"""Desk-scale shallow-water solver on a structured lat-lon grid.

State variables are the water thickness h and depth-averaged velocities
(u, v) on cell centers.  The surface anomaly is eta = h + z_b with the
bathymetry z_b negative below the rest surface.  Time stepping is classical
RK4 with centered spatial differences; the continuity equation is advanced
in flux form with antisymmetric wall fluxes so a closed basin conserves
volume to round-off.
"""

from __future__ import annotations

import configparser
import io as _io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CflError, ConfigError, DomainError, NumericalError, StructuralError
from .stencils import ddx, ddy

M_PER_DEG = 111_320.0
EARTH_OMEGA = 7.2921e-5
SNAP_MAGIC = b"RPSNAP1"


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    z_b: np.ndarray
    f: np.ndarray | float = 0.0
    g: float = 9.81
    c_d: float = 0.0
    lon0: float = 0.0  # lon of cell (j=0) center, degrees
    lat0: float = 0.0  # lat of cell (i=0) center, degrees
    dlon: float = 0.0  # degrees per cell; 0 means purely planar grid
    dlat: float = 0.0

    def __post_init__(self):
        if self.dx <= 0 or self.dy <= 0:
            raise ConfigError("cell spacings must be positive")
        if self.nx < 8 or self.ny < 8:
            raise ConfigError("grid must be at least 8x8 cells")
        if self.z_b.shape != (self.ny, self.nx):
            raise StructuralError(f"bathymetry shape {self.z_b.shape} != (ny, nx)")
        if not np.all(np.isfinite(self.z_b)):
            raise ConfigError("bathymetry contains non-finite values")
        if self.c_d < 0:
            raise ConfigError("drag coefficient must be nonnegative")

    @property
    def land(self) -> np.ndarray:
        return self.z_b >= 0.0

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def lonlat_to_index(self, lon: float, lat: float) -> tuple[int, int]:
        """Nearest cell (i_row, j_col) for a geographic point."""
        if self.dlon == 0.0 or self.dlat == 0.0:
            raise DomainError("grid carries no geographic coordinates")
        j = round((lon - self.lon0) / self.dlon)
        i = round((lat - self.lat0) / self.dlat)
        if not (0 <= i < self.ny and 0 <= j < self.nx):
            raise DomainError(f"point ({lon}, {lat}) outside grid")
        return int(i), int(j)

    def lonlat_of_index(self, i: int, j: int) -> tuple[float, float]:
        return self.lon0 + j * self.dlon, self.lat0 + i * self.dlat

    def rest_thickness(self) -> np.ndarray:
        """Thickness of the ocean at rest (eta = 0); zero on land."""
        return np.where(self.land, 0.0, -self.z_b)


@dataclass(frozen=True)
class FlowState:
    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def eta(self, grid: Grid) -> np.ndarray:
        return np.where(grid.land, 0.0, self.h + grid.z_b)


@dataclass(frozen=True)
class SnapshotSet:
    grid: Grid
    times: np.ndarray
    states: tuple[FlowState, ...]

    def __post_init__(self):
        if len(self.states) != len(self.times):
            raise StructuralError("times/states length mismatch")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise StructuralError("snapshot times must be strictly increasing")
        shape = (self.grid.ny, self.grid.nx)
        for s in self.states:
            if s.h.shape != shape or s.u.shape != shape or s.v.shape != shape:
                raise StructuralError("snapshot frame does not match the grid")

    @property
    def n_t(self) -> int:
        return len(self.times)


def gaussian_initial_condition(
    grid: Grid,
    lon0: float,
    lat0: float,
    mag: float,
    sigma_deg: float = 0.5,
    amp0: float = 0.5,
) -> FlowState:
    """Rest ocean with a Gaussian volume of water lifted above the surface.

    The bump peaks at the epicenter with height mag * amp0 (meters) and
    standard deviation sigma_deg (degrees, converted to meters).
    """
    if mag <= 0:
        raise DomainError("magnitude scaling factor must be positive")
    i0, j0 = grid.lonlat_to_index(lon0, lat0)
    if grid.land[i0, j0]:
        raise DomainError("epicenter lies on land")
    xs = (np.arange(grid.nx) - j0) * grid.dx
    ys = (np.arange(grid.ny) - i0) * grid.dy
    r2 = xs[None, :] ** 2 + ys[:, None] ** 2
    sigma_m = sigma_deg * M_PER_DEG
    bump = mag * amp0 * np.exp(-r2 / (2.0 * sigma_m**2))
    h = grid.rest_thickness() + np.where(grid.land, 0.0, bump)
    zeros = np.zeros_like(h)
    return FlowState(h=h, u=zeros, v=zeros.copy(), t=0.0)


_BC_TABLE = {
    # mode -> (flux_x, flux_y, u_x, u_y, v_x, v_y, scalar)
    "reflective": ("odd", "odd", "odd", "even", "even", "odd", "even"),
    "outflow": ("even",) * 7,
    "periodic": ("periodic",) * 7,
}


def _tendencies(h, u, v, grid: Grid, bc: str):
    fx, fy, ux, uy, vx, vy, sc = _BC_TABLE[bc]
    dx, dy = grid.dx, grid.dy
    eta = h + grid.z_b
    dh = -(ddx(u * h, dx, fx) + ddy(v * h, dy, fy))
    du = -(u * ddx(u, dx, ux) + v * ddy(u, dy, uy)) + grid.f * v - grid.g * ddx(eta, dx, sc)
    dv = -(u * ddx(v, dx, vx) + v * ddy(v, dy, vy)) - grid.f * u - grid.g * ddy(eta, dy, sc)
    if grid.c_d > 0.0:
        speed = np.sqrt(u * u + v * v)
        hf = np.maximum(h, 1e-3)
        du = du - grid.c_d * speed * u / hf
        dv = dv - grid.c_d * speed * v / hf
    if grid.land.any():
        wet = ~grid.land
        dh, du, dv = dh * wet, du * wet, dv * wet
    return dh, du, dv


def cfl_limit(grid: Grid, h_max: float, cfl: float) -> float:
    return cfl * min(grid.dx, grid.dy) / np.sqrt(grid.g * max(h_max, 1e-12))


def step(
    state: FlowState,
    grid: Grid,
    dt: float,
    bc: str = "reflective",
    cfl: float = 0.9,
    h_min: float = 1e-4,
) -> FlowState:
    """Advance one RK4 step; raises CflError / NumericalError on failure."""
    if bc not in _BC_TABLE:
        raise ConfigError(f"unknown boundary mode {bc!r}")
    h_max = float(np.max(state.h))
    limit = cfl_limit(grid, h_max, cfl)
    if dt > limit:
        raise CflError(f"dt={dt:g}s exceeds CFL bound {limit:g}s (h_max={h_max:g} m)")

    def rhs(y):
        return _tendencies(y[0], y[1], y[2], grid, bc)

    y0 = (state.h, state.u, state.v)
    k1 = rhs(y0)
    k2 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y0, k1)))
    k3 = rhs(tuple(a + 0.5 * dt * b for a, b in zip(y0, k2)))
    k4 = rhs(tuple(a + dt * b for a, b in zip(y0, k3)))
    h, u, v = (
        a + dt / 6.0 * (p + 2.0 * q + 2.0 * r + s)
        for a, p, q, r, s in zip(y0, k1, k2, k3, k4)
    )
    dry = h < h_min
    if dry.any():
        u = np.where(dry, 0.0, u)
        v = np.where(dry, 0.0, v)
    t_new = state.t + dt
    for name, fld in (("h", h), ("u", u), ("v", v)):
        if not np.all(np.isfinite(fld)):
            raise NumericalError(f"non-finite {name} at t={t_new:g}s")
    return FlowState(h=h, u=u, v=v, t=t_new)


@dataclass(frozen=True)
class SimConfig:
    nx: int = 64
    ny: int = 64
    lon_min: float = 168.0
    lon_max: float = 180.0
    lat_min: float = -27.0
    lat_max: float = -15.0
    depth: float = 4000.0
    ic_lon: float = 174.0
    ic_lat: float = -21.0
    ic_mag: float = 2.0
    ic_sigma: float = 0.75
    ic_amp0: float = 0.5
    g: float = 9.81
    f_mode: str = "constant"  # none | constant | latitude
    f_value: float = 0.0
    c_d: float = 0.0
    duration: float = 7200.0
    cadence: float = 36.0
    cfl: float = 0.7
    boundaries: str = "reflective"

    @staticmethod
    def from_ini(text: str) -> "SimConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        kw = {}
        mapping = {
            "grid": {
                "nx": int, "ny": int, "lon_min": float, "lon_max": float,
                "lat_min": float, "lat_max": float, "depth": float,
            },
            "ic": {"lon0": float, "lat0": float, "mag": float,
                   "sigma": float, "amp0": float},
            "physics": {"g": float, "f_mode": str, "f_value": float, "c_d": float},
            "run": {"duration": float, "cadence": float, "cfl": float},
            "boundaries": {"mode": str},
        }
        rename = {"lon0": "ic_lon", "lat0": "ic_lat", "mag": "ic_mag",
                  "sigma": "ic_sigma", "amp0": "ic_amp0", "mode": "boundaries"}
        for section, keys in mapping.items():
            if not cp.has_section(section):
                continue
            for key, conv in keys.items():
                if cp.has_option(section, key):
                    try:
                        kw[rename.get(key, key)] = conv(cp.get(section, key))
                    except ValueError as exc:
                        raise ConfigError(f"[{section}] {key}: {exc}") from exc
        return SimConfig(**kw)

    def to_ini(self) -> str:
        return (
            "[grid]\n"
            f"nx = {self.nx}\nny = {self.ny}\n"
            f"lon_min = {self.lon_min}\nlon_max = {self.lon_max}\n"
            f"lat_min = {self.lat_min}\nlat_max = {self.lat_max}\n"
            f"depth = {self.depth}\n\n"
            "[ic]\n"
            f"lon0 = {self.ic_lon}\nlat0 = {self.ic_lat}\nmag = {self.ic_mag}\n"
            f"sigma = {self.ic_sigma}\namp0 = {self.ic_amp0}\n\n"
            "[physics]\n"
            f"g = {self.g}\nf_mode = {self.f_mode}\nf_value = {self.f_value}\n"
            f"c_d = {self.c_d}\n\n"
            "[run]\n"
            f"duration = {self.duration}\ncadence = {self.cadence}\ncfl = {self.cfl}\n\n"
            "[boundaries]\n"
            f"mode = {self.boundaries}\n"
        )

    def build_grid(self) -> Grid:
        dlon = (self.lon_max - self.lon_min) / self.nx
        dlat = (self.lat_max - self.lat_min) / self.ny
        if dlon <= 0 or dlat <= 0:
            raise ConfigError("grid extents must be positive")
        lat_mid = 0.5 * (self.lat_min + self.lat_max)
        dx = dlon * M_PER_DEG * np.cos(np.deg2rad(lat_mid))
        dy = dlat * M_PER_DEG
        z_b = np.full((self.ny, self.nx), -abs(self.depth))
        if self.f_mode == "none":
            f = 0.0
        elif self.f_mode == "constant":
            f = self.f_value if self.f_value else 2.0 * EARTH_OMEGA * np.sin(np.deg2rad(lat_mid))
        elif self.f_mode == "latitude":
            lats = self.lat_min + (np.arange(self.ny) + 0.5) * dlat
            f = np.broadcast_to(
                2.0 * EARTH_OMEGA * np.sin(np.deg2rad(lats))[:, None],
                (self.ny, self.nx),
            ).copy()
        else:
            raise ConfigError(f"unknown f_mode {self.f_mode!r}")
        return Grid(
            nx=self.nx, ny=self.ny, dx=float(dx), dy=float(dy), z_b=z_b,
            f=f, g=self.g, c_d=self.c_d,
            lon0=self.lon_min + 0.5 * dlon, lat0=self.lat_min + 0.5 * dlat,
            dlon=dlon, dlat=dlat,
        )


def run_simulation(
    config: SimConfig,
    grid: Grid | None = None,
    ic: FlowState | None = None,
) -> SnapshotSet:
    """Run the solver and record snapshots at the configured cadence.

    Deterministic: there is no randomness anywhere in the solver.
    """
    if config.duration < 0 or config.cadence <= 0:
        raise ConfigError("duration must be >= 0 and cadence > 0")
    grid = grid if grid is not None else config.build_grid()
    state = ic if ic is not None else gaussian_initial_condition(
        grid, config.ic_lon, config.ic_lat, config.ic_mag,
        sigma_deg=config.ic_sigma, amp0=config.ic_amp0,
    )
    n_frames = round(config.duration / config.cadence)
    if abs(n_frames * config.cadence - config.duration) > 1e-9 * max(config.duration, 1.0):
        raise ConfigError("duration must be an integer multiple of the cadence")
    frames = [state]
    times = [state.t]
    if n_frames:
        dt_max = cfl_limit(grid, float(np.max(state.h)), config.cfl)
        sub = max(1, int(np.ceil(config.cadence / dt_max)))
        dt = config.cadence / sub
        for _ in range(n_frames):
            for _ in range(sub):
                state = step(state, grid, dt, bc=config.boundaries, cfl=config.cfl)
            frames.append(state)
            times.append(state.t)
    return SnapshotSet(grid=grid, times=np.asarray(times), states=tuple(frames))


# ---------------------------------------------------------------------------
# Snapshot file format: little-endian, magic "RPSNAP1",
# u32 nx ny n_t n_fields(=3), f64 dx dy g, z_b row-major,
# then per frame: f64 time, h, u, v row-major.
# ---------------------------------------------------------------------------

def save_snapshots(snapshots: SnapshotSet, path) -> None:
    g = snapshots.grid
    buf = _io.BytesIO()
    buf.write(SNAP_MAGIC)
    buf.write(struct.pack("<4I", g.nx, g.ny, snapshots.n_t, 3))
    buf.write(struct.pack("<3d", g.dx, g.dy, g.g))
    buf.write(np.ascontiguousarray(g.z_b, dtype="<f8").tobytes())
    for t, s in zip(snapshots.times, snapshots.states):
        buf.write(struct.pack("<d", float(t)))
        for fld in (s.h, s.u, s.v):
            buf.write(np.ascontiguousarray(fld, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_snapshots(path, grid: Grid | None = None) -> SnapshotSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(SNAP_MAGIC)] != SNAP_MAGIC:
        raise StructuralError(f"{path}: not a snapshot file")
    off = len(SNAP_MAGIC)
    nx, ny, n_t, n_fields = struct.unpack_from("<4I", raw, off)
    off += 16
    if n_fields != 3:
        raise StructuralError(f"{path}: expected 3 fields, got {n_fields}")
    dx, dy, g = struct.unpack_from("<3d", raw, off)
    off += 24
    cells = ny * nx

    def read_field():
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=cells, offset=off).reshape(ny, nx)
        off += cells * 8
        return arr.copy()

    z_b = read_field()
    if grid is None:
        grid = Grid(nx=nx, ny=ny, dx=dx, dy=dy, z_b=z_b, g=g)
    else:
        if (grid.nx, grid.ny) != (nx, ny) or not np.allclose(grid.z_b, z_b):
            raise StructuralError(f"{path}: grid does not match the supplied grid")
    times, states = [], []
    for _ in range(n_t):
        (t,) = struct.unpack_from("<d", raw, off)
        off += 8
        h, u, v = read_field(), read_field(), read_field()
        times.append(t)
        states.append(FlowState(h=h, u=u, v=v, t=t))
    return SnapshotSet(grid=grid, times=np.asarray(times), states=tuple(states))


def total_volume(snapshot: FlowState, grid: Grid) -> float:
    return float(np.sum(snapshot.h) * grid.cell_area)


__all__ = [
    "Grid", "FlowState", "SnapshotSet", "SimConfig",
    "gaussian_initial_condition", "step", "run_simulation",
    "save_snapshots", "load_snapshots", "total_volume", "cfl_limit",
    "M_PER_DEG",
]
