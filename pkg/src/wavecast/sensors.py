"""Sensor placement, series extraction, activity metrics, and data masking.

Sensors are placed by rejection sampling against the per-cell maximum
amplitude of a reference run, so they preferentially land where wave
activity is significant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, StructuralError
from .scenarios import Scenario
from .swe import Grid, SnapshotSet


@dataclass(frozen=True)
class Sensor:
    sid: str
    lon: float
    lat: float
    i: int  # row
    j: int  # column
    role: str = "calibration"  # calibration | test


@dataclass(frozen=True)
class SensorSet:
    sensors: tuple[Sensor, ...]

    def __post_init__(self):
        seen = {(s.i, s.j) for s in self.sensors}
        if len(seen) != len(self.sensors):
            raise StructuralError("duplicate sensor locations")

    def __len__(self):
        return len(self.sensors)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.sid for s in self.sensors)

    def cells(self) -> np.ndarray:
        """[n, 2] array of (i, j) grid indices."""
        return np.array([(s.i, s.j) for s in self.sensors], dtype=int)

    def h_rows(self, grid: Grid) -> np.ndarray:
        """Flat indices into the h block of the stacked state vector."""
        ij = self.cells()
        return ij[:, 0] * grid.nx + ij[:, 1]

    def with_roles(self, roles) -> "SensorSet":
        if len(roles) != len(self.sensors):
            raise StructuralError("role count mismatch")
        return SensorSet(tuple(replace(s, role=r)
                               for s, r in zip(self.sensors, roles)))

    def subset(self, role: str) -> "SensorSet":
        return SensorSet(tuple(s for s in self.sensors if s.role == role))


def max_amplitude(snapshots: SnapshotSet) -> np.ndarray:
    """Cellwise maximum |eta| over the run; zero on land."""
    if snapshots.n_t == 0:
        raise DomainError("empty snapshot set")
    grid = snapshots.grid
    amp = np.zeros((grid.ny, grid.nx))
    for state in snapshots.states:
        np.maximum(amp, np.abs(state.eta(grid)), out=amp)
    return amp


def sample_sensors(amplitude: np.ndarray, grid: Grid, n: int,
                   rng: np.random.Generator,
                   max_attempts: int = 200_000) -> SensorSet:
    """Rejection sampling: uniform proposal over wet cells, acceptance
    probability proportional to the amplitude map."""
    wet = ~grid.land
    positive = wet & (amplitude > 0)
    if positive.sum() < n:
        raise DomainError(
            f"only {int(positive.sum())} positive-amplitude wet cells for "
            f"{n} sensors")
    wet_cells = np.argwhere(wet)
    peak = float(amplitude[positive].max())
    chosen: list[tuple[int, int]] = []
    taken = set()
    attempts = 0
    while len(chosen) < n:
        attempts += 1
        if attempts > max_attempts:
            raise DomainError("rejection sampling failed to place sensors")
        i, j = wet_cells[rng.integers(len(wet_cells))]
        if rng.random() >= amplitude[i, j] / peak:
            continue
        if (i, j) in taken:
            continue
        taken.add((int(i), int(j)))
        chosen.append((int(i), int(j)))
    sensors = []
    for idx, (i, j) in enumerate(chosen):
        lon, lat = grid.lonlat_of_index(i, j)
        sensors.append(Sensor(sid=f"s{idx:03d}", lon=lon, lat=lat, i=i, j=j))
    return SensorSet(tuple(sensors))


def extract_series(snapshots: SnapshotSet, sensors: SensorSet) -> np.ndarray:
    """Surface height eta(t) at each sensor: array [n_t, n_sensors]."""
    grid = snapshots.grid
    ij = sensors.cells()
    if ij.size and (ij[:, 0].max() >= grid.ny or ij[:, 1].max() >= grid.nx
                    or ij.min() < 0):
        raise DomainError("sensor location off the grid")
    out = np.empty((snapshots.n_t, len(sensors)))
    for t, state in enumerate(snapshots.states):
        eta = state.eta(grid)
        out[t] = eta[ij[:, 0], ij[:, 1]]
    return out


def activity(series: np.ndarray, threshold: float) -> np.ndarray:
    """Fraction of time points with |eta| above the threshold.

    Accepts a single series [n_t] or a stack [n_t, n_sensors]; returns a
    scalar or per-sensor fractions accordingly.
    """
    if threshold <= 0:
        raise DomainError("activity threshold must be positive")
    series = np.asarray(series)
    frac = np.mean(np.abs(series) > threshold, axis=0)
    return float(frac) if np.ndim(frac) == 0 else frac


def apply_cutoff(scenario: Scenario, fraction: float) -> Scenario:
    """Zero the observation mask beyond fraction * T; values are kept."""
    if not 0 < fraction <= 1:
        raise DomainError("cutoff fraction must be in (0, 1]")
    t0, t1 = scenario.times[0], scenario.times[-1]
    cutoff = t0 + fraction * (t1 - t0)
    keep = scenario.times <= cutoff + 1e-12 * max(abs(t1), 1.0)
    mask = scenario.mask & keep[:, None]
    return replace(scenario, mask=mask)


def save_manifest(sensors: SensorSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lon", "lat", "i", "j", "role"])
        for s in sensors.sensors:
            w.writerow([s.sid, f"{s.lon:.6f}", f"{s.lat:.6f}", s.i, s.j,
                        s.role])


def load_manifest(path) -> SensorSet:
    sensors = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sensors.append(Sensor(
                sid=row["id"], lon=float(row["lon"]), lat=float(row["lat"]),
                i=int(row["i"]), j=int(row["j"]), role=row["role"]))
    return SensorSet(tuple(sensors))


__all__ = ["Sensor", "SensorSet", "max_amplitude", "sample_sensors",
           "extract_series", "activity", "apply_cutoff",
           "save_manifest", "load_manifest"]
