"""Calibration scenario container and its CSV interchange format.

A scenario is one simulation's (or real event's) sensor record: surface
heights on a shared time grid with a boolean observation mask.  The CSV
format has columns time_s, sensor_id, height_m; rows absent from the file
are unobserved.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class Scenario:
    sid: str
    times: np.ndarray        # [n_t] seconds
    values: np.ndarray       # [n_t, n_sensors]; NaN where unobserved
    mask: np.ndarray         # [n_t, n_sensors] bool, True = observed
    sensor_ids: tuple[str, ...]

    def __post_init__(self):
        n_t, n_s = self.values.shape
        if self.times.shape != (n_t,) or self.mask.shape != (n_t, n_s):
            raise StructuralError("scenario array shapes inconsistent")
        if len(self.sensor_ids) != n_s:
            raise StructuralError("sensor id count does not match columns")
        if np.any(self.mask & ~np.isfinite(self.values)):
            raise StructuralError("observed entries must carry finite values")

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


def scenario_from_series(sid, times, series, sensor_ids) -> Scenario:
    """Fully observed scenario from a dense sensor-series array."""
    series = np.asarray(series, dtype=float)
    return Scenario(sid=sid, times=np.asarray(times, dtype=float),
                    values=series, mask=np.ones(series.shape, dtype=bool),
                    sensor_ids=tuple(sensor_ids))


def save_scenario_csv(scenario: Scenario, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "sensor_id", "height_m"])
        for ti, t in enumerate(scenario.times):
            for si, sid in enumerate(scenario.sensor_ids):
                if scenario.mask[ti, si]:
                    w.writerow([f"{t:.6f}", sid,
                                f"{scenario.values[ti, si]:.9e}"])


def load_scenario_csv(path, times, sensor_ids, sid=None,
                      time_tol=1e-6) -> Scenario:
    """Rebuild a scenario on a reference time grid and sensor list.

    Rows whose time does not match a grid point (within tolerance) or whose
    sensor id is unknown are rejected.
    """
    times = np.asarray(times, dtype=float)
    sensor_ids = tuple(sensor_ids)
    col = {s: i for i, s in enumerate(sensor_ids)}
    values = np.full((len(times), len(sensor_ids)), np.nan)
    mask = np.zeros(values.shape, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            t = float(row["time_s"])
            s = row["sensor_id"]
            if s not in col:
                raise StructuralError(f"{path}: unknown sensor id {s!r}")
            ti = int(np.argmin(np.abs(times - t)))
            if abs(times[ti] - t) > time_tol * max(1.0, abs(t)):
                raise StructuralError(f"{path}: time {t} not on the grid")
            values[ti, col[s]] = float(row["height_m"])
            mask[ti, col[s]] = True
    name = sid if sid is not None else str(path)
    return Scenario(sid=name, times=times, values=values, mask=mask,
                    sensor_ids=sensor_ids)


def restrict_sensors(scenario: Scenario, keep_ids) -> Scenario:
    """Scenario restricted to a subset of its sensors (column slice)."""
    keep_ids = tuple(keep_ids)
    idx = [scenario.sensor_ids.index(s) for s in keep_ids]
    return Scenario(sid=scenario.sid, times=scenario.times,
                    values=scenario.values[:, idx].copy(),
                    mask=scenario.mask[:, idx].copy(), sensor_ids=keep_ids)


__all__ = ["Scenario", "scenario_from_series", "save_scenario_csv",
           "load_scenario_csv", "restrict_sensors"]
