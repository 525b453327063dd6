"""Stage orchestration: simulate -> sensors -> ensemble -> pod -> rom ->
ngp -> calibrate -> forecast -> report.

Every stage writes immutable artifacts into the output directory and
records their sha256 in provenance.json; consuming stages refuse inputs
whose checksum no longer matches (stale-input protection).
"""

from __future__ import annotations

import configparser
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import bayes, galerkin, pod, sensors, swe, tuning
from .errors import ConfigError, ProvenanceError
from .scenarios import (Scenario, load_scenario_csv, restrict_sensors,
                        save_scenario_csv, scenario_from_series)

STAGES = ["simulate", "sensors", "ensemble", "pod", "rom", "ngp",
          "calibrate", "forecast", "report"]


@dataclass(frozen=True)
class PipelineConfig:
    sim: swe.SimConfig = swe.SimConfig()
    seed: int = 1234
    # pod
    rank: int = 0               # 0 means the 10%-of-modes default
    ric_target: float = 0.0     # >0 selects rank by RIC instead
    # rom
    alpha_l: float = 0.05
    alpha_q: float = 0.02
    # ngp
    ngp_iters: int = 2500
    ngp_lr: float = 0.2
    ngp_lam: float = 1e-2
    ngp_horizon: float = 2.0
    ngp_rho: float = 2.0
    # sensors
    n_sensors: int = 30
    n_active: int = 20
    n_test: int = 4
    activity_threshold: float = 0.01
    # ensemble
    ens_dlon: float = 1.0
    ens_dlat: float = 1.0
    ens_dmag: float = 1.0
    n_extreme: int = 15
    # mcmc
    chains: int = 2
    mcmc_iters: int = 6000
    mcmc_warmup: int = 5000
    prior_tau: float = 1.0
    prior_psi_scale: float = 1.0
    eps_shape: float = 2.0
    eps_scale: float = 4e-4
    # forecast
    level: float = 0.99
    cutoff: float = 1.0
    plots: bool = True

    @staticmethod
    def from_ini(text: str) -> "PipelineConfig":
        sim = swe.SimConfig.from_ini(text)
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw = {"sim": sim}
        table = {
            "pipeline": {"seed": int},
            "pod": {"rank": int, "ric_target": float},
            "rom": {"alpha_l": float, "alpha_q": float},
            "ngp": {"ngp_iters": int, "ngp_lr": float, "ngp_lam": float,
                    "ngp_horizon": float, "ngp_rho": float},
            "sensors": {"n_sensors": int, "n_active": int, "n_test": int,
                        "activity_threshold": float},
            "ensemble": {"ens_dlon": float, "ens_dlat": float,
                         "ens_dmag": float, "n_extreme": int},
            "mcmc": {"chains": int, "mcmc_iters": int, "mcmc_warmup": int,
                     "prior_tau": float, "prior_psi_scale": float,
                     "eps_shape": float, "eps_scale": float},
            "forecast": {"level": float, "cutoff": float, "plots": bool},
        }
        for section, keys in table.items():
            if not cp.has_section(section):
                continue
            for key, conv in keys.items():
                if cp.has_option(section, key):
                    try:
                        if conv is bool:
                            kw[key] = cp.getboolean(section, key)
                        else:
                            kw[key] = conv(cp.get(section, key))
                    except ValueError as exc:
                        raise ConfigError(f"[{section}] {key}: {exc}") from exc
        return PipelineConfig(**kw)

    def to_ini(self) -> str:
        return (
            self.sim.to_ini()
            + "\n[pipeline]\n"
            f"seed = {self.seed}\n"
            "\n[pod]\n"
            f"rank = {self.rank}\nric_target = {self.ric_target}\n"
            "\n[rom]\n"
            f"alpha_l = {self.alpha_l}\nalpha_q = {self.alpha_q}\n"
            "\n[ngp]\n"
            f"ngp_iters = {self.ngp_iters}\nngp_lr = {self.ngp_lr}\n"
            f"ngp_lam = {self.ngp_lam}\nngp_horizon = {self.ngp_horizon}\n"
            f"ngp_rho = {self.ngp_rho}\n"
            "\n[sensors]\n"
            f"n_sensors = {self.n_sensors}\nn_active = {self.n_active}\n"
            f"n_test = {self.n_test}\n"
            f"activity_threshold = {self.activity_threshold}\n"
            "\n[ensemble]\n"
            f"ens_dlon = {self.ens_dlon}\nens_dlat = {self.ens_dlat}\n"
            f"ens_dmag = {self.ens_dmag}\nn_extreme = {self.n_extreme}\n"
            "\n[mcmc]\n"
            f"chains = {self.chains}\nmcmc_iters = {self.mcmc_iters}\n"
            f"mcmc_warmup = {self.mcmc_warmup}\n"
            f"prior_tau = {self.prior_tau}\n"
            f"prior_psi_scale = {self.prior_psi_scale}\n"
            f"eps_shape = {self.eps_shape}\neps_scale = {self.eps_scale}\n"
            "\n[forecast]\n"
            f"level = {self.level}\ncutoff = {self.cutoff}\n"
            f"plots = {str(self.plots).lower()}\n"
        )


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """Artifact directory with provenance tracking."""

    def __init__(self, out_dir, config: PipelineConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self._prov_path = self.dir / "provenance.json"
        if self._prov_path.exists():
            self.prov = json.loads(self._prov_path.read_text())
        else:
            self.prov = {"artifacts": {}, "stages": {}}

    def path(self, name) -> Path:
        return self.dir / name

    def record(self, stage: str, outputs: list[Path], elapsed: float,
               extra=None):
        names = [p.relative_to(self.dir).as_posix() for p in outputs]
        for p, name in zip(outputs, names):
            self.prov["artifacts"][name] = {
                "sha256": _sha256(p), "stage": stage}
        entry = {"wallclock_s": round(elapsed, 3), "outputs": names}
        if extra:
            entry.update(extra)
        self.prov["stages"][stage] = entry
        self._prov_path.write_text(json.dumps(self.prov, indent=2,
                                              sort_keys=True))

    def require(self, name: str, needed_by: str) -> Path:
        p = self.path(name)
        meta = self.prov["artifacts"].get(name)
        if meta is None or not p.exists():
            stage = meta["stage"] if meta else _producer_of(name)
            raise ProvenanceError(
                f"stage '{needed_by}' needs '{name}'; rerun stage '{stage}'")
        if _sha256(p) != meta["sha256"]:
            raise ProvenanceError(
                f"'{name}' changed since stage '{meta['stage']}' produced "
                f"it; rerun '{meta['stage']}' before '{needed_by}'")
        return p


def _producer_of(name: str) -> str:
    table = {"reference.snap": "simulate", "sensors.csv": "sensors",
             "basis.bin": "pod", "operators.bin": "rom", "model.bin": "ngp",
             "posterior.bin": "calibrate", "ensemble.json": "ensemble",
             "scenarios/": "ensemble"}
    for key, stage in table.items():
        if name.startswith(key.split(".")[0]):
            return stage
    return "unknown"


def _rng(ws: Workspace, label: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{ws.config.seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_simulate(ws: Workspace):
    t0 = time.perf_counter()
    snaps = swe.run_simulation(ws.config.sim)
    out = ws.path("reference.snap")
    swe.save_snapshots(snaps, out)
    ws.record("simulate", [out], time.perf_counter() - t0,
              {"n_frames": snaps.n_t})
    return snaps


def stage_sensors(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("reference.snap", "sensors")
    grid = ws.config.sim.build_grid()
    snaps = swe.load_snapshots(ws.path("reference.snap"), grid=grid)
    amp = sensors.max_amplitude(snaps)
    sampled = sensors.sample_sensors(amp, grid, ws.config.n_sensors,
                                     _rng(ws, "sensors"))
    series = sensors.extract_series(snaps, sampled)
    act = sensors.activity(series, ws.config.activity_threshold)
    # keep the most active subset, then split calibration / test by
    # spreading the test sensors evenly across the activity ranking
    order = np.argsort(-act, kind="stable")[: ws.config.n_active]
    kept = [sampled.sensors[i] for i in order]
    n_active = len(kept)
    roles = ["calibration"] * n_active
    step = max(1, n_active // max(ws.config.n_test, 1))
    assigned = 0
    for idx in range(step - 1, n_active, step):
        if assigned >= ws.config.n_test:
            break
        roles[idx] = "test"
        assigned += 1
    selected = sensors.SensorSet(tuple(kept)).with_roles(roles)
    out = ws.path("sensors.csv")
    sensors.save_manifest(selected, out)
    ws.record("sensors", [out], time.perf_counter() - t0,
              {"n_sampled": ws.config.n_sensors, "n_active": n_active})
    return selected


def stage_ensemble(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("sensors.csv", "ensemble")
    cfg = ws.config
    grid = cfg.sim.build_grid()
    manifest = sensors.load_manifest(ws.path("sensors.csv"))
    scen_dir = ws.path("scenarios")
    scen_dir.mkdir(exist_ok=True)
    members = []
    outputs = [ws.path("sensors.csv")]
    offsets = list(itertools.product((-1, 0, 1), repeat=3))
    for idx, (olon, olat, omag) in enumerate(offsets):
        mid = f"m{idx:02d}"
        member = {
            "id": mid,
            "lon0": cfg.sim.ic_lon + olon * cfg.ens_dlon,
            "lat0": cfg.sim.ic_lat + olat * cfg.ens_dlat,
            "mag": cfg.sim.ic_mag + omag * cfg.ens_dmag,
        }
        try:
            sim_cfg = replace(cfg.sim, ic_lon=member["lon0"],
                              ic_lat=member["lat0"], ic_mag=member["mag"])
            snaps = swe.run_simulation(sim_cfg, grid=grid)
            series = sensors.extract_series(snaps, manifest)
            act = sensors.activity(series, cfg.activity_threshold)
            member["total_activity"] = float(np.mean(act))
            scen = scenario_from_series(mid, snaps.times, series,
                                        manifest.ids)
            path = scen_dir / f"{mid}.csv"
            save_scenario_csv(scen, path)
            member["scenario"] = path.name
            member["failed"] = False
            outputs.append(path)
        except Exception as exc:  # keep partial results, mark the failure
            member["failed"] = True
            member["error"] = str(exc)
        members.append(member)
    good = [m for m in members if not m["failed"]]
    # "most extreme" selection: lowest and highest total activity
    ranked = sorted(good, key=lambda m: m["total_activity"])
    n_lo = ws.config.n_extreme // 2
    n_hi = ws.config.n_extreme - n_lo
    chosen = {m["id"] for m in ranked[:n_lo] + ranked[len(ranked) - n_hi:]}
    for m in members:
        m["selected"] = m["id"] in chosen
    man_path = ws.path("ensemble.json")
    man_path.write_text(json.dumps(members, indent=2))
    outputs.append(man_path)
    ws.record("ensemble", outputs[1:], time.perf_counter() - t0,
              {"n_members": len(members),
               "n_failed": sum(m["failed"] for m in members),
               "n_selected": len(chosen)})
    return members


def stage_pod(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("reference.snap", "pod")
    grid = ws.config.sim.build_grid()
    snaps = swe.load_snapshots(ws.path("reference.snap"), grid=grid)
    matrix = pod.assemble(snaps)
    basis = pod.decompose(matrix)
    if ws.config.ric_target > 0:
        trunc = pod.truncate(basis, ric_threshold=ws.config.ric_target)
    elif ws.config.rank > 0:
        trunc = pod.truncate(basis, k=ws.config.rank)
    else:
        trunc = pod.truncate(basis)
    # persist the full decomposition with the chosen truncation rank
    full = replace(basis, rank=trunc.rank)
    out = ws.path("basis.bin")
    pod.save_basis(full, out)
    ws.record("pod", [out], time.perf_counter() - t0, {
        "rank": trunc.rank,
        "n_modes": basis.n_modes,
        "truncation_error": pod.truncation_error(basis, trunc.rank),
        "ric_at_rank": pod.ric(basis.singulars, trunc.rank),
    })
    return full


def stage_rom(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("basis.bin", "rom")
    grid = ws.config.sim.build_grid()
    basis = pod.load_basis(ws.path("basis.bin"))
    trunc = pod.truncate(basis, k=basis.rank)
    ops = galerkin.assemble_operators(trunc, grid)
    ops = galerkin.prescale(ops, ws.config.alpha_l, ws.config.alpha_q)
    out = ws.path("operators.bin")
    galerkin.save_operators(ops, out)
    ws.record("rom", [out], time.perf_counter() - t0, {"rank": ops.rank})
    return ops


def stage_ngp(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("operators.bin", "ngp")
    ws.require("basis.bin", "ngp")
    basis = pod.load_basis(ws.path("basis.bin"))
    ops, _ = galerkin.load_operators(ws.path("operators.bin"))
    target = galerkin.CoeffTrajectory(
        times=ws.config.sim.cadence * np.arange(basis.n_t),
        values=basis.coeffs[:, : ops.rank].copy(), origin="pod")
    settings = tuning.TrainSettings(
        iters=ws.config.ngp_iters, lr=ws.config.ngp_lr,
        lam=ws.config.ngp_lam, horizon_factor=ws.config.ngp_horizon,
        rho=ws.config.ngp_rho)
    model = tuning.train(ops, target, settings)
    out = ws.path("model.bin")
    tuning.save_model(model, out)
    rec = model.record
    ws.record("ngp", [out], time.perf_counter() - t0, {
        "initial_loss": rec.initial_loss, "best_loss": rec.best_loss,
        "final_mse": rec.final_mse, "iterations": len(rec.loss_history),
        "failed": rec.failed,
    })
    return model


def _calibration_inputs(ws: Workspace):
    ws.require("model.bin", "calibrate")
    ws.require("basis.bin", "calibrate")
    ws.require("sensors.csv", "calibrate")
    ws.require("ensemble.json", "calibrate")
    cfg = ws.config
    grid = cfg.sim.build_grid()
    basis = pod.load_basis(ws.path("basis.bin"))
    trunc = pod.truncate(basis, k=basis.rank)
    model = tuning.load_model(ws.path("model.bin"))
    manifest = sensors.load_manifest(ws.path("sensors.csv"))
    cal = manifest.subset("calibration")
    members = json.loads(ws.path("ensemble.json").read_text())
    times = cfg.sim.cadence * np.arange(basis.n_t)
    scen = []
    for m in members:
        if not m.get("selected"):
            continue
        path = ws.require(f"scenarios/{m['scenario']}", "calibrate")
        full = load_scenario_csv(path, times, manifest.ids, sid=m["id"])
        s = restrict_sensors(full, cal.ids)
        if cfg.cutoff < 1.0:
            s = sensors.apply_cutoff(s, cfg.cutoff)
        scen.append(s)
    sensor_basis = bayes.build_sensor_basis(trunc, grid, cal)
    blowup = galerkin.default_blowup_bound(trunc.coeffs[:, : trunc.rank])
    forecaster = bayes.SensorForecaster(model.effective(), sensor_basis,
                                        dt=cfg.sim.cadence,
                                        n_steps=basis.n_t - 1, blowup=blowup)
    priors = bayes.default_priors(trunc, tau=cfg.prior_tau,
                                  psi_scale=cfg.prior_psi_scale,
                                  eps_shape=cfg.eps_shape,
                                  eps_scale=cfg.eps_scale)
    return grid, trunc, model, manifest, cal, scen, forecaster, priors


def stage_calibrate(ws: Workspace):
    t0 = time.perf_counter()
    (_, _, _, _, _, scen, forecaster, priors) = _calibration_inputs(ws)
    cfg = ws.config
    mcfg = bayes.McmcConfig(chains=cfg.chains, iters=cfg.mcmc_iters,
                            warmup=cfg.mcmc_warmup, seed=cfg.seed)
    samples = bayes.run_mcmc(scen, forecaster, priors, mcfg)
    out = ws.path("posterior.bin")
    bayes.save_posterior(samples, out)
    rhats = bayes.gelman_rubin(samples)
    summary = ws.path("posterior_summary.csv")
    _write_posterior_summary(samples, rhats, summary)
    ws.record("calibrate", [out, summary], time.perf_counter() - t0, {
        "max_rhat": bayes.max_rhat(rhats),
        "mean_accept": float(samples.accept_rate.mean()),
        "n_scenarios": len(scen),
    })
    return samples


def _write_posterior_summary(samples, rhats, path: Path):
    import csv

    def rows():
        k = samples.mu0.shape[2]
        for p in range(k):
            vals = samples.mu0[:, :, p]
            yield f"mu0[{p}]", vals, rhats["mu0"][p]
        diag = samples.sigma[:, :, np.arange(k), np.arange(k)]
        for p in range(k):
            yield f"sigma[{p},{p}]", diag[:, :, p], rhats["sigma_diag"][p]
        for s in range(samples.sigma_eps.shape[2]):
            name = (samples.sensor_ids[s]
                    if s < len(samples.sensor_ids) else str(s))
            yield (f"sigma_eps[{name}]", samples.sigma_eps[:, :, s],
                   rhats["sigma_eps"][s])

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "rhat"])
        for name, vals, rhat in rows():
            w.writerow([name, f"{vals.mean():.9e}", f"{vals.std(ddof=1):.9e}",
                        f"{rhat:.5f}"])


def stage_forecast(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("posterior.bin", "forecast")
    (grid, trunc, model, manifest, _cal, _scen, _fc, _pr) = \
        _calibration_inputs(ws)
    cfg = ws.config
    samples = bayes.load_posterior(ws.path("posterior.bin"))
    # forecast at every selected sensor, calibration and test alike
    sensor_basis = bayes.build_sensor_basis(trunc, grid, manifest)
    blowup = galerkin.default_blowup_bound(trunc.coeffs[:, : trunc.rank])
    forecaster = bayes.SensorForecaster(model.effective(), sensor_basis,
                                        dt=cfg.sim.cadence,
                                        n_steps=trunc.n_t - 1, blowup=blowup)
    # sigma_eps columns follow the calibration set; map them onto the full
    # sensor list, reusing the pooled mean variance for test sensors
    cal_ids = samples.sensor_ids
    eps_full = np.empty((samples.n_chains, samples.n_draws, len(manifest)))
    pooled = samples.sigma_eps.mean(axis=2)
    for s, sid in enumerate(manifest.ids):
        if sid in cal_ids:
            eps_full[:, :, s] = samples.sigma_eps[:, :, cal_ids.index(sid)]
        else:
            eps_full[:, :, s] = pooled
    expanded = replace(samples, sigma_eps=eps_full,
                       sensor_ids=manifest.ids)
    forecast = bayes.posterior_predictive(expanded, forecaster,
                                          level=cfg.level, seed=cfg.seed)
    fdir = ws.path("forecast")
    fdir.mkdir(exist_ok=True)
    outputs = []
    for s, sid in enumerate(forecast.sensor_ids):
        path = fdir / f"{sid}.csv"
        _write_forecast_csv(forecast, s, path)
        outputs.append(path)
    if cfg.plots:
        outputs += _forecast_plots(ws, forecast, manifest)
    ws.record("forecast", outputs, time.perf_counter() - t0, {
        "level": cfg.level,
        "excluded_fraction": forecast.excluded_fraction,
    })
    return forecast


def _write_forecast_csv(forecast: bayes.Forecast, s: int, path: Path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean", "ci_lo", "ci_hi", "pi_lo", "pi_hi"])
        for t in range(len(forecast.times)):
            w.writerow([f"{forecast.times[t]:.6f}"] + [
                f"{arr[t, s]:.9e}" for arr in
                (forecast.mean, forecast.ci_lo, forecast.ci_hi,
                 forecast.pi_lo, forecast.pi_hi)])


def _forecast_plots(ws: Workspace, forecast: bayes.Forecast, manifest):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pdir = ws.path("plots")
    pdir.mkdir(exist_ok=True)
    outputs = []
    hours = forecast.times / 3600.0
    for s, sid in enumerate(forecast.sensor_ids):
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.fill_between(hours, forecast.pi_lo[:, s], forecast.pi_hi[:, s],
                        alpha=0.25, color="tab:gray", label="PI")
        ax.fill_between(hours, forecast.ci_lo[:, s], forecast.ci_hi[:, s],
                        alpha=0.4, color="tab:blue", label="CI")
        ax.plot(hours, forecast.mean[:, s], color="k", lw=1, label="mean")
        role = next(x.role for x in manifest.sensors if x.sid == sid)
        ax.set_xlabel("time [h]")
        ax.set_ylabel("surface height [m]")
        ax.set_title(f"sensor {sid} ({role})")
        ax.legend(loc="upper right", fontsize=8)
        path = pdir / f"{sid}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        outputs.append(path)
    return outputs


def stage_report(ws: Workspace):
    t0 = time.perf_counter()
    ws.require("basis.bin", "report")
    basis = pod.load_basis(ws.path("basis.bin"))
    s = basis.singulars
    lines = ["# Run report", ""]
    lines.append("## Mode spectrum")
    k80 = pod.rank_for_ric(s, 0.80)
    k95 = pod.rank_for_ric(s, 0.95)
    k10 = max(1, int(np.ceil(0.10 * basis.n_modes)))
    err10 = pod.truncation_error(basis, k10)
    s2 = np.cumsum(s[::-1] ** 2)[::-1]
    frob = np.sqrt(np.sum(s**2))
    k8pct = next((k for k in range(1, len(s) + 1)
                  if pod.truncation_error(basis, k) < 0.08), len(s))
    lines += [
        f"- modes available: {basis.n_modes}",
        f"- truncation rank used: {basis.rank}",
        f"- rank at 80% RIC: {k80}",
        f"- rank at 95% RIC: {k95}",
        f"- relative L2 error at 10% of modes (k={k10}): {err10:.4f}",
        f"- smallest rank with relative L2 error below 8%: {k8pct}",
        "",
    ]
    for stage in ("ngp", "calibrate", "forecast"):
        meta = ws.prov["stages"].get(stage)
        if meta:
            lines.append(f"## Stage {stage}")
            for key, val in meta.items():
                if key != "outputs":
                    lines.append(f"- {key}: {val}")
            lines.append("")
    if ws.path("posterior_summary.csv").exists():
        lines.append("## Posterior summary")
        lines.append("")
        lines.append("```")
        lines.append(ws.path("posterior_summary.csv").read_text().strip())
        lines.append("```")
    lines.append("")
    lines.append("## Wall clock per stage")
    for stage, meta in ws.prov["stages"].items():
        lines.append(f"- {stage}: {meta['wallclock_s']} s")
    out = ws.path("report.md")
    out.write_text("\n".join(lines) + "\n")
    ws.record("report", [out], time.perf_counter() - t0)
    return out


_STAGE_FN = {
    "simulate": stage_simulate,
    "sensors": stage_sensors,
    "ensemble": stage_ensemble,
    "pod": stage_pod,
    "rom": stage_rom,
    "ngp": stage_ngp,
    "calibrate": stage_calibrate,
    "forecast": stage_forecast,
    "report": stage_report,
}


def run_pipeline(config: PipelineConfig, out_dir, upto: str = "report"):
    """Run stages in order up to and including `upto`."""
    if upto not in STAGES:
        raise ConfigError(f"unknown stage {upto!r}; choose from {STAGES}")
    ws = Workspace(out_dir, config)
    for stage in STAGES[: STAGES.index(upto) + 1]:
        _STAGE_FN[stage](ws)
    return ws


def run_stage(config: PipelineConfig, out_dir, stage: str):
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    ws = Workspace(out_dir, config)
    return _STAGE_FN[stage](ws)


__all__ = ["PipelineConfig", "Workspace", "default_config", "run_pipeline",
           "run_stage", "STAGES"]
