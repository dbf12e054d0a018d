"""Scenario construction, filter dispatch and CSV output for the CLI."""
from __future__ import annotations

import csv
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, distributions as dist, kalman, rbpf, scenarios as sc
from .config import ExperimentConfig, FilterConfig, PriorSpec
from .kalman import GaussianBelief, LdsModel

logger = logging.getLogger(__name__)

THREADS_ENV = "ROBUST_LDS_THREADS"
LOG_CHI2_MEAN = -1.2703628454614782  # digamma(1/2) + log 2
LOG_CHI2_VAR = math.pi ** 2 / 2

DEFAULT_STEPS = {"sv": 1000, "ar2": 200, "custom-lds": 100}


@dataclass
class Scenario:
    """Everything a filter needs besides the data."""

    name: str
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: GaussianBelief
    nominal_process: dist.HgmNoiseSpec
    nominal_measurement: dist.HgmNoiseSpec
    metric_dims: tuple
    default_process_prior: dist.HgmNoiseSpec
    default_measurement_prior: dist.HgmNoiseSpec
    exact_meas_logpdf: object = None

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def nw(self) -> int:
        return self.B.shape[1]

    def model(self, process: dist.HgmNoiseSpec, measurement: dist.HgmNoiseSpec) -> LdsModel:
        return LdsModel(self.A, self.B, self.C, process, measurement)


@dataclass
class Dataset:
    truth: np.ndarray   # (T, nx), may be empty in width when unknown
    y: np.ndarray       # (T, ny)


def _track_spec(cfg: ExperimentConfig) -> sc.TrackSpec:
    p = cfg.param
    speed = p("speed", 60.0)
    heading = p("heading", 90.0)
    v0 = (speed * math.cos(math.radians(heading)), speed * math.sin(math.radians(heading)))
    durations = p("durations", (30, 40, 30))
    if len(durations) != 3:
        raise ValueError("track durations must list three segments (linear, turn, linear)")
    rate = p("turn_rate", -math.pi / durations[1])
    sigma = p("meas_sigma", 80.0)
    if p("meas_noise", "gaussian") == "gaussian":
        noise = sc.gaussian_noise(sigma ** 2, 2)
    else:
        noise = sc.two_component(0.8, sigma ** 2, 300.0 ** 2, dim=2)
    segs = (sc.Linear(durations[0]), sc.CoordinatedTurn(durations[1], rate), sc.Linear(durations[2]))
    return sc.TrackSpec(segments=segs, T=p("T", 1.0), meas_noise=noise, initial_velocity=v0)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    p = cfg.param
    name = cfg.scenario
    if name == "track":
        spec = _track_spec(cfg)
        A, B, C = sc.cv_matrices(spec.T)
        R = dist.gaussian(np.zeros(2), np.eye(2) * p("meas_sigma", 80.0) ** 2)
        Qn = dist.gaussian(np.zeros(2), np.eye(2))
        Lp = dist.laplace(np.zeros(2), np.eye(2) * 1e6)
        return Scenario(name, A, B, C, sc.track_prior(spec), Qn, R, (0, 1), Lp, R)
    if name == "ar2":
        A, B, C = sc.ar2_matrices(p("coeffs", sc.AR2_COEFFS))
        Q = dist.gaussian([0.0], [[p("process_var", 1.0)]])
        R = dist.gaussian([0.0], [[p("meas_var", 10.0)]])
        x0 = GaussianBelief(np.zeros(2), np.eye(2) * p("x0_var", 10.0))
        Rt = dist.student_t([0.0], [[1e4]], 5.0)
        return Scenario(name, A, B, C, x0, Q, R, (0,), Q, Rt)
    if name == "sv":
        g0, g1, s2 = p("gamma0", 0.0), p("gamma1", 0.9), p("sigma_n2", 0.1)
        Q = dist.gaussian([g0], [[s2]])
        R = dist.gaussian([LOG_CHI2_MEAN], [[LOG_CHI2_VAR]])
        x0 = sc.sv_prior(g1, math.sqrt(s2))
        return Scenario(name, np.array([[g1]]), np.array([[1.0]]), np.array([[1.0]]), x0, Q, R, (0,),
                        Q, sc.sv_paper_noise(), exact_meas_logpdf=lambda r: sc.sv_noise_logpdf(r[:, 0]))
    # custom-lds
    A, B, C = (np.array(p(k), dtype=float) for k in ("A", "B", "C"))
    nx = A.shape[0]
    if A.shape != (nx, nx) or B.shape[0] != nx or C.shape[1] != nx:
        raise ValueError(f"inconsistent custom-lds matrices A{A.shape} B{B.shape} C{C.shape}")
    Qn = p("process_noise").build(B.shape[1])
    Rn = p("measurement_noise").build(C.shape[0])
    mean = np.array(p("x0_mean", (0.0,) * nx))
    cov = np.array(p("x0_cov", tuple(tuple(np.eye(nx)[i]) for i in range(nx))))
    if mean.shape != (nx,) or cov.shape != (nx, nx):
        raise ValueError("x0_mean / x0_cov do not match the state dimension")
    return Scenario(name, A, B, C, GaussianBelief(mean, cov), Qn, Rn, tuple(range(nx)), Qn, Rn)


def simulate(cfg: ExperimentConfig, seed: int) -> Dataset:
    p = cfg.param
    steps = cfg.steps
    if cfg.scenario == "track":
        spec = _track_spec(cfg)
        x, y = sc.simulate_track(spec, seed)
        if steps is not None:
            if steps > len(x):
                raise ValueError(f"steps={steps} exceeds the track length {len(x)}")
            x, y = x[:steps], y[:steps]
        return Dataset(x, y)
    T = DEFAULT_STEPS[cfg.scenario] if steps is None else steps
    if cfg.scenario == "ar2":
        pv, mv = p("process_var", 1.0), p("meas_var", 10.0)
        kind = p("meas_noise", "sporadic")
        if kind == "sporadic":
            meas = sc.two_component(1 - p("outlier_prob", 0.05), mv, p("outlier_var", 100.0))
        elif kind == "persistent":
            meas = sc.regime_switch(sc.gaussian_noise(mv), sc.gaussian_noise(p("outlier_var", 100.0)),
                                    T // 2 + 1)
        else:
            meas = sc.gaussian_noise(mv)
        d = sc.simulate_ar2(T, sc.gaussian_noise(pv), meas, seed, coeffs=p("coeffs", sc.AR2_COEFFS))
        return Dataset(d.states, d.y[:, None])
    if cfg.scenario == "sv":
        d = sc.simulate_sv(p("gamma0", 0.0), p("gamma1", 0.9), math.sqrt(p("sigma_n2", 0.1)), T, seed)
        return Dataset(d.h[:, None], d.log_y2[:, None])
    scen = build_scenario(cfg)
    rng = np.random.default_rng(seed)
    L0 = np.linalg.cholesky(scen.x0.cov)
    x = scen.x0.mean + L0 @ rng.standard_normal(scen.nx)
    xs, ys = np.empty((T, scen.nx)), np.empty((T, scen.ny))
    for k in range(T):
        x = scen.A @ x + scen.B @ dist.sample_noise(scen.nominal_process, rng)
        xs[k] = x
        ys[k] = scen.C @ x + dist.sample_noise(scen.nominal_measurement, rng)
    return Dataset(xs, ys)


def _prior(fc: FilterConfig, key: str, default: dist.HgmNoiseSpec, dim: int) -> dist.HgmNoiseSpec:
    spec: PriorSpec | None = fc.get(key)
    return default if spec is None else spec.build(dim)


def _gaussian(mu, var, dim) -> dist.HgmNoiseSpec:
    return dist.gaussian(np.full(dim, mu), np.eye(dim) * var)


def filter_seed(name: str, seed: int) -> int:
    return int(seed) * 1_000_003 + zlib.crc32(name.encode())


def run_filter(fc: FilterConfig, scen: Scenario, ys: np.ndarray, seed: int, horizon: int = 0) -> dict:
    """Run one configured filter; returns per-step arrays."""
    T = len(ys)
    nx = scen.nx
    out = {"mean": np.empty((T, nx)), "var": np.empty((T, nx)), "ess": np.full(T, np.nan),
           "loglik_increment": np.full(T, np.nan), "pred_mean": np.full((T, nx), np.nan)}
    if T == 0:
        return out
    fseed = filter_seed(fc.name, seed)
    if fc.type == "rbpf":
        model = scen.model(_prior(fc, "process_prior", scen.default_process_prior, scen.nw),
                           _prior(fc, "measurement_prior", scen.default_measurement_prior, scen.ny))
        state = rbpf.init(model, scen.x0, fc.get("particles", 50),
                          ess_threshold=fc.get("ess_threshold", 0.5), resample=fc.get("resample", "always"),
                          seed=fseed, rho_w=fc.get("rho_w", 0.05), rho_e=fc.get("rho_e", 0.05))
        for k, y in enumerate(ys):
            est = rbpf.step(state, y)
            out["mean"][k], out["var"][k] = est.mean, np.diag(est.cov)
            out["ess"][k], out["loglik_increment"][k] = est.ess, est.loglik_increment
            if horizon:
                out["pred_mean"][k] = rbpf.predict_ahead(state, horizon)[0]
        return out
    if fc.type == "kf":
        mn = _gaussian_from(scen.nominal_measurement)
        mu_e = np.full(scen.ny, fc.get("mu_e")) if fc.get("mu_e") is not None else mn.mu
        R = np.eye(scen.ny) * fc.get("R") if fc.get("R") is not None else mn.Sigma
        meas = dist.gaussian(mu_e, R)
        proc = _gaussian(fc.get("mu_w", float(scen.nominal_process.mu[0])), fc.get("Q"), scen.nw)
        model = scen.model(proc, meas)
        kf = kalman.KalmanFilter(model, scen.x0)
        for k, y in enumerate(ys):
            b, inc = kf.step(y)
            out["mean"][k], out["var"][k] = b.mean, np.diag(b.cov)
            out["ess"][k], out["loglik_increment"][k] = 1.0, inc
            if horizon:
                pred = kalman.predict_p_step(b, model, [proc.mu] * horizon, [proc.Sigma] * horizon,
                                             kf.k, horizon)
                out["pred_mean"][k] = pred.mean
        return out
    if fc.type == "imm":
        meas = _gaussian_from(scen.nominal_measurement) if fc.get("R") is None else \
            _gaussian(0.0, fc.get("R"), scen.ny)
        mu_w = float(scen.nominal_process.mu[0])
        modes = [scen.model(_gaussian(mu_w, s ** 2, scen.nw), meas) for s in fc.get("sigmas")]
        M = len(modes)
        trans = fc.get("transition")
        if trans is None:
            trans = np.full((M, M), 0.1 / (M - 1)) + np.eye(M) * (0.9 - 0.1 / (M - 1))
        init = fc.get("initial", (1.0 / M,) * M)
        imm = baselines.ImmFilter(baselines.ImmConfig(modes, np.array(trans), np.array(init)), scen.x0)
        for k, y in enumerate(ys):
            est = imm.step(y)
            out["mean"][k], out["var"][k] = est.mean, np.diag(est.cov)
            out["loglik_increment"][k] = est.loglik_increment
        return out
    if fc.type == "bootstrap_pf":
        Q = fc.get("Q")
        proc = _gaussian_from(scen.nominal_process) if Q is None else \
            _gaussian(float(scen.nominal_process.mu[0]), Q, scen.nw)
        if scen.exact_meas_logpdf is not None and fc.get("R") is None:
            meas, logpdf = _gaussian(0.0, 1.0, scen.ny), scen.exact_meas_logpdf
        else:
            meas = _gaussian_from(scen.nominal_measurement) if fc.get("R") is None else \
                _gaussian(0.0, fc.get("R"), scen.ny)
            logpdf = None
        pf = baselines.lds_bootstrap_pf(scen.model(proc, meas), scen.x0, fc.get("particles", 1000),
                                        seed=fseed, meas_logpdf=logpdf)
        for k, y in enumerate(ys):
            est = pf.step(y)
            out["mean"][k], out["var"][k] = est.mean, est.var
            out["ess"][k], out["loglik_increment"][k] = est.ess, est.loglik_increment
        return out
    raise ValueError(f"unknown filter type {fc.type!r}")


def _gaussian_from(spec: dist.HgmNoiseSpec) -> dist.HgmNoiseSpec:
    """Gaussian with the same location and scale matrix as ``spec``."""
    if spec.family is dist.Family.GAUSSIAN:
        return spec
    return dist.gaussian(spec.mu, spec.Sigma)


DIVERGENCE_ERRORS = (rbpf.WeightDegeneracyError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class SeedResult:
    seed: int
    data: Dataset
    outputs: dict      # filter name -> per-step dict or None
    status: dict       # filter name -> "ok" / "diverged: ..."


def run_seed(cfg: ExperimentConfig, seed: int, data: Dataset | None = None) -> SeedResult:
    scen = build_scenario(cfg)
    if data is None:
        data = simulate(cfg, seed)
    outputs, status = {}, {}
    for fc in cfg.filters:
        try:
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                outputs[fc.name] = run_filter(fc, scen, data.y, seed, cfg.horizon)
            status[fc.name] = "ok"
        except DIVERGENCE_ERRORS as exc:
            logger.warning("filter %s diverged on seed %d: %s", fc.name, seed, exc)
            outputs[fc.name] = None
            status[fc.name] = f"diverged: {exc}"
    return SeedResult(seed, data, outputs, status)


def seed_metrics(cfg: ExperimentConfig, res: SeedResult, name: str) -> tuple[float, float]:
    out = res.outputs[name]
    if out is None or res.data.truth.shape[1] == 0:
        return float("nan"), float("nan")
    dims = list(build_scenario(cfg).metric_dims)
    return sc.metrics(res.data.truth[:, dims], out["mean"][:, dims])


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def step_columns(nx: int, ny: int, truth: bool, horizon: int) -> list[str]:
    cols = ["step"]
    if truth:
        cols += [f"truth_{i}" for i in range(nx)]
    cols += [f"y_{i}" for i in range(ny)]
    cols += [f"mean_{i}" for i in range(nx)] + [f"var_{i}" for i in range(nx)]
    cols += ["ess", "loglik_increment"]
    if horizon:
        cols += [f"pred{horizon}_mean_{i}" for i in range(nx)]
    return cols


def write_step_csv(path: Path, scen: Scenario, data: Dataset, out: dict | None, horizon: int) -> None:
    has_truth = data.truth.shape[1] > 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(step_columns(scen.nx, scen.ny, has_truth, horizon))
        if out is None:
            return
        for k in range(len(data.y)):
            row = [k + 1]
            if has_truth:
                row += [_fmt(v) for v in data.truth[k]]
            row += [_fmt(v) for v in data.y[k]]
            row += [_fmt(v) for v in out["mean"][k]] + [_fmt(v) for v in out["var"][k]]
            row += [_fmt(out["ess"][k]), _fmt(out["loglik_increment"][k])]
            if horizon:
                row += [_fmt(v) for v in out["pred_mean"][k]]
            w.writerow(row)


def write_data_csv(path: Path, data: Dataset) -> None:
    nx, ny = data.truth.shape[1], data.y.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"truth_{i}" for i in range(nx)] + [f"y_{i}" for i in range(ny)])
        for k in range(len(data.y)):
            w.writerow([k + 1] + [_fmt(v) for v in data.truth[k]] + [_fmt(v) for v in data.y[k]])


def read_data_csv(path, ny: int, nx: int) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty data file")
    header, body = rows[0], rows[1:]
    ycols = [header.index(f"y_{i}") for i in range(ny) if f"y_{i}" in header]
    if len(ycols) != ny:
        raise ValueError(f"{path}: expected columns y_0..y_{ny - 1}")
    tcols = [header.index(f"truth_{i}") for i in range(nx) if f"truth_{i}" in header]
    if tcols and len(tcols) != nx:
        raise ValueError(f"{path}: truth columns must cover the full state (truth_0..truth_{nx - 1})")
    y = np.array([[float(r[c]) for c in ycols] for r in body]).reshape(-1, ny)
    truth = np.array([[float(r[c]) for c in tcols] for r in body]).reshape(len(body), len(tcols))
    return Dataset(truth, y)


SUMMARY_COLUMNS = ["filter", "seed", "rmse", "max_abs_err", "status"]


def max_workers(n_jobs: int) -> int:
    env = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return max(1, min(cap, n_jobs))


def run_all(cfg: ExperimentConfig, data: Dataset | None = None) -> list[SeedResult]:
    seeds = list(cfg.seeds)
    workers = max_workers(len(seeds))
    if workers == 1 or data is not None:
        return [run_seed(cfg, s, data) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, [cfg] * len(seeds), seeds))


def run(cfg: ExperimentConfig, out_dir=None, data: Dataset | None = None, table: bool = False) -> int:
    """Run every filter on every seed and write CSVs. Returns the exit status."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scen = build_scenario(cfg)
    results = run_all(cfg, data)
    summary = []
    diverged = False
    for res in results:
        for fc in cfg.filters:
            write_step_csv(out / f"{fc.name}_seed{res.seed}.csv", scen, res.data,
                           res.outputs[fc.name], cfg.horizon)
            rmse, mx = seed_metrics(cfg, res, fc.name)
            summary.append((fc.name, res.seed, rmse, mx, res.status[fc.name]))
            diverged |= res.status[fc.name] != "ok"
    aggregates = {}
    for fc in cfg.filters:
        rows = [(r, m) for n, _, r, m, st in summary if n == fc.name and st == "ok"]
        aggregates[fc.name] = sc.aggregate(rows)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for name, seed, rmse, mx, st in summary:
            w.writerow([name, seed, _fmt(rmse), _fmt(mx), st])
        for fc in cfg.filters:
            rmse, mx = aggregates[fc.name]
            n_ok = sum(1 for n, *_, st in summary if n == fc.name and st == "ok")
            w.writerow([fc.name, "all", _fmt(rmse), _fmt(mx), f"ok {n_ok}/{len(results)}"])
    if table:
        with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric"] + [fc.name for fc in cfg.filters])
            w.writerow(["max abs error"] + [_fmt(aggregates[fc.name][1]) for fc in cfg.filters])
            w.writerow(["avg. RMSE"] + [_fmt(aggregates[fc.name][0]) for fc in cfg.filters])
    return 2 if diverged else 0


def simulate_only(cfg: ExperimentConfig, out_dir=None) -> int:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        write_data_csv(out / f"data_seed{seed}.csv", simulate(cfg, seed))
    return 0
