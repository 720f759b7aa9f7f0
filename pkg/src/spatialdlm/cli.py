"""Command-line front end.

Subcommands: simulate, fit, forecast, predict, compare. Settings come from
an optional `key = value` config file plus flag overrides (flags win); a
seed is always required. Every artifact CSV starts with `# config_hash=...`
and `# seed=...` comment lines, and every run directory gets a `run.meta`
with the fully resolved settings, so outputs are traceable to exact inputs.

Config keys mirror the flag names (underscores for dashes). Repeatable keys:
`site = name,east_km,north_km` and `outage = site_index,t_start,t_end`.
Truth keys for simulate (`truth_w`, `truth_v`, `truth_sigma2`, `truth_psi`,
and `hum_*` twins) accept a scalar, a per-component list, or a full
site-by-component list.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import math
import sys
import time
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    ObservationRecord,
    SyntheticConfig,
    default_sites,
    emit_series,
    ingest_csv,
    simulate,
)
from .filter import (
    FilterState,
    StatePrior,
    backward_sample,
    forecast,
    predict_within_sample,
    run_filter,
)
from .ibis import IbisConfig, PriorSpec, log_bayes_factor, run_online_ibis
from .model import DlmSpec, Location, ModelError, StaticParams
from .numerics import weighted_quantile
from .parallel import BatchDiagnostics, BatchPlan, run_batched


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    seed: int | None = None
    model: str = "sinusoid"
    particles: int = 10000
    delta: float = 0.5
    window: float = math.inf
    batches: int = 1
    workers: int = 1
    rejuvenation_period: int = 0  # 0 = auto: none serially, 20 when batched
    mh_steps: int = 1
    data: str = ""
    out: str = "run"
    fit_dir: str = ""
    regressor_data: str = ""
    sites: list = field(default_factory=list)  # (name, east_km, north_km)
    prior_shape: float = 1.0
    prior_scale: float = 0.01
    prior_bound: float = 10.0
    constrain_w_lt_v: bool = False
    state_mean: list = field(default_factory=list)  # one per-site block
    state_var: float = 1.0
    n: int = 1300
    spacing_hours: float = 1.0
    missing_prob: float = 0.0
    outages: list = field(default_factory=list)  # (site, t_start, t_end)
    truth_w: list = field(default_factory=lambda: [0.01])
    truth_v: list = field(default_factory=lambda: [1.0])
    truth_sigma2: list = field(default_factory=lambda: [1.0])
    truth_psi: list = field(default_factory=lambda: [0.01])
    humidity: bool = False
    hum_state_mean: list = field(default_factory=list)
    hum_state_var: float = 1.0
    hum_w: list = field(default_factory=lambda: [0.01])
    hum_v: list = field(default_factory=lambda: [1.0])
    hum_sigma2: list = field(default_factory=lambda: [0.1])
    hum_psi: list = field(default_factory=lambda: [0.01])
    horizon: int = 24
    step_hours: float = 1.0
    draws: int = 0  # 0 = per-command default
    models: list = field(default_factory=list)
    replicates: int = 1
    subsample_sites: int = 0
    subsample_length: int = 0


def _cast_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _cast_float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"not a number list: {text!r}") from None


def _cast_site(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or not parts[0]:
        raise ConfigError(f"site needs name,east_km,north_km: {text!r}")
    try:
        return (parts[0], float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigError(f"bad site coordinates: {text!r}") from None


def _cast_outage(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"outage needs site,t_start,t_end: {text!r}")
    try:
        return (int(parts[0]), float(parts[1]), float(parts[2]))
    except ValueError:
        raise ConfigError(f"bad outage: {text!r}") from None


_CASTERS = {
    "seed": int,
    "model": str,
    "particles": int,
    "delta": float,
    "window": float,
    "batches": int,
    "workers": int,
    "rejuvenation_period": int,
    "mh_steps": int,
    "data": str,
    "out": str,
    "fit_dir": str,
    "regressor_data": str,
    "prior_shape": float,
    "prior_scale": float,
    "prior_bound": float,
    "constrain_w_lt_v": _cast_bool,
    "state_mean": _cast_float_list,
    "state_var": float,
    "n": int,
    "spacing_hours": float,
    "missing_prob": float,
    "truth_w": _cast_float_list,
    "truth_v": _cast_float_list,
    "truth_sigma2": _cast_float_list,
    "truth_psi": _cast_float_list,
    "humidity": _cast_bool,
    "hum_state_mean": _cast_float_list,
    "hum_state_var": float,
    "hum_w": _cast_float_list,
    "hum_v": _cast_float_list,
    "hum_sigma2": _cast_float_list,
    "hum_psi": _cast_float_list,
    "horizon": int,
    "step_hours": float,
    "draws": int,
    "models": lambda s: [m.strip() for m in s.split(",") if m.strip()],
    "replicates": int,
    "subsample_sites": int,
    "subsample_length": int,
}


def read_config_file(path) -> dict:
    """Parse `key = value` lines; `site` and `outage` accumulate."""
    vals: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = s.partition("=")
        key, value = key.strip().lower(), value.strip()
        if key == "site":
            vals.setdefault("sites", []).append(_cast_site(value))
        elif key == "outage":
            vals.setdefault("outages", []).append(_cast_outage(value))
        elif key in _CASTERS:
            try:
                vals[key] = _CASTERS[key](value)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: bad value for {key}: {value!r}") from None
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return vals


def build_config(file_vals: dict, args: argparse.Namespace) -> RunConfig:
    """File values first, then flag overrides."""
    cfg = RunConfig()
    for key, val in file_vals.items():
        setattr(cfg, key, val)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is None:
            continue
        if f.name == "models" and isinstance(flag, str):
            flag = _CASTERS["models"](flag)
        setattr(cfg, f.name, flag)
    if cfg.seed is None:
        raise ConfigError("a seed is required (flag --seed or config key seed)")
    return cfg


def _stringify(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(
            ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
            for v in value)
    return str(value)


def resolve_config(cfg: RunConfig, command: str) -> dict:
    """Flat string map of every setting, plus its hash."""
    resolved = {"command": command}
    for f in fields(RunConfig):
        resolved[f.name] = _stringify(getattr(cfg, f.name))
    blob = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    resolved["config_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    return resolved


# ---------------------------------------------------------------------------
# shared builders


def parse_model(text: str):
    """Model selector -> (family, q)."""
    if text == "sinusoid":
        return "sinusoid", 0
    if text == "humidity":
        return "humidity", 0
    if text.startswith("fourier:"):
        try:
            q = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fourier order in {text!r}") from None
        if q < 1:
            raise ConfigError("fourier order must be >= 1")
        return "fourier", q
    raise ConfigError(
        f"unknown model {text!r} (expected sinusoid, fourier:Q or humidity)")


def make_locations(cfg: RunConfig) -> tuple:
    if not cfg.sites:
        raise ConfigError("no sites configured (add `site = name,east,north`)")
    names = [s[0] for s in cfg.sites]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate site names")
    return tuple(Location(id=i, name=s[0], easting_km=s[1], northing_km=s[2])
                 for i, s in enumerate(cfg.sites))


def _default_block_mean(family: str, m: int) -> list:
    if family == "humidity":
        return [-1.0, 90.0]
    return [0.0] * (m - 1) + [17.0]


def make_state_prior(cfg: RunConfig, spec: DlmSpec) -> StatePrior:
    m = spec.state_dim_per_site
    block = cfg.state_mean if len(cfg.state_mean) == m else _default_block_mean(spec.family, m)
    if cfg.state_mean and len(cfg.state_mean) != m:
        raise ConfigError(
            f"state_mean needs {m} values per site for model {cfg.model!r}")
    m0 = np.tile(np.asarray(block, dtype=float), spec.n_sites)
    C0 = cfg.state_var * np.eye(spec.state_dim)
    return StatePrior(m0=m0, C0=C0)


def _family_state_prior(family: str, q: int, n_sites: int, state_var: float) -> StatePrior:
    m = {"sinusoid": 3, "humidity": 2}.get(family, 2 * q + 1)
    block = _default_block_mean(family, m)
    return StatePrior(m0=np.tile(block, n_sites),
                      C0=state_var * np.eye(m * n_sites))


def make_prior(cfg: RunConfig) -> PriorSpec:
    return PriorSpec(shape=cfg.prior_shape, scale=cfg.prior_scale,
                     bound=cfg.prior_bound,
                     constrain_w_lt_v=cfg.constrain_w_lt_v)


def _broadcast_truths(spec: DlmSpec, w, v, sigma2, psi, what: str) -> StaticParams:
    L, m = spec.n_sites, spec.state_dim_per_site

    def expand(vals, want, label):
        vals = list(vals)
        if len(vals) == 1:
            vals = vals * want
        if len(vals) != want:
            raise ConfigError(
                f"{what}_{label} needs 1 or {want} values, got {len(vals)}")
        return np.asarray(vals, dtype=float)

    if len(w) == m:
        w_full = np.tile(w, (L, 1)).reshape(-1)
    else:
        w_full = expand(w, L * m, "w")
    return StaticParams(
        w=w_full.reshape(L, m),
        v=expand(v, L, "v"),
        sigma2=expand(sigma2, m, "sigma2"),
        psi=expand(psi, m, "psi"),
    )


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# artifacts


def _write_csv(path: Path, resolved: dict, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={resolved['config_hash']}\n")
        fh.write(f"# seed={resolved['seed']}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_meta(outdir: Path, resolved: dict) -> None:
    lines = [f"created_utc={datetime.now(timezone.utc).isoformat()}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (outdir / "run.meta").write_text("\n".join(lines) + "\n")


def _r(x) -> str:
    """Exact float cell (plain repr, no numpy scalar wrapper)."""
    return repr(float(x))


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, resolved: dict) -> None:
    family, q = parse_model(cfg.model)
    if family == "humidity":
        raise ConfigError(
            "simulate takes a temperature family; set `humidity = true` "
            "to add the conditional channel")
    locations = make_locations(cfg) if cfg.sites else default_sites(2)
    spec = DlmSpec(family=family, locations=locations, q=q)
    truths = _broadcast_truths(spec, cfg.truth_w, cfg.truth_v,
                               cfg.truth_sigma2, cfg.truth_psi, "truth")
    state_prior = make_state_prior(cfg, spec)
    hum_truths = hum_prior = None
    hspec = DlmSpec(family="humidity", locations=locations)
    if cfg.humidity:
        hum_truths = _broadcast_truths(hspec, cfg.hum_w, cfg.hum_v,
                                       cfg.hum_sigma2, cfg.hum_psi, "hum")
        block = cfg.hum_state_mean or _default_block_mean("humidity", 2)
        if len(block) != 2:
            raise ConfigError("hum_state_mean needs 2 values per site")
        hum_prior = StatePrior(m0=np.tile(np.asarray(block, dtype=float),
                                          spec.n_sites),
                               C0=cfg.hum_state_var * np.eye(2 * spec.n_sites))
    synth = SyntheticConfig(
        sites=locations, truths=truths, state_prior=state_prior, n=cfg.n,
        spacing_hours=cfg.spacing_hours, family=family, q=q,
        humidity_truths=hum_truths, humidity_state_prior=hum_prior,
        missing_prob=cfg.missing_prob, outages=tuple(cfg.outages))
    states, records = simulate(synth, _rng(cfg.seed))

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    names = [loc.name for loc in locations]
    emit_series(records, outdir / "series.csv", site_names=names,
                meta={"config_hash": resolved["config_hash"],
                      "seed": cfg.seed, "command": "simulate"})
    rows = [("temperature", name, _r(val)) for name, val in
            zip(spec.param_names(), truths.to_vector())]
    if hum_truths is not None:
        rows += [("humidity", name, _r(val)) for name, val in
                 zip(hspec.param_names(), hum_truths.to_vector())]
    _write_csv(outdir / "truth_params.csv", resolved,
               ("channel", "param", "value"), rows)
    for channel, theta in states.items():
        header = ["t_hours"] + [f"state{j}" for j in range(theta.shape[1])]
        body = [[_fmt(r.time)] + [_r(x) for x in theta[i]]
                for i, r in enumerate(records)]
        _write_csv(outdir / f"truth_states_{channel}.csv", resolved, header, body)
    write_meta(outdir, resolved)
    print(f"wrote {len(records)} records for {len(locations)} sites to {outdir}")


def _load_records(cfg: RunConfig, locations):
    if not cfg.data:
        raise ConfigError("no data file configured (key `data` or flag --data)")
    site_map = {loc.name: loc.id for loc in locations}
    return ingest_csv(cfg.data, site_map=site_map)


def _engine_settings(cfg: RunConfig, spec: DlmSpec):
    period = cfg.rejuvenation_period
    if cfg.batches > 1:
        if cfg.particles % cfg.batches:
            raise ConfigError(
                f"particles {cfg.particles} not divisible by batches {cfg.batches}")
        period = period or 20
    ibis = IbisConfig(
        n_particles=cfg.particles,
        state_prior=make_state_prior(cfg, spec),
        delta=cfg.delta,
        window_hours=cfg.window,
        rejuvenation_period=period or None,
        mh_steps=cfg.mh_steps,
    )
    return ibis, make_prior(cfg)


def cmd_fit(cfg: RunConfig, resolved: dict) -> None:
    family, q = parse_model(cfg.model)
    locations = make_locations(cfg)
    spec = DlmSpec(family=family, locations=locations, q=q)
    records = _load_records(cfg, locations)
    ibis_config, prior = _engine_settings(cfg, spec)

    start = time.perf_counter()
    if cfg.batches > 1:
        plan = BatchPlan(n_batches=cfg.batches,
                         particles_per_batch=cfg.particles // cfg.batches,
                         master_seed=cfg.seed,
                         rejuvenation_period=ibis_config.rejuvenation_period)
        pset, trace, diags = run_batched(ibis_config, plan, records, prior,
                                         spec, n_workers=cfg.workers)
    else:
        pset, trace = run_online_ibis(ibis_config, records, prior, spec,
                                      _rng(cfg.seed))
        accs = [ev.acceptance for ev in pset.triggers]
        diags = [BatchDiagnostics(
            batch_id=0, trigger_count=len(pset.triggers),
            mean_acceptance=float(np.mean(accs)) if accs else float("nan"),
            n_filter_evals=pset.n_filter_evals,
            wall_time_s=time.perf_counter() - start)]

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    names = spec.param_names()
    weights = pset.weights()
    _write_csv(outdir / "posterior.csv", resolved, ["weight"] + names,
               [[_r(w)] + [_r(x) for x in row]
                for w, row in zip(weights, pset.params)])
    qs = np.stack([weighted_quantile(pset.params[:, j], [0.5, 0.025, 0.975],
                                     weights)
                   for j in range(pset.params.shape[1])], axis=1)
    _write_csv(outdir / "summary.csv", resolved,
               ("param", "median", "q025", "q975"),
               [(name, _r(qs[0, j]), _r(qs[1, j]), _r(qs[2, j]))
                for j, name in enumerate(names)])
    cum = trace.cumulative()
    _write_csv(outdir / "evidence.csv", resolved,
               ("t_hours", "log_factor", "cum_log_evidence"),
               [(_fmt(t), _r(f), _r(c))
                for t, f, c in zip(trace.times, trace.log_factors, cum)])
    if cfg.batches == 1:
        _write_csv(outdir / "triggers.csv", resolved,
                   ("t_hours", "ess", "reason", "acceptance"),
                   [(_fmt(ev.time), _r(ev.ess), ev.reason, _r(ev.acceptance))
                    for ev in pset.triggers])
    _write_csv(outdir / "diagnostics.csv", resolved,
               ("batch", "triggers", "mean_acceptance", "filter_evals",
                "wall_time_s"),
               [(d.batch_id, d.trigger_count, _fmt(d.mean_acceptance),
                 d.n_filter_evals, _r(d.wall_time_s)) for d in diags])
    np.savez(
        outdir / "states.npz",
        params=pset.params,
        log_weights=pset.normalized_log_weights(),
        m=pset.bank.m, C=pset.bank.C,
        loglik_total=pset.bank.loglik_total,
        loglik_window=pset.bank.loglik_window,
        t_last=pset.bank.t_last,
        evidence_times=trace.times, evidence_factors=trace.log_factors,
        family=spec.family, q=spec.q, variable=pset.variable,
        site_names=np.array([loc.name for loc in locations]),
        site_east=np.array([loc.easting_km for loc in locations]),
        site_north=np.array([loc.northing_km for loc in locations]),
        seed=cfg.seed, config_hash=resolved["config_hash"],
    )
    write_meta(outdir, resolved)
    print(f"assimilated {len(records)} records; "
          f"log evidence {trace.log_evidence:.3f}; outputs in {outdir}")


def _load_fit(cfg: RunConfig):
    fit_dir = Path(cfg.fit_dir or cfg.out)
    path = fit_dir / "states.npz"
    if not path.exists():
        raise ConfigError(f"no fitted state at {path} (set fit_dir)")
    z = np.load(path, allow_pickle=False)
    locations = tuple(
        Location(id=i, name=str(n), easting_km=float(e), northing_km=float(v))
        for i, (n, e, v) in enumerate(zip(z["site_names"], z["site_east"],
                                          z["site_north"])))
    spec = DlmSpec(family=str(z["family"]), locations=locations, q=int(z["q"]))
    return z, spec


def _choose_ancestors(z, n_draws: int, rng) -> np.ndarray:
    w = np.exp(z["log_weights"])
    w = w / w.sum()
    return rng.choice(w.size, size=n_draws, replace=True, p=w)


def cmd_forecast(cfg: RunConfig, resolved: dict) -> None:
    z, spec = _load_fit(cfg)
    n_draws = cfg.draws or 2000
    rng = _rng(cfg.seed)
    regressors = None
    if spec.needs_regressors:
        if not cfg.regressor_data:
            raise ConfigError(
                "humidity forecasts need future temperatures "
                "(key/flag regressor_data)")
        future = ingest_csv(cfg.regressor_data,
                            site_map={loc.name: loc.id for loc in spec.locations})
        if len(future) < cfg.horizon:
            raise ConfigError(
                f"regressor data has {len(future)} records, horizon is {cfg.horizon}")
        regressors = np.stack([r.temperature for r in future[: cfg.horizon]])
        if not np.all(np.isfinite(regressors)):
            raise ConfigError("regressor data has missing temperatures "
                              "within the forecast horizon")

    ancestors = _choose_ancestors(z, n_draws, rng)
    uniq, counts = np.unique(ancestors, return_counts=True)
    t_last = float(z["t_last"])
    pools = []
    for k, c in zip(uniq, counts):
        params = StaticParams.from_vector(spec, z["params"][k])
        state = FilterState(z["m"][k].copy(), z["C"][k].copy(),
                            float(z["loglik_total"][k]),
                            float(z["loglik_window"][k]), t_last)
        pools.append(forecast(state, cfg.horizon, cfg.step_hours, params, spec,
                              rng, n_draws=int(c), regressors=regressors))
    pooled = np.concatenate(pools, axis=1)  # (h, n_draws, L)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    names = [loc.name for loc in spec.locations]
    rows = []
    for h in range(cfg.horizon):
        t = t_last + (h + 1) * cfg.step_hours
        lo, med, hi = np.quantile(pooled[h], [0.025, 0.5, 0.975], axis=0)
        mean = pooled[h].mean(axis=0)
        for j, name in enumerate(names):
            rows.append((h + 1, _fmt(t), name, _r(mean[j]), _r(med[j]),
                         _r(lo[j]), _r(hi[j])))
    _write_csv(outdir / "forecast.csv", resolved,
               ("step", "t_hours", "site", "mean", "median", "q025", "q975"),
               rows)
    write_meta(outdir, resolved)
    print(f"forecast {cfg.horizon} steps x {n_draws} draws; outputs in {outdir}")


def cmd_predict(cfg: RunConfig, resolved: dict) -> None:
    z, spec = _load_fit(cfg)
    records = _load_records(cfg, spec.locations)
    variable = str(z["variable"])
    n_draws = cfg.draws or 50
    rng = _rng(cfg.seed)
    ancestors = _choose_ancestors(z, n_draws, rng)
    regressors = None
    if spec.needs_regressors:
        regressors = [r.temperature for r in records]
    state_prior = _family_state_prior(spec.family, spec.q, spec.n_sites,
                                      cfg.state_var)
    draws = np.empty((n_draws, len(records), spec.n_sites))
    for d, k in enumerate(ancestors):
        params = StaticParams.from_vector(spec, z["params"][k])
        run = run_filter(spec, params, records, prior=state_prior,
                         store_history=True, variable=variable)
        path = backward_sample(run.history, params, spec, rng)
        draws[d] = predict_within_sample(path, params, spec, rng,
                                         regressors=regressors)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    names = [loc.name for loc in spec.locations]
    rows = []
    for i, rec in enumerate(records):
        observed = getattr(rec, variable)
        for j, name in enumerate(names):
            vals = draws[:, i, j]
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                rows.append((_fmt(rec.time), name, _fmt(observed[j]),
                             "", "", "", ""))
                continue
            lo, hi = np.quantile(vals, [0.025, 0.975])
            mean = float(vals.mean())
            resid = observed[j] - mean if math.isfinite(observed[j]) else None
            rows.append((_fmt(rec.time), name, _fmt(observed[j]), _r(mean),
                         _r(lo), _r(hi), _fmt(resid)))
    _write_csv(outdir / "prediction.csv", resolved,
               ("t_hours", "site", "observed", "mean", "q025", "q975",
                "residual"), rows)
    write_meta(outdir, resolved)
    print(f"within-sample prediction over {len(records)} records, "
          f"{n_draws} draws; outputs in {outdir}")


def _subsample(records, locations, k_sites: int, length: int, rng):
    """Random site subset and consecutive stretch; times re-zeroed."""
    L = len(locations)
    if k_sites and k_sites < L:
        sites = np.sort(rng.choice(L, size=k_sites, replace=False))
    else:
        sites = np.arange(L)
    recs = list(records)
    if length and length < len(recs):
        start = int(rng.integers(0, len(recs) - length + 1))
        recs = recs[start: start + length]
    t0 = recs[0].time
    new_locs = tuple(
        Location(id=i, name=locations[s].name,
                 easting_km=locations[s].easting_km,
                 northing_km=locations[s].northing_km)
        for i, s in enumerate(sites))
    new_recs = [ObservationRecord(time=r.time - t0,
                                  temperature=r.temperature[sites],
                                  humidity=r.humidity[sites]) for r in recs]
    return new_locs, new_recs


def cmd_compare(cfg: RunConfig, resolved: dict) -> None:
    if len(cfg.models) < 2:
        raise ConfigError("compare needs `models = a,b[,c...]` with >= 2 entries")
    selectors = [(m, *parse_model(m)) for m in cfg.models]
    locations = make_locations(cfg)
    records = _load_records(cfg, locations)
    prior = make_prior(cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)

    bf_rows = []
    terminal_rows = []
    terminals: dict = {}
    for r, seq in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(seq))
        locs_r, recs_r = _subsample(records, locations, cfg.subsample_sites,
                                    cfg.subsample_length, rng)
        traces = {}
        for label, family, q in selectors:
            spec = DlmSpec(family=family, locations=locs_r, q=q)
            state_prior = (make_state_prior(cfg, spec)
                           if len(cfg.state_mean) == spec.state_dim_per_site
                           else _family_state_prior(family, q, spec.n_sites,
                                                    cfg.state_var))
            ibis_config = IbisConfig(
                n_particles=cfg.particles, state_prior=state_prior,
                delta=cfg.delta, window_hours=cfg.window,
                rejuvenation_period=cfg.rejuvenation_period or None,
                mh_steps=cfg.mh_steps)
            _, traces[label] = run_online_ibis(ibis_config, recs_r, prior,
                                               spec, rng)
        for a in range(len(selectors)):
            for b in range(a + 1, len(selectors)):
                la, lb = selectors[a][0], selectors[b][0]
                bf = log_bayes_factor(traces[la], traces[lb])
                times = traces[la].times
                bf_rows += [(r, la, lb, _fmt(float(t)), _r(val))
                            for t, val in zip(times, bf)]
                terminal_rows.append((r, la, lb, _r(bf[-1])))
                terminals.setdefault((la, lb), []).append(float(bf[-1]))

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "bf.csv", resolved,
               ("replicate", "model_a", "model_b", "t_hours", "cum_log_bf"),
               bf_rows)
    for (la, lb), vals in terminals.items():
        terminal_rows.append(("mean", la, lb, _r(np.mean(vals))))
    _write_csv(outdir / "bf_summary.csv", resolved,
               ("replicate", "model_a", "model_b", "terminal_log_bf"),
               terminal_rows)
    write_meta(outdir, resolved)
    for (la, lb), vals in terminals.items():
        print(f"mean terminal log BF {la} over {lb}: {np.mean(vals):.3f} "
              f"({len(vals)} replicate(s))")


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spatialdlm",
        description="Spatial dynamic linear models with sequential "
                    "Monte Carlo parameter inference.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "draw a synthetic multi-site series"),
        ("fit", "run the sequential sampler on a series"),
        ("forecast", "sample future observations from a fitted run"),
        ("predict", "within-sample predictive draws from a fitted run"),
        ("compare", "fit several model families and report Bayes factors"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--particles", type=int)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--window", type=float,
                        help="window width in hours, or inf")
        sp.add_argument("--batches", type=int)
        sp.add_argument("--rejuvenation-period", type=int, dest="rejuvenation_period")
        sp.add_argument("--model")
        sp.add_argument("--constrain-w-lt-v", dest="constrain_w_lt_v",
                        action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--data")
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--mh-steps", type=int, dest="mh_steps")
        sp.add_argument("--n", type=int)
        sp.add_argument("--missing-prob", type=float, dest="missing_prob")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--step-hours", type=float, dest="step_hours")
        sp.add_argument("--draws", type=int)
        sp.add_argument("--models")
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--subsample-sites", type=int, dest="subsample_sites")
        sp.add_argument("--subsample-length", type=int, dest="subsample_length")
        sp.add_argument("--fit-dir", dest="fit_dir")
        sp.add_argument("--regressor-data", dest="regressor_data")
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "predict": cmd_predict,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        file_vals = read_config_file(args.config) if args.config else {}
        cfg = build_config(file_vals, args)
        resolved = resolve_config(cfg, args.command)
        _COMMANDS[args.command](cfg, resolved)
    except (ConfigError, DataError, ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
