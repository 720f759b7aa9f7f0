"""Observation records, synthetic series, and CSV ingest/emit.

Two on-disk formats:

* canonical — `t_hours, site, temp, humidity, temp_missing, humidity_missing`,
  one row per (time, site), floats written with repr so ingest(emit(x)) == x.
  Lines starting with `#` are metadata comments and are skipped.
* raw — `timestamp_iso8601, site, variable, value` with variable in
  {temperature, humidity}; readings are averaged into hourly buckets and the
  first bucket becomes t=0.

A humidity reading at a site whose temperature is missing is unusable (the
conditional model has no regressor there). Canonical files are rejected on
such rows; raw ingest masks the humidity value and reports how many were
dropped.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .filter import StatePrior
from .model import DlmSpec, Location, StaticParams, build_spatial_K, obs_matrix, transition_matrix
from .numerics import chol_jitter

CANONICAL_HEADER = ("t_hours", "site", "temp", "humidity",
                    "temp_missing", "humidity_missing")
RAW_HEADER = ("timestamp_iso8601", "site", "variable", "value")


class DataError(ValueError):
    pass


@dataclass
class ObservationRecord:
    """One time point across all sites; NaN marks a missing reading.

    humidity is always an (L,) array; pass None for temperature-only series.
    Construction rejects humidity readings without a temperature reading at
    the same site.
    """

    time: float
    temperature: np.ndarray
    humidity: np.ndarray | None = None

    def __post_init__(self):
        self.time = float(self.time)
        self.temperature = np.asarray(self.temperature, dtype=float).reshape(-1)
        if self.humidity is None:
            self.humidity = np.full(self.temperature.shape, np.nan)
        else:
            self.humidity = np.asarray(self.humidity, dtype=float).reshape(-1)
        if self.humidity.shape != self.temperature.shape:
            raise DataError("temperature and humidity lengths differ")
        bad = np.isfinite(self.humidity) & ~np.isfinite(self.temperature)
        if bad.any():
            raise DataError(
                f"humidity without temperature at t={self.time} "
                f"site(s) {np.flatnonzero(bad).tolist()}")

    @property
    def n_sites(self) -> int:
        return int(self.temperature.size)

    @property
    def temperature_mask(self) -> np.ndarray:
        return np.isfinite(self.temperature)

    @property
    def humidity_mask(self) -> np.ndarray:
        return np.isfinite(self.humidity)


def validate_series(records) -> int:
    """Check increasing times and a constant site count; returns n_sites."""
    records = list(records)
    if not records:
        raise DataError("empty series")
    L = records[0].n_sites
    prev = -math.inf
    for r in records:
        if r.n_sites != L:
            raise DataError(f"site count changes at t={r.time}")
        if r.time <= prev:
            raise DataError(f"times not strictly increasing at t={r.time}")
        prev = r.time
    return L


# ---------------------------------------------------------------------------
# synthetic series


@dataclass
class SyntheticConfig:
    """Ground truth for a simulated run.

    Humidity is generated only when humidity_truths is given; its regressor
    is the noisy simulated temperature, and it inherits temperature's
    missingness pattern (plus any extra outages already encoded there).
    """

    sites: tuple
    truths: StaticParams
    state_prior: StatePrior
    n: int
    spacing_hours: float = 1.0
    family: str = "sinusoid"
    q: int = 0
    times: np.ndarray | None = None
    humidity_truths: StaticParams | None = None
    humidity_state_prior: StatePrior | None = None
    missing_prob: float = 0.0
    outages: tuple = ()  # (site_index, t_start, t_end) triples

    @property
    def spec(self) -> DlmSpec:
        return DlmSpec(family=self.family, locations=tuple(self.sites), q=self.q)

    @property
    def humidity_spec(self) -> DlmSpec:
        return DlmSpec(family="humidity", locations=tuple(self.sites))

    def grid(self) -> np.ndarray:
        if self.times is not None:
            t = np.asarray(self.times, dtype=float)
            if np.any(np.diff(t) <= 0):
                raise DataError("times must be strictly increasing")
            return t
        return np.arange(self.n, dtype=float) * self.spacing_hours


def _sample_states(spec: DlmSpec, params: StaticParams, prior: StatePrior,
                   times: np.ndarray, rng) -> np.ndarray:
    p = spec.state_dim
    K = build_spatial_K(spec, params)
    diag_w = params.w.reshape(-1)
    theta = np.empty((times.size, p))
    L0, _ = chol_jitter(prior.C0)
    theta[0] = prior.m0 + L0 @ rng.standard_normal(p)
    for i in range(1, times.size):
        dt = times[i] - times[i - 1]
        G = transition_matrix(spec, dt)
        cov = K + np.diag(dt * diag_w)
        Lc, _ = chol_jitter(cov)
        theta[i] = G @ theta[i - 1] + Lc @ rng.standard_normal(p)
    return theta


def simulate(config: SyntheticConfig, rng):
    """Draw states and observations; returns (states, records).

    states maps channel name to its (n, state_dim) path. Records carry NaN
    where the missingness pattern strikes; humidity is masked wherever
    temperature is.
    """
    times = config.grid()
    n = times.size
    spec = config.spec
    L = spec.n_sites
    theta = _sample_states(spec, config.truths, config.state_prior, times, rng)
    sd_v = np.sqrt(config.truths.v)
    temp = np.empty((n, L))
    for i, t in enumerate(times):
        F = obs_matrix(spec, t)
        temp[i] = F @ theta[i] + sd_v * rng.standard_normal(L)

    states = {"temperature": theta}
    hum = None
    if config.humidity_truths is not None:
        hspec = config.humidity_spec
        hprior = config.humidity_state_prior
        if hprior is None:
            raise DataError("humidity_truths given without humidity_state_prior")
        theta_h = _sample_states(hspec, config.humidity_truths, hprior, times, rng)
        sd_h = np.sqrt(config.humidity_truths.v)
        hum = np.empty((n, L))
        for i, t in enumerate(times):
            F = obs_matrix(hspec, t, regressors=temp[i])
            hum[i] = F @ theta_h[i] + sd_h * rng.standard_normal(L)
        states["humidity"] = theta_h

    miss = rng.random((n, L)) < config.missing_prob
    for (j, t0, t1) in config.outages:
        miss[(times >= t0) & (times <= t1), int(j)] = True
    records = []
    for i, t in enumerate(times):
        x = np.where(miss[i], np.nan, temp[i])
        y = None if hum is None else np.where(miss[i], np.nan, hum[i])
        records.append(ObservationRecord(time=float(t), temperature=x, humidity=y))
    return states, records


# ---------------------------------------------------------------------------
# CSV


@dataclass
class IngestReport:
    sites: list = field(default_factory=list)
    rows: int = 0
    records: int = 0
    co_missing_masked: int = 0
    empty_hours_dropped: int = 0
    averaged_buckets: int = 0


def _numbered_rows(path):
    """Yield (line_number, parsed_row), skipping comments and blank lines."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, next(csv.reader([line]))


def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric {what} {text!r}") from None


def _site_index(label: str, site_map, order: dict, lineno: int) -> int:
    if site_map is not None:
        if label not in site_map:
            raise DataError(f"line {lineno}: unknown site {label!r}")
        return site_map[label]
    if label not in order:
        order[label] = len(order)
    return order[label]


def _optional_value(text: str, flag: str, lineno: int, what: str) -> float:
    if flag.strip() == "1" or not text.strip():
        return math.nan
    return _parse_float(text, lineno, what)


def _ingest_canonical(rows, site_map, report: IngestReport):
    order: dict = {} if site_map is None else dict(site_map)
    cells: dict = {}
    for lineno, row in rows:
        if len(row) != 6:
            raise DataError(f"line {lineno}: expected 6 columns, got {len(row)}")
        t = _parse_float(row[0], lineno, "time")
        j = _site_index(row[1].strip(), site_map, order, lineno)
        x = _optional_value(row[2], row[4], lineno, "temperature")
        y = _optional_value(row[3], row[5], lineno, "humidity")
        if math.isfinite(y) and not math.isfinite(x):
            raise DataError(
                f"line {lineno}: humidity reading without temperature")
        cells.setdefault(t, {})[j] = (x, y)
        report.rows += 1
    L = len(order)
    records = []
    for t in sorted(cells):
        temp = np.full(L, np.nan)
        hum = np.full(L, np.nan)
        for j, (x, y) in cells[t].items():
            temp[j], hum[j] = x, y
        records.append(ObservationRecord(time=t, temperature=temp, humidity=hum))
    report.sites = sorted(order, key=order.get)
    return records


_VARIABLE_ALIASES = {
    "temperature": "temperature", "temp": "temperature",
    "humidity": "humidity", "hum": "humidity",
}


def _ingest_raw(rows, site_map, drop_empty_hours: bool, report: IngestReport):
    order: dict = {} if site_map is None else dict(site_map)
    sums: dict = {}
    counts: dict = {}
    for lineno, row in rows:
        if len(row) != 4:
            raise DataError(f"line {lineno}: expected 4 columns, got {len(row)}")
        try:
            ts = datetime.fromisoformat(row[0].strip())
        except ValueError:
            raise DataError(f"line {lineno}: bad timestamp {row[0]!r}") from None
        j = _site_index(row[1].strip(), site_map, order, lineno)
        var = _VARIABLE_ALIASES.get(row[2].strip().lower())
        if var is None:
            raise DataError(f"line {lineno}: unknown variable {row[2]!r}")
        if not row[3].strip():
            continue
        value = _parse_float(row[3], lineno, "value")
        bucket = ts.replace(minute=0, second=0, microsecond=0)
        key = (bucket, j, var)
        sums[key] = sums.get(key, 0.0) + value
        counts[key] = counts.get(key, 0) + 1
        report.rows += 1
    if not sums:
        raise DataError("no readings found")
    report.averaged_buckets = sum(1 for c in counts.values() if c > 1)
    buckets = sorted({b for (b, _, _) in sums})
    first, last = buckets[0], buckets[-1]
    if drop_empty_hours:
        grid = buckets
        span_hours = int((last - first).total_seconds() // 3600)
        report.empty_hours_dropped = span_hours + 1 - len(buckets)
    else:
        n_hours = int((last - first).total_seconds() // 3600) + 1
        grid = [first + timedelta(hours=h) for h in range(n_hours)]
    L = len(order)
    records = []
    for bucket in grid:
        t = (bucket - first).total_seconds() / 3600.0
        temp = np.full(L, np.nan)
        hum = np.full(L, np.nan)
        for j in range(L):
            kx = (bucket, j, "temperature")
            ky = (bucket, j, "humidity")
            if kx in sums:
                temp[j] = sums[kx] / counts[kx]
            if ky in sums:
                hum[j] = sums[ky] / counts[ky]
        orphan = np.isfinite(hum) & ~np.isfinite(temp)
        if orphan.any():
            report.co_missing_masked += int(orphan.sum())
            hum[orphan] = np.nan
        records.append(ObservationRecord(time=t, temperature=temp, humidity=hum))
    if report.co_missing_masked:
        warnings.warn(
            f"masked {report.co_missing_masked} humidity reading(s) with no "
            "temperature reading in the same hour", stacklevel=3)
    report.sites = sorted(order, key=order.get)
    return records


def ingest_csv(path, site_map: dict | None = None, *,
               drop_empty_hours: bool = True, return_report: bool = False):
    """Read a canonical or raw CSV into observation records.

    The format is detected from the header row. site_map fixes the
    label-to-index assignment (unknown labels become errors); without it
    sites are numbered in order of first appearance. Returns the record
    list, or (records, IngestReport) with return_report=True.
    """
    rows = _numbered_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataError("empty file") from None
    head = [c.strip().lower() for c in header]
    report = IngestReport()
    if head[0] == CANONICAL_HEADER[0]:
        if tuple(head) != CANONICAL_HEADER:
            raise DataError(f"line {lineno}: bad canonical header {header!r}")
        records = _ingest_canonical(rows, site_map, report)
    elif head[0].startswith("timestamp"):
        if len(head) != 4:
            raise DataError(f"line {lineno}: bad raw header {header!r}")
        records = _ingest_raw(rows, site_map, drop_empty_hours, report)
    else:
        raise DataError(f"line {lineno}: unrecognized header {header!r}")
    report.records = len(records)
    validate_series(records)
    return (records, report) if return_report else records


def _cell(value: float) -> str:
    return "" if not math.isfinite(value) else repr(float(value))


def emit_series(records, path, site_names=None, meta: dict | None = None) -> None:
    """Write records as a canonical CSV (exact float round-trip via repr).

    meta key/value pairs become leading `#` comment lines.
    """
    records = list(records)
    L = validate_series(records)
    if site_names is None:
        site_names = [f"site{j}" for j in range(L)]
    if len(site_names) != L:
        raise DataError("site_names length does not match the records")
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow(CANONICAL_HEADER)
        for r in records:
            for j in range(L):
                writer.writerow([
                    repr(float(r.time)),
                    site_names[j],
                    _cell(r.temperature[j]),
                    _cell(r.humidity[j]),
                    0 if math.isfinite(r.temperature[j]) else 1,
                    0 if math.isfinite(r.humidity[j]) else 1,
                ])


def default_sites(n: int = 2) -> tuple:
    """Evenly spread demo locations, 10 km apart along a line."""
    return tuple(Location(id=j, name=f"site{j}", easting_km=10.0 * j,
                          northing_km=0.0) for j in range(n))
