"""Exact Gaussian inference for one parameter draw: forward filtering with
observed-data log-likelihood increments, backward sampling for smoothing,
within-sample prediction, and multi-step forecasting.

Two implementations of the same recursion live here on purpose:

* the single-state functions (`filter_init`, `filter_step`) are the readable
  reference path, written in plain 2-D linear algebra;
* `FilterBank` advances a whole stack of parameter draws in lockstep with
  batched array ops, which is what makes sequential runs over thousands of
  draws tractable.

A property test pins the two paths against each other; the oracle tests pin
the reference path against a direct joint-Gaussian construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    DlmSpec,
    StaticParams,
    SystemMatrices,
    assemble_mats,
    build_spatial_K,
    is_identity_transition,
    obs_matrix,
    transition_matrix,
)
from .numerics import LOG_2PI, NumericalError, chol_jitter, symmetrize


class OrderingError(ValueError):
    """Observation times must be strictly increasing."""


@dataclass(frozen=True)
class StatePrior:
    """Gaussian prior N(m0, C0) on the initial stacked state."""

    m0: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float))
        object.__setattr__(self, "C0", np.asarray(self.C0, dtype=float))


@dataclass
class FilterState:
    """Filtering posterior after the last assimilated observation.

    m: (p,) posterior mean; C: (p, p) posterior covariance;
    loglik_total: accumulated log observed-data likelihood;
    loglik_window: same, accumulated since the current window start;
    t_last: time (hours) of the last assimilated observation.
    """

    m: np.ndarray
    C: np.ndarray
    loglik_total: float = 0.0
    loglik_window: float = 0.0
    t_last: float = 0.0

    def copy(self) -> "FilterState":
        return FilterState(self.m.copy(), self.C.copy(),
                           self.loglik_total, self.loglik_window, self.t_last)


@dataclass
class SmoothingDraw:
    """One joint draw of the state path given all observations."""

    times: np.ndarray
    states: np.ndarray  # (n, p)


def _record_mask(obs, variable: str) -> np.ndarray:
    return np.isfinite(np.asarray(getattr(obs, variable), dtype=float))


def _record_values(obs, variable: str, incidence) -> np.ndarray:
    vals = np.asarray(getattr(obs, variable), dtype=float)
    return vals[incidence.indices]


def _observe(m, C, F, Vtilde, x, t):
    """Conditional-Gaussian update; returns (m, C, loglik_increment)."""
    if x.size == 0:
        return m, C, 0.0
    S = C @ F.T
    Q = F @ S + Vtilde
    try:
        Lc, jit = chol_jitter(Q)
    except NumericalError as e:
        raise NumericalError(f"innovation covariance at t={t}: {e}") from e
    if jit:
        Q = Q + jit * np.eye(Q.shape[0])
    resid = x - F @ m
    z = np.linalg.solve(Lc, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(Lc)))
    inc = -0.5 * (x.size * LOG_2PI + logdet + z @ z)
    gain = np.linalg.solve(Q, S.T).T  # C Fᵀ Q⁻¹
    m = m + gain @ resid
    C = symmetrize(C - gain @ S.T)
    return m, C, float(inc)


def filter_init(prior: StatePrior, obs, mats: SystemMatrices,
                variable: str = "temperature"):
    """Assimilate the first observation (no propagation).

    Returns (FilterState, loglik_increment). An all-missing first record
    leaves the prior untouched with a zero increment.
    """
    x = _record_values(obs, variable, mats.incidence)
    m, C, inc = _observe(prior.m0, prior.C0.copy(), mats.F, mats.Vtilde, x, obs.time)
    return FilterState(m=m, C=symmetrize(C), loglik_total=inc,
                       loglik_window=inc, t_last=float(obs.time)), inc


def filter_step(state: FilterState, obs, mats: SystemMatrices,
                variable: str = "temperature"):
    """Propagate to obs.time and assimilate the observed sites.

    mats must be assembled with dt = obs.time - state.t_last. All-missing
    records are pure propagation steps with a zero increment.
    """
    if obs.time <= state.t_last:
        raise OrderingError(f"time {obs.time} not after {state.t_last}")
    m, C = state.m, state.C
    if mats.G is not None:
        m = mats.G @ m
        C = mats.G @ C @ mats.G.T
    R = symmetrize(C + mats.Wtilde)
    x = _record_values(obs, variable, mats.incidence)
    m, C, inc = _observe(m, R, mats.F, mats.Vtilde, x, obs.time)
    return FilterState(
        m=m,
        C=symmetrize(C),
        loglik_total=state.loglik_total + inc,
        loglik_window=state.loglik_window + inc,
        t_last=float(obs.time),
    ), inc


@dataclass
class FilterRun:
    """Output of a full forward pass."""

    state: FilterState
    increments: np.ndarray
    history: list[FilterState] | None = None


def run_filter(
    spec: DlmSpec,
    params: StaticParams,
    records,
    prior: StatePrior | None = None,
    start: FilterState | None = None,
    store_history: bool = False,
    variable: str | None = None,
) -> FilterRun:
    """Forward-filter a record sequence from a prior or a mid-stream state.

    History (one FilterState per record) is stored only on request; it is
    what the backward sampler consumes.
    """
    if (prior is None) == (start is None):
        raise ValueError("pass exactly one of prior, start")
    variable = variable or spec.observable
    state = None if start is None else start.copy()
    increments = np.zeros(len(records))
    history: list[FilterState] | None = [] if store_history else None
    for i, obs in enumerate(records):
        mask = _record_mask(obs, variable)
        regressors = obs.temperature if spec.needs_regressors else None
        if state is None:
            mats = assemble_mats(spec, params, obs.time, mask, None, regressors)
            state, inc = filter_init(prior, obs, mats, variable)
        else:
            dt = float(obs.time) - state.t_last
            mats = assemble_mats(spec, params, obs.time, mask, dt, regressors)
            state, inc = filter_step(state, obs, mats, variable)
        increments[i] = inc
        if history is not None:
            history.append(state.copy())
    return FilterRun(state=state, increments=increments, history=history)


def backward_sample(history, params: StaticParams, spec: DlmSpec, rng) -> SmoothingDraw:
    """Draw one state path from the joint smoothing distribution.

    history: FilterState per observation time, from a forward pass with
    store_history=True. Recurses from a terminal-filter draw through the
    conditionals N(m + B(θ' − G m), C − B R Bᵀ), B = C Gᵀ R⁻¹,
    R = G C Gᵀ + W̃.
    """
    if not history:
        raise ValueError("empty filter history")
    n = len(history)
    p = history[-1].m.size
    K = build_spatial_K(spec, params)
    diag_w = np.diag(params.w.ravel())
    states = np.zeros((n, p))
    times = np.array([h.t_last for h in history])

    Lc, _ = chol_jitter(history[-1].C)
    states[-1] = history[-1].m + Lc @ rng.standard_normal(p)
    for i in range(n - 2, -1, -1):
        h = history[i]
        dt = times[i + 1] - times[i]
        G = None if is_identity_transition(spec) else transition_matrix(spec, dt)
        Wt = dt * diag_w + K
        if G is None:
            R = symmetrize(h.C + Wt)
            CGt = h.C
            pred_mean = h.m
        else:
            R = symmetrize(G @ h.C @ G.T + Wt)
            CGt = h.C @ G.T
            pred_mean = G @ h.m
        B = np.linalg.solve(R, CGt.T).T  # C Gᵀ R⁻¹
        mean = h.m + B @ (states[i + 1] - pred_mean)
        cov = symmetrize(h.C - B @ R @ B.T)
        Lc, _ = chol_jitter(cov)
        states[i] = mean + Lc @ rng.standard_normal(p)
    return SmoothingDraw(times=times, states=states)


def predict_within_sample(draw: SmoothingDraw, params: StaticParams,
                          spec: DlmSpec, rng, regressors=None) -> np.ndarray:
    """Sample observations at every site and time of a smoothing draw.

    Returns (n, L) draws from N(F θ_t, diag(V)) with the full observation
    matrix (not incidence-projected). For the humidity family, `regressors`
    must give the per-time, per-site temperatures; sites without a regressor
    at a time get NaN.
    """
    n = draw.states.shape[0]
    L = spec.n_sites
    out = np.full((n, L), np.nan)
    sd = np.sqrt(params.v)
    for i in range(n):
        if spec.needs_regressors:
            reg = np.asarray(regressors[i], dtype=float)
            have = np.isfinite(reg)
            if not have.any():
                continue
            F = obs_matrix(spec, draw.times[i], regressors=reg, mask=have)
            mean = F @ draw.states[i]
            vals = mean + sd * rng.standard_normal(L)
            out[i, have] = vals[have]
        else:
            F = obs_matrix(spec, draw.times[i])
            out[i] = F @ draw.states[i] + sd * rng.standard_normal(L)
    return out


def forecast(state: FilterState, horizon_steps: int, step_hours: float,
             params: StaticParams, spec: DlmSpec, rng,
             n_draws: int = 1000, regressors=None) -> np.ndarray:
    """Sample future observations by propagating state paths forward.

    Returns (horizon_steps, n_draws, L) observation draws: state paths are
    drawn from the current filtering posterior and advanced step by step
    with fresh system noise; each step emits N(F θ, diag(V)) draws at every
    site. For the humidity family, `regressors` must give (horizon_steps, L)
    future temperatures.
    """
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    p = state.m.size
    L = spec.n_sites
    K = build_spatial_K(spec, params)
    Wt = step_hours * np.diag(params.w.ravel()) + K
    Lw, _ = chol_jitter(Wt) if np.any(np.diag(Wt) > 0) else (np.zeros((p, p)), 0.0)
    G = None if is_identity_transition(spec) else transition_matrix(spec, step_hours)
    if np.all(state.C == 0.0):
        theta = np.tile(state.m, (n_draws, 1))
    else:
        Lc, _ = chol_jitter(state.C)
        theta = state.m + rng.standard_normal((n_draws, p)) @ Lc.T
    sd_obs = np.sqrt(params.v)
    out = np.zeros((horizon_steps, n_draws, L))
    for h in range(horizon_steps):
        t = state.t_last + (h + 1) * step_hours
        if G is not None:
            theta = theta @ G.T
        theta = theta + rng.standard_normal((n_draws, p)) @ Lw.T
        if spec.needs_regressors:
            reg = np.asarray(regressors[h], dtype=float)
            F = obs_matrix(spec, t, regressors=reg)
        else:
            F = obs_matrix(spec, t)
        out[h] = theta @ F.T + sd_obs * rng.standard_normal((n_draws, L))
    return out


def forecast_moments(state: FilterState, horizon_steps: int, step_hours: float,
                     params: StaticParams, spec: DlmSpec, regressors=None):
    """Exact per-horizon predictive mean and covariance for one parameter draw.

    Returns (means (h, L), covs (h, L, L)).
    """
    K = build_spatial_K(spec, params)
    Wt = step_hours * np.diag(params.w.ravel()) + K
    G = None if is_identity_transition(spec) else transition_matrix(spec, step_hours)
    m, P = state.m.copy(), state.C.copy()
    means = np.zeros((horizon_steps, spec.n_sites))
    covs = np.zeros((horizon_steps, spec.n_sites, spec.n_sites))
    for h in range(horizon_steps):
        t = state.t_last + (h + 1) * step_hours
        if G is not None:
            m = G @ m
            P = G @ P @ G.T
        P = symmetrize(P + Wt)
        if spec.needs_regressors:
            F = obs_matrix(spec, t, regressors=np.asarray(regressors[h], dtype=float))
        else:
            F = obs_matrix(spec, t)
        means[h] = F @ m
        covs[h] = F @ P @ F.T + np.diag(params.v)
    return means, covs


class FilterBank:
    """The forward recursion for a stack of parameter draws, in lockstep.

    Arrays: m (N, p), C (N, p, p), loglik_total (N,), loglik_window (N,).
    The bank itself is parameter-agnostic: callers pass per-draw system
    noise (Wtilde stack) and observation variances per step.
    """

    def __init__(self, m: np.ndarray, C: np.ndarray,
                 loglik_total: np.ndarray | None = None,
                 loglik_window: np.ndarray | None = None,
                 t_last: float = 0.0):
        self.m = np.array(m, dtype=float)
        self.C = np.array(C, dtype=float)
        n = self.m.shape[0]
        self.loglik_total = np.zeros(n) if loglik_total is None else np.array(loglik_total, dtype=float)
        self.loglik_window = np.zeros(n) if loglik_window is None else np.array(loglik_window, dtype=float)
        self.t_last = float(t_last)

    @classmethod
    def from_prior(cls, prior: StatePrior, n: int) -> "FilterBank":
        p = prior.m0.size
        m = np.tile(prior.m0, (n, 1))
        C = np.tile(prior.C0, (n, 1, 1))
        return cls(m, C)

    @property
    def n(self) -> int:
        return int(self.m.shape[0])

    def copy(self) -> "FilterBank":
        out = FilterBank(self.m, self.C, self.loglik_total, self.loglik_window,
                         self.t_last)
        return out

    def take(self, idx: np.ndarray) -> None:
        """Reindex every per-draw array (ancestor selection)."""
        self.m = self.m[idx].copy()
        self.C = self.C[idx].copy()
        self.loglik_total = self.loglik_total[idx].copy()
        self.loglik_window = self.loglik_window[idx].copy()

    def set_rows(self, rows: np.ndarray, other: "FilterBank",
                 other_rows: np.ndarray | None = None) -> None:
        src = slice(None) if other_rows is None else other_rows
        self.m[rows] = other.m[src]
        self.C[rows] = other.C[src]
        self.loglik_total[rows] = other.loglik_total[src]
        self.loglik_window[rows] = other.loglik_window[src]

    def _observe(self, F: np.ndarray, x: np.ndarray, vdiag: np.ndarray,
                 t: float) -> np.ndarray:
        r = x.size
        if r == 0:
            return np.zeros(self.n)
        S = self.C @ F.T                              # (N, p, r)
        Q = np.einsum("ij,njk->nik", F, S)            # (N, r, r)
        ar = np.arange(r)
        Q[:, ar, ar] += vdiag
        try:
            Lc, jit = chol_jitter(Q)
        except NumericalError as e:
            raise NumericalError(f"innovation covariance at t={t}: {e}") from e
        if jit:
            Q[:, ar, ar] += jit
        resid = x[None, :] - self.m @ F.T             # (N, r)
        z = np.linalg.solve(Lc, resid[:, :, None])[:, :, 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(Lc, axis1=1, axis2=2)), axis=1)
        inc = -0.5 * (r * LOG_2PI + logdet + np.sum(z * z, axis=1))
        gain_t = np.linalg.solve(Q, np.swapaxes(S, 1, 2))  # (N, r, p) = Q⁻¹ Fᵀ C
        self.m = self.m + np.einsum("nrp,nr->np", gain_t, resid)
        self.C = symmetrize(self.C - S @ gain_t)
        return inc

    def init_obs(self, F: np.ndarray, x: np.ndarray, vdiag: np.ndarray,
                 t: float) -> np.ndarray:
        """First observation: update only, no propagation."""
        inc = self._observe(F, x, vdiag, t)
        self.loglik_total += inc
        self.loglik_window += inc
        self.t_last = float(t)
        return inc

    def step(self, F: np.ndarray, x: np.ndarray, vdiag: np.ndarray,
             G: np.ndarray | None, Wt: np.ndarray, t: float) -> np.ndarray:
        """Propagate every draw by one observation interval and assimilate."""
        if t <= self.t_last:
            raise OrderingError(f"time {t} not after {self.t_last}")
        if G is not None:
            self.m = self.m @ G.T
            self.C = np.matmul(np.matmul(G, self.C), G.T)
        self.C = symmetrize(self.C + Wt)
        inc = self._observe(F, x, vdiag, t)
        self.loglik_total += inc
        self.loglik_window += inc
        self.t_last = float(t)
        return inc

    def state(self, k: int) -> FilterState:
        """Single-draw view as a FilterState (copied)."""
        return FilterState(self.m[k].copy(), self.C[k].copy(),
                           float(self.loglik_total[k]),
                           float(self.loglik_window[k]), self.t_last)
