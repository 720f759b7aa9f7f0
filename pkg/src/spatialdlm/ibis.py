"""Sequential Monte Carlo over the static parameters.

Particles are parameter draws carrying their own Kalman filter state. Each
observation reweights every particle by its one-step predictive likelihood;
when the effective sample size degrades (or on a fixed schedule) the set is
refreshed by multinomial resampling plus a Metropolis-Hastings move.

Two move flavours:

* full-history move — log-normal random-walk proposal scaled by
  2.38²/n_par times the weighted log-parameter covariance; the acceptance
  ratio recomputes the whole observed-data likelihood from the first record
  and includes prior and (asymmetric) proposal densities.
* windowed move — for bounded-memory online runs the data stream is cut into
  windows of T hours; proposals are independence draws from the weighted
  kernel density estimate of the window-entry cloud (log-normal kernel,
  per-component Silverman bandwidth), the filter is replayed only over the
  current window from the particle's stored window-start snapshot, and the
  acceptance ratio is the window-likelihood ratio alone — exact, because the
  entry-cloud density appears as both prior and proposal and cancels.

Per-time evidence factors are accumulated from pre-update normalized weights
and likelihood increments; their cumulative sums are log marginal
likelihoods, and differences of those are log Bayes factors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import invgamma

from .filter import FilterBank, FilterState, StatePrior, run_filter
from .model import (
    DlmSpec,
    StaticParams,
    is_identity_transition,
    obs_matrix,
    spatial_K_stack,
    transition_matrix,
)
from .numerics import (
    chol_jitter,
    ess_log_weights,
    normalized_log_weights,
    weighted_mean_cov,
    weighted_variance,
)

BANDWIDTH_FLOOR = 1e-12
PROPOSAL_COV_FLOOR = 1e-12


def proposal_gamma(n_free: int) -> float:
    """Random-walk scaling 2.38²/d for a d-dimensional target."""
    return 2.38 ** 2 / n_free


# ---------------------------------------------------------------------------
# prior


@dataclass
class PriorSpec:
    """Independent truncated inverse-Gamma priors on every parameter.

    shape/scale may be scalars or per-component vectors. Components can be
    pinned with `fixed` (NaN = free); pinned components are excluded from
    densities and never perturbed by proposals. `constrain_w_lt_v` adds the
    per-site restriction that every system-noise variance stays below the
    site's observation variance, enforced by rejection at sampling time and
    by zero density in move ratios.
    """

    shape: float | np.ndarray = 1.0
    scale: float | np.ndarray = 0.01
    bound: float = 10.0
    constrain_w_lt_v: bool = False
    fixed: np.ndarray | None = None

    def resolve(self, spec: DlmSpec):
        k = spec.n_params
        shape = np.broadcast_to(np.asarray(self.shape, dtype=float), (k,))
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), (k,))
        return shape, scale

    def free_mask(self, spec: DlmSpec) -> np.ndarray:
        if self.fixed is None:
            return np.ones(spec.n_params, dtype=bool)
        return ~np.isfinite(np.asarray(self.fixed, dtype=float))

    def n_free(self, spec: DlmSpec) -> int:
        return int(self.free_mask(spec).sum())

    def _constraint_ok(self, spec: DlmSpec, phi: np.ndarray) -> np.ndarray:
        if not self.constrain_w_lt_v:
            return np.ones(phi.shape[0], dtype=bool)
        s = spec.param_slices()
        L, m = spec.n_sites, spec.state_dim_per_site
        w = phi[:, s["w"]].reshape(-1, L, m)
        v = phi[:, s["v"]]
        return np.all(w < v[:, :, None], axis=(1, 2))

    def sample(self, spec: DlmSpec, n: int, rng) -> np.ndarray:
        """Draw n parameter vectors by rejection from the untruncated prior."""
        shape, scale = self.resolve(spec)
        k = spec.n_params
        free = self.free_mask(spec)
        phi = np.empty((n, k))
        if not free.all():
            phi[:, ~free] = np.asarray(self.fixed, dtype=float)[~free]
        todo = np.ones(n, dtype=bool) if free.any() else np.zeros(n, dtype=bool)
        while todo.any():
            idx = np.flatnonzero(todo)
            draw = invgamma.rvs(shape[free], scale=scale[free],
                                size=(idx.size, free.sum()), random_state=rng)
            phi[np.ix_(idx, np.flatnonzero(free))] = draw
            ok = np.all(phi[idx][:, free] <= self.bound, axis=1)
            ok &= self._constraint_ok(spec, phi[idx])
            todo[idx[ok]] = False
        return phi

    def in_support(self, spec: DlmSpec, phi: np.ndarray) -> np.ndarray:
        phi = np.atleast_2d(phi)
        free = self.free_mask(spec)
        ok = np.all(phi > 0.0, axis=1)
        ok &= np.all(phi[:, free] <= self.bound, axis=1)
        return ok & self._constraint_ok(spec, phi)

    def log_density(self, spec: DlmSpec, phi: np.ndarray) -> np.ndarray:
        """Normalized truncated density over free components; -inf off support.

        The W<V constraint enters as an unnormalized indicator - its
        normalizing constant cancels in every ratio this is used in.
        """
        phi2 = np.atleast_2d(phi)
        shape, scale = self.resolve(spec)
        free = self.free_mask(spec)
        out = np.full(phi2.shape[0], -np.inf)
        ok = self.in_support(spec, phi2)
        if ok.any():
            x = phi2[ok][:, free]
            lp = invgamma.logpdf(x, shape[free], scale=scale[free])
            lp -= invgamma.logcdf(self.bound, shape[free], scale=scale[free])
            out[ok] = lp.sum(axis=1)
        return out if np.ndim(phi) > 1 else float(out[0])


# ---------------------------------------------------------------------------
# particles


@dataclass
class Particle:
    """Single-particle view: parameters, filter state, log-weight, and (for
    windowed runs) the stored filter snapshot at the current window start."""

    params: StaticParams
    filter: FilterState
    log_weight: float
    snapshot: FilterState | None = None


@dataclass
class TriggerEvent:
    time: float
    ess: float
    reason: str
    acceptance: float


@dataclass
class EvidenceTrace:
    """Per-time log evidence factors log L_{t_i}."""

    times: np.ndarray
    log_factors: np.ndarray

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.log_factors)

    @property
    def log_evidence(self) -> float:
        return float(np.sum(self.log_factors))


@dataclass
class IbisConfig:
    """Engine settings. window_hours=inf is the full (non-windowed) scheme."""

    n_particles: int
    state_prior: StatePrior
    delta: float = 0.5
    window_hours: float = math.inf
    rejuvenation_period: int | None = None
    mh_steps: int = 1

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must be in (0, 1]")
        if self.window_hours <= 0:
            raise ValueError("window_hours must be positive")


@dataclass
class ParticleSet:
    """The full engine state: parameter matrix, weights, filter bank, caches.

    params rows are flat parameter vectors (see DlmSpec.param_slices);
    log_weights are unnormalized since the last resample. Window bookkeeping
    (snapshots, entry cloud, bandwidth) is populated only for finite windows.
    """

    spec: DlmSpec
    config: IbisConfig
    variable: str
    params: np.ndarray
    log_weights: np.ndarray
    bank: FilterBank
    diag_w: np.ndarray
    K: np.ndarray
    v: np.ndarray
    log_evidence: float = 0.0
    assimilated: int = 0
    evidence_times: list = field(default_factory=list)
    evidence_factors: list = field(default_factory=list)
    triggers: list = field(default_factory=list)
    n_filter_evals: int = 0
    current_window: int = 1
    window_start_idx: int = 0
    snap_m: np.ndarray | None = None
    snap_C: np.ndarray | None = None
    snap_ll_total: np.ndarray | None = None
    snap_t: float | None = None
    kde_bandwidth2: np.ndarray | None = None
    kde_log_centers: np.ndarray | None = None
    kde_cdf: np.ndarray | None = None

    @classmethod
    def create(cls, spec: DlmSpec, config: IbisConfig, prior: PriorSpec, rng,
               variable: str | None = None) -> "ParticleSet":
        phi = prior.sample(spec, config.n_particles, rng)
        bank = FilterBank.from_prior(config.state_prior, config.n_particles)
        caches = _param_caches(spec, phi)
        return cls(
            spec=spec,
            config=config,
            variable=variable or spec.observable,
            params=phi,
            log_weights=np.zeros(config.n_particles),
            bank=bank,
            **caches,
        )

    @property
    def n(self) -> int:
        return int(self.params.shape[0])

    def normalized_log_weights(self) -> np.ndarray:
        return normalized_log_weights(self.log_weights)

    def weights(self) -> np.ndarray:
        return np.exp(self.normalized_log_weights())

    def ess(self) -> float:
        return ess_log_weights(self.log_weights)

    def particle(self, k: int) -> Particle:
        snap = None
        if self.snap_m is not None:
            snap = FilterState(self.snap_m[k].copy(), self.snap_C[k].copy(),
                               float(self.snap_ll_total[k]), 0.0,
                               self.snap_t)
        return Particle(
            params=StaticParams.from_vector(self.spec, self.params[k]),
            filter=self.bank.state(k),
            log_weight=float(self.normalized_log_weights()[k]),
            snapshot=snap,
        )

    def refresh_caches(self, rows: np.ndarray) -> None:
        caches = _param_caches(self.spec, self.params[rows])
        self.diag_w[rows] = caches["diag_w"]
        self.K[rows] = caches["K"]
        self.v[rows] = caches["v"]

    def evidence_trace(self) -> EvidenceTrace:
        return EvidenceTrace(times=np.array(self.evidence_times),
                             log_factors=np.array(self.evidence_factors))


def _param_caches(spec: DlmSpec, phi: np.ndarray) -> dict:
    s = spec.param_slices()
    sigma2 = phi[:, s["sigma2"]]
    psi = phi[:, s["psi"]]
    return {
        "diag_w": phi[:, s["w"]].copy(),  # site-major == state order
        "K": spatial_K_stack(spec, sigma2, psi),
        "v": phi[:, s["v"]].copy(),
    }


# ---------------------------------------------------------------------------
# core operations


def ess(log_weights) -> float:
    """Effective sample size 1/sum(w²) of the normalized weights."""
    return ess_log_weights(np.asarray(log_weights, dtype=float))


def _record_arrays(spec: DlmSpec, obs, variable: str):
    """Shared per-record pieces: observed-site indices, F rows, values."""
    vals = np.asarray(getattr(obs, variable), dtype=float)
    mask = np.isfinite(vals)
    idx = np.flatnonzero(mask)
    regressors = obs.temperature if spec.needs_regressors else None
    F = obs_matrix(spec, obs.time, regressors=regressors, mask=mask)[idx, :]
    return idx, F, vals[idx]


def reweight(pset: ParticleSet, obs) -> ParticleSet:
    """Advance every particle's filter by one record and reweight.

    Mutates and returns pset. The per-time evidence factor uses the
    pre-update normalized weights. All-missing records propagate states and
    leave weights, ESS and evidence untouched (zero increment).
    """
    idx, F, x = _record_arrays(pset.spec, obs, pset.variable)
    vdiag = pset.v[:, idx]
    t = float(obs.time)
    if pset.assimilated == 0:
        inc = pset.bank.init_obs(F, x, vdiag, t)
    else:
        dt = t - pset.bank.t_last
        G = (None if is_identity_transition(pset.spec)
             else transition_matrix(pset.spec, dt))
        Wt = pset.K.copy()
        ar = np.arange(pset.spec.state_dim)
        Wt[:, ar, ar] += dt * pset.diag_w
        inc = pset.bank.step(F, x, vdiag, G, Wt, t)
    lw_pre = pset.normalized_log_weights()
    factor = float(logsumexp(lw_pre + inc))
    pset.log_evidence += factor
    pset.evidence_times.append(t)
    pset.evidence_factors.append(factor)
    pset.log_weights = pset.log_weights + inc
    pset.assimilated += 1
    pset.n_filter_evals += pset.n
    return pset


def multinomial_resample(pset: ParticleSet, rng) -> ParticleSet:
    """Draw N ancestors i.i.d. from the weights; reset weights to uniform.

    Parameter vectors, filter states, likelihood accumulators, caches and
    window snapshots are all copied with their ancestors. The window-entry
    KDE (kde_log_centers/kde_cdf/kde_bandwidth2) is NOT reindexed: it is a
    fixed reference distribution for the whole window, not per-particle
    state. Mutates and returns pset.
    """
    w = pset.weights()
    ancestors = np.searchsorted(np.cumsum(w), rng.random(pset.n))
    ancestors = np.minimum(ancestors, pset.n - 1)
    pset.params = pset.params[ancestors].copy()
    pset.bank.take(ancestors)
    pset.diag_w = pset.diag_w[ancestors].copy()
    pset.K = pset.K[ancestors].copy()
    pset.v = pset.v[ancestors].copy()
    if pset.snap_m is not None:
        pset.snap_m = pset.snap_m[ancestors].copy()
        pset.snap_C = pset.snap_C[ancestors].copy()
        pset.snap_ll_total = pset.snap_ll_total[ancestors].copy()
    pset.log_weights = np.zeros(pset.n)
    return pset


def window_partition(times, T: float) -> np.ndarray:
    """1-based window index per time: t in ((s-1)T, sT], t=0 in window 1.

    The last window simply absorbs whatever remains of the series.
    """
    times = np.asarray(times, dtype=float)
    if times.size and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if np.isinf(T):
        return np.ones(times.size, dtype=int)
    if times.size and times[0] != 0.0:
        raise ValueError("windowed runs require the first observation at t=0")
    return np.maximum(1, np.ceil(times / T)).astype(int)


def silverman_bandwidth(log_param_samples: np.ndarray,
                        weights: np.ndarray | None = None,
                        floor: float = BANDWIDTH_FLOOR) -> np.ndarray:
    """Per-component kernel bandwidth² 1.06² N^(-2/5) Var, floored.

    Variances are weighted sample variances of the log-parameters.
    """
    x = np.atleast_2d(np.asarray(log_param_samples, dtype=float))
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    if weights is None:
        weights = np.full(n, 1.0 / n)
    var = weighted_variance(x, weights)
    return np.maximum(1.06 ** 2 * n ** (-0.4) * var, floor)


@dataclass
class KdeProposal:
    """Weighted kernel density estimate of the window-entry parameter cloud.

    A proposal is an independence draw from the mixture: pick a center by
    its weight, then perturb it with the diagonal log-normal kernel. The
    same mixture stands in for the posterior of everything before the
    current window, so both mixture densities cancel in the windowed move's
    acceptance ratio and only the window likelihoods remain.
    """

    centers: np.ndarray      # (N, k) log-parameters at window entry
    bandwidth2: np.ndarray   # (k,)
    weights: np.ndarray | None = None   # (N,) mixture weights; uniform if None

    def draw_centers(self, rng, size: int) -> np.ndarray:
        """size log-scale center rows drawn by mixture weight."""
        n = self.centers.shape[0]
        if self.weights is None:
            j = rng.integers(0, n, size=size)
        else:
            cdf = np.cumsum(self.weights)
            j = np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1]),
                           n - 1)
        return self.centers[j]

    def propose(self, rng, size: int = 1) -> np.ndarray:
        """size independence draws from the mixture, on the natural scale."""
        c = self.draw_centers(rng, size)
        z = rng.standard_normal(c.shape)
        return np.exp(c + np.sqrt(self.bandwidth2) * z)


def _lognormal_logq(target: np.ndarray, center: np.ndarray,
                    chol_free: np.ndarray, free: np.ndarray) -> np.ndarray:
    """log q(target | center) for the multivariate log-normal random walk.

    Density over the free components only, Jacobian included.
    """
    t2 = np.atleast_2d(target)[:, free]
    c2 = np.atleast_2d(center)[:, free]
    lt = np.log(t2)
    z = np.linalg.solve(chol_free, (lt - np.log(c2)).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol_free)))
    d = int(free.sum())
    return (-0.5 * (d * np.log(2.0 * np.pi) + logdet + np.sum(z * z, axis=1))
            - np.sum(lt, axis=1))


def full_move_log_ratio(loglik_prop, loglik_cur, logprior_prop, logprior_cur,
                        logq_rev, logq_fwd):
    """Acceptance log-ratio of the full-history move (asymmetric proposal)."""
    return (loglik_prop + logprior_prop + logq_rev) - (
        loglik_cur + logprior_cur + logq_fwd)


def mh_move_full(particle: Particle, data_all, prior: PriorSpec,
                 proposal_cov: np.ndarray, rng, *, spec: DlmSpec,
                 state_prior: StatePrior, variable: str | None = None) -> Particle:
    """One full-history Metropolis-Hastings move on a single particle.

    Proposes from a log-normal random walk with the given covariance (over
    free components, in log space), recomputes the whole observed-data
    likelihood from the first record, and accepts with the standard ratio
    including prior and proposal densities. Out-of-support proposals are
    rejected outright.
    """
    variable = variable or spec.observable
    free = prior.free_mask(spec)
    phi = particle.params.to_vector()
    cov_free = np.atleast_2d(proposal_cov)[np.ix_(free, free)]
    cov_free = cov_free + PROPOSAL_COV_FLOOR * np.eye(int(free.sum()))
    Lc, _ = chol_jitter(cov_free)
    prop = phi.copy()
    prop[free] = np.exp(np.log(phi[free]) + Lc @ rng.standard_normal(int(free.sum())))
    if not prior.in_support(spec, prop[None, :])[0]:
        return particle
    run = run_filter(spec, StaticParams.from_vector(spec, prop), data_all,
                     prior=state_prior, variable=variable)
    log_ratio = full_move_log_ratio(
        run.state.loglik_total,
        particle.filter.loglik_total,
        prior.log_density(spec, prop),
        prior.log_density(spec, phi),
        float(_lognormal_logq(phi[None, :], prop[None, :], Lc, free)[0]),
        float(_lognormal_logq(prop[None, :], phi[None, :], Lc, free)[0]),
    )
    if np.log(rng.random()) < log_ratio:
        return Particle(params=StaticParams.from_vector(spec, prop),
                        filter=run.state, log_weight=particle.log_weight,
                        snapshot=particle.snapshot)
    return particle


def mh_move_windowed(particle: Particle, window_data, kde: KdeProposal, rng, *,
                     spec: DlmSpec, prior: PriorSpec,
                     variable: str | None = None, center: np.ndarray | None = None) -> Particle:
    """One windowed move on a single particle.

    Proposes an independence draw from the window-entry kernel density
    estimate (or from the kernel around an explicit natural-scale `center`),
    replays the filter over the current window from the particle's stored
    window-start snapshot, and accepts on the window-likelihood ratio, the
    mixture density having cancelled. Empty windows are a no-op.
    """
    if len(window_data) == 0:
        return particle
    if particle.snapshot is None:
        raise ValueError("windowed move requires the window-start snapshot")
    variable = variable or spec.observable
    free = prior.free_mask(spec)
    phi = particle.params.to_vector()
    c = (kde.draw_centers(rng, 1)[0] if center is None else np.log(center))
    prop = phi.copy()
    prop[free] = np.exp(c[free] + np.sqrt(kde.bandwidth2[free])
                        * rng.standard_normal(int(free.sum())))
    if not prior.in_support(spec, prop[None, :])[0]:
        return particle
    start = FilterState(particle.snapshot.m.copy(), particle.snapshot.C.copy(),
                        particle.snapshot.loglik_total, 0.0,
                        particle.snapshot.t_last)
    run = run_filter(spec, StaticParams.from_vector(spec, prop), window_data,
                     start=start, variable=variable)
    log_ratio = run.state.loglik_window - particle.filter.loglik_window
    if np.log(rng.random()) < log_ratio:
        return Particle(params=StaticParams.from_vector(spec, prop),
                        filter=run.state, log_weight=particle.log_weight,
                        snapshot=particle.snapshot)
    return particle


# ---------------------------------------------------------------------------
# engine


def _replay_bank(pset: ParticleSet, phi: np.ndarray, cached_records,
                 start: tuple | None) -> FilterBank:
    """Run a fresh bank for proposal parameters phi over cached records.

    start=None replays from the state prior (full move); otherwise start is
    (m, C, ll_total, t_last) snapshot arrays (windowed move).
    """
    caches = _param_caches(pset.spec, phi)
    n = phi.shape[0]
    if start is None:
        bank = FilterBank.from_prior(pset.config.state_prior, n)
    else:
        m, C, ll_total, t_last = start
        bank = FilterBank(m, C, loglik_total=ll_total, t_last=t_last)
    ar = np.arange(pset.spec.state_dim)
    first = start is None
    for (t, idx, F, x) in cached_records:
        vdiag = caches["v"][:, idx]
        if first:
            bank.init_obs(F, x, vdiag, t)
            first = False
        else:
            dt = t - bank.t_last
            G = (None if is_identity_transition(pset.spec)
                 else transition_matrix(pset.spec, dt))
            Wt = caches["K"].copy()
            Wt[:, ar, ar] += dt * caches["diag_w"]
            bank.step(F, x, vdiag, G, Wt, t)
    pset.n_filter_evals += n * len(cached_records)
    return bank


def _rejuvenate(pset: ParticleSet, cached_records, i: int, prior: PriorSpec,
                rng, proposal_cov: np.ndarray | None) -> float:
    """Move every particle mh_steps times; returns the mean acceptance rate.

    Window 1 (or an infinite window) uses full-history moves; later windows
    use windowed moves: independence proposals from the window-entry KDE,
    replayed from the stored snapshots. Mutates pset.
    """
    spec = pset.spec
    free = prior.free_mask(spec)
    n_free = int(free.sum())
    full_mode = pset.current_window == 1
    if full_mode:
        cov_free = proposal_cov[np.ix_(free, free)] + PROPOSAL_COV_FLOOR * np.eye(n_free)
        Lc, _ = chol_jitter(cov_free)
        window = cached_records[: i + 1]
        start = None
    else:
        window = cached_records[pset.window_start_idx: i + 1]
        start = (pset.snap_m, pset.snap_C, pset.snap_ll_total, pset.snap_t)
    if len(window) == 0:
        return 1.0

    rates = []
    for _ in range(pset.config.mh_steps):
        phi = pset.params
        prop = phi.copy()
        if full_mode:
            z = rng.standard_normal((pset.n, n_free))
            prop[:, free] = np.exp(np.log(phi[:, free]) + z @ Lc.T)
        else:
            j = np.minimum(np.searchsorted(pset.kde_cdf, rng.random(pset.n)),
                           pset.n - 1)
            z = rng.standard_normal((pset.n, n_free))
            h = np.sqrt(pset.kde_bandwidth2[free])
            prop[:, free] = np.exp(pset.kde_log_centers[j][:, free] + h * z)
        ok = prior.in_support(spec, prop)
        u = np.log(rng.random(pset.n))
        log_ratio = np.full(pset.n, -np.inf)
        if ok.any():
            bank_prop = _replay_bank(pset, prop, window, start)
            if full_mode:
                logq_fwd = _lognormal_logq(prop, phi, Lc, free)
                logq_rev = _lognormal_logq(phi, prop, Lc, free)
                log_ratio = full_move_log_ratio(
                    bank_prop.loglik_total, pset.bank.loglik_total,
                    prior.log_density(spec, prop), prior.log_density(spec, phi),
                    logq_rev, logq_fwd)
            else:
                log_ratio = bank_prop.loglik_window - pset.bank.loglik_window
            log_ratio = np.where(ok, log_ratio, -np.inf)
            acc = u < log_ratio
            if acc.any():
                rows = np.flatnonzero(acc)
                pset.params[rows] = prop[rows]
                pset.bank.set_rows(rows, bank_prop, rows)
                pset.refresh_caches(rows)
        else:
            acc = np.zeros(pset.n, dtype=bool)
        rates.append(float(np.mean(acc)))
    return float(np.mean(rates))


def _enter_window(pset: ParticleSet, new_window: int, i: int) -> None:
    """Cross a window boundary: snapshot filters, reset window likelihoods,
    and freeze this window's proposal KDE from the current weighted set."""
    pset.snap_m = pset.bank.m.copy()
    pset.snap_C = pset.bank.C.copy()
    pset.snap_ll_total = pset.bank.loglik_total.copy()
    pset.snap_t = pset.bank.t_last
    pset.bank.loglik_window = np.zeros(pset.n)
    pset.window_start_idx = i
    pset.current_window = new_window
    logp = np.log(pset.params)
    w = pset.weights()
    pset.kde_log_centers = logp
    pset.kde_cdf = np.cumsum(w)
    pset.kde_bandwidth2 = silverman_bandwidth(logp, weights=w)


def cache_records(spec: DlmSpec, records, variable: str):
    """Precompute (t, observed-site indices, F, x) per record."""
    out = []
    for obs in records:
        idx, F, x = _record_arrays(spec, obs, variable)
        out.append((float(obs.time), idx, F, x))
    return out


def _validate_times(records) -> np.ndarray:
    times = np.array([float(r.time) for r in records])
    if times.size == 0:
        raise ValueError("empty record sequence")
    if np.any(np.diff(times) <= 0):
        raise ValueError("record times must be strictly increasing")
    return times


def run_online_ibis(config: IbisConfig, data, prior: PriorSpec, spec: DlmSpec,
                    rng, variable: str | None = None):
    """Run the windowed scheme; with window_hours=inf this IS the full scheme.

    Returns (ParticleSet, EvidenceTrace). Trigger times, reasons and
    acceptance rates are on the set's `triggers` list.
    """
    records = list(data)
    times = _validate_times(records)
    windows = window_partition(times, config.window_hours)
    pset = ParticleSet.create(spec, config, prior, rng, variable=variable)
    cached = cache_records(spec, records, pset.variable)
    period = config.rejuvenation_period
    gamma = proposal_gamma(max(prior.n_free(spec), 1))

    for i, obs in enumerate(records):
        if i > 0 and windows[i] > pset.current_window:
            _enter_window(pset, int(windows[i]), i)
        reweight(pset, obs)
        cur_ess = pset.ess()
        low_ess = cur_ess < config.delta * pset.n
        scheduled = bool(period) and ((i + 1) % period == 0)
        if not (low_ess or scheduled):
            continue
        if pset.current_window == 1:
            logs = np.log(pset.params)
            _, cov = weighted_mean_cov(logs, pset.weights())
            proposal_cov = gamma * cov
        else:
            proposal_cov = None
        multinomial_resample(pset, rng)
        acc = _rejuvenate(pset, cached, i, prior, rng, proposal_cov)
        reason = "ess" if low_ess and not scheduled else (
            "scheduled" if scheduled and not low_ess else "both")
        pset.triggers.append(TriggerEvent(time=float(obs.time), ess=cur_ess,
                                          reason=reason, acceptance=acc))
    return pset, pset.evidence_trace()


def run_ibis(config: IbisConfig, data, prior: PriorSpec, spec: DlmSpec, rng,
             variable: str | None = None):
    """Full-history scheme: the windowed engine with an infinite window."""
    if math.isfinite(config.window_hours):
        config = replace(config, window_hours=math.inf)
    return run_online_ibis(config, data, prior, spec, rng, variable=variable)


def log_bayes_factor(trace_m1: EvidenceTrace, trace_m2: EvidenceTrace) -> np.ndarray:
    """Per-time cumulative log Bayes factor of model 1 over model 2."""
    if trace_m1.log_factors.shape != trace_m2.log_factors.shape:
        raise ValueError("evidence traces have different lengths")
    if not np.allclose(trace_m1.times, trace_m2.times):
        raise ValueError("evidence traces cover different times")
    return trace_m1.cumulative() - trace_m2.cumulative()
