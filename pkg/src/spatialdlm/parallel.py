"""Communication-free batched execution.

Particles are partitioned into disjoint batches; every batch runs the whole
sequential pipeline on its own — local weights, local ESS trigger, local
multinomial resampling, local proposal covariance or kernel bandwidth — and
batches are combined exactly once, at the end. Scheduled rejuvenation every
`rejuvenation_period` time points keeps per-batch diversity even when a
small batch's local ESS never crosses the threshold.

Merging gives every batch equal total mass (weights are normalized within
the batch before concatenation, then once more globally). Per-batch evidence
estimates are averaged with equal weights on the natural scale at each time;
the merged trace stores the differenced factors of that averaged cumulative
evidence.

A master seed deterministically spawns one RNG seed per batch, so results
are reproducible regardless of worker count or execution order.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .filter import FilterBank
from .ibis import EvidenceTrace, IbisConfig, ParticleSet, PriorSpec, _param_caches, run_online_ibis
from .model import DlmSpec
from .numerics import normalized_log_weights

DEFAULT_BATCH_FLOOR = 50


class BatchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BatchPlan:
    """How to split N particles into independently-run batches."""

    n_batches: int
    particles_per_batch: int
    master_seed: int
    rejuvenation_period: int | None = 20
    batch_floor: int = DEFAULT_BATCH_FLOOR

    def __post_init__(self):
        if self.n_batches < 1:
            raise BatchConfigError("need at least one batch")
        if self.particles_per_batch < self.batch_floor:
            raise BatchConfigError(
                f"batch size {self.particles_per_batch} below the floor "
                f"of {self.batch_floor}")

    @property
    def n_particles(self) -> int:
        return self.n_batches * self.particles_per_batch

    def batch_seeds(self) -> list[np.random.SeedSequence]:
        """Pairwise-distinct child seeds, reproducible from the master seed."""
        return np.random.SeedSequence(self.master_seed).spawn(self.n_batches)


@dataclass
class BatchDiagnostics:
    batch_id: int
    trigger_count: int
    mean_acceptance: float
    n_filter_evals: int
    wall_time_s: float


@dataclass
class _BatchResult:
    batch_id: int
    params: np.ndarray
    log_weights: np.ndarray  # normalized within the batch
    m: np.ndarray
    C: np.ndarray
    loglik_total: np.ndarray
    loglik_window: np.ndarray
    t_last: float
    evidence_times: np.ndarray
    evidence_factors: np.ndarray
    diagnostics: BatchDiagnostics


def _run_one_batch(args) -> _BatchResult:
    (batch_id, seed_seq, config, data, prior, spec, variable) = args
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    t0 = time.perf_counter()
    pset, trace = run_online_ibis(config, data, prior, spec, rng,
                                  variable=variable)
    wall = time.perf_counter() - t0
    accs = [ev.acceptance for ev in pset.triggers]
    diag = BatchDiagnostics(
        batch_id=batch_id,
        trigger_count=len(pset.triggers),
        mean_acceptance=float(np.mean(accs)) if accs else float("nan"),
        n_filter_evals=pset.n_filter_evals,
        wall_time_s=wall,
    )
    return _BatchResult(
        batch_id=batch_id,
        params=pset.params,
        log_weights=pset.normalized_log_weights(),
        m=pset.bank.m,
        C=pset.bank.C,
        loglik_total=pset.bank.loglik_total,
        loglik_window=pset.bank.loglik_window,
        t_last=pset.bank.t_last,
        evidence_times=trace.times,
        evidence_factors=trace.log_factors,
        diagnostics=diag,
    )


def run_batched(config: IbisConfig, plan: BatchPlan, data, prior: PriorSpec,
                spec: DlmSpec, n_workers: int = 1, variable: str | None = None):
    """Run every batch independently and merge once.

    Returns (merged ParticleSet, EvidenceTrace, [BatchDiagnostics]).
    Worker count is independent of batch count; batches are distributed over
    the pool as whole units of work.
    """
    if config.n_particles != plan.n_particles:
        raise BatchConfigError(
            f"config particles {config.n_particles} != plan total {plan.n_particles}")
    batch_config = replace(config,
                           n_particles=plan.particles_per_batch,
                           rejuvenation_period=plan.rejuvenation_period)
    records = list(data)
    jobs = [
        (b, seed, batch_config, records, prior, spec, variable)
        for b, seed in enumerate(plan.batch_seeds())
    ]
    if n_workers <= 1:
        results = [_run_one_batch(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_one_batch, jobs))
    results.sort(key=lambda r: r.batch_id)
    merged, trace = final_merge(results, spec=spec, config=config,
                                variable=variable or spec.observable)
    return merged, trace, [r.diagnostics for r in results]


def final_merge(batches, *, spec: DlmSpec, config: IbisConfig,
                variable: str) -> tuple[ParticleSet, EvidenceTrace]:
    """Concatenate batches into one set with equal mass per batch."""
    if not batches:
        raise ValueError("no batches to merge")
    t_last = batches[0].t_last
    times = batches[0].evidence_times
    for r in batches[1:]:
        if not np.isclose(r.t_last, t_last):
            raise RuntimeError("batches ended at different terminal times")
        if not np.allclose(r.evidence_times, times):
            raise RuntimeError("batches cover different observation times")
    params = np.concatenate([r.params for r in batches], axis=0)
    log_w = np.concatenate([r.log_weights for r in batches])
    bank = FilterBank(
        np.concatenate([r.m for r in batches], axis=0),
        np.concatenate([r.C for r in batches], axis=0),
        loglik_total=np.concatenate([r.loglik_total for r in batches]),
        loglik_window=np.concatenate([r.loglik_window for r in batches]),
        t_last=t_last,
    )
    caches = _param_caches(spec, params)
    pset = ParticleSet(
        spec=spec,
        config=config,
        variable=variable,
        params=params,
        log_weights=normalized_log_weights(log_w),
        bank=bank,
        **caches,
    )
    # equal-weight average of accumulated batch evidences, per time
    cums = np.stack([np.cumsum(r.evidence_factors) for r in batches])
    merged_cum = logsumexp(cums, axis=0) - np.log(len(batches))
    factors = np.diff(merged_cum, prepend=0.0)
    pset.evidence_times = list(times)
    pset.evidence_factors = list(factors)
    pset.log_evidence = float(merged_cum[-1])
    pset.assimilated = len(times)
    return pset, EvidenceTrace(times=np.asarray(times), log_factors=factors)
