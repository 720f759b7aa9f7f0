"""Model structure for coupled spatial dynamic linear models.

Three observation families share one state-space skeleton

    x_t = F_t theta_t + v,        v ~ N(0, diag(V))
    theta_t = G theta_{t-1} + k w + p,   w ~ N(0, diag(W)), p ~ N(0, K)

with k^2 the hours elapsed since the previous observation and K a
Gaussian-process spatial covariance coupling the per-site states:

* ``sinusoid`` — per-site state (cos-coefficient, sin-coefficient, basal),
  observation row (cos(pi t/12), sin(pi t/12), 1), G = I.
* ``fourier`` (q harmonics) — per-site state of q phase pairs plus a level,
  observation row (1,0|1,0|...|1), G made of 2x2 harmonic rotations.
* ``humidity`` — per-site state (slope, intercept) regressing on the observed
  temperature at the same site, observation row (x_t^j, 1), G = I.

States are stacked site-major: site j occupies the slice
[j*m, (j+1)*m) where m is the per-site state dimension. The spatial
covariance K couples the same channel across sites and is diagonal across
channels within each site block.

Sites that report nothing at a time point are dropped by an incidence
selection; the selected rows of F and entries of diag(V) form the
observation model actually assimilated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# All families share a 24-hour period: angular frequency pi/12 per hour.
PERIOD_HOURS = 24.0
OMEGA = math.pi / 12.0

FAMILIES = ("sinusoid", "fourier", "humidity")


class ModelError(ValueError):
    """Invalid model structure or inconsistent inputs."""


@dataclass(frozen=True)
class Location:
    """A sensor site with planar coordinates in km."""

    id: int
    name: str
    easting_km: float
    northing_km: float


def distance_matrix(locations: tuple["Location", ...] | list["Location"]) -> np.ndarray:
    """Pairwise Euclidean distances in km, cached by DlmSpec."""
    xy = np.array([(s.easting_km, s.northing_km) for s in locations], dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


@dataclass(frozen=True)
class DlmSpec:
    """Which observation family, which sites, and (for fourier) how many harmonics."""

    family: str
    locations: tuple[Location, ...]
    q: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.family == "fourier" and self.q < 1:
            raise ModelError("fourier family needs q >= 1")
        object.__setattr__(self, "locations", tuple(self.locations))
        ids = [s.id for s in self.locations]
        if ids != list(range(len(ids))):
            raise ModelError("location ids must be 0..L-1 in order")

    @property
    def n_sites(self) -> int:
        return len(self.locations)

    @property
    def state_dim_per_site(self) -> int:
        if self.family == "sinusoid":
            return 3
        if self.family == "fourier":
            return 2 * self.q + 1
        return 2

    @property
    def state_dim(self) -> int:
        return self.n_sites * self.state_dim_per_site

    @property
    def n_params(self) -> int:
        m, L = self.state_dim_per_site, self.n_sites
        return L * m + L + 2 * m

    @property
    def observable(self) -> str:
        """Which channel of an observation record this family assimilates."""
        return "humidity" if self.family == "humidity" else "temperature"

    @property
    def needs_regressors(self) -> bool:
        return self.family == "humidity"

    @property
    def distances(self) -> np.ndarray:
        d = getattr(self, "_distances", None)
        if d is None:
            d = distance_matrix(self.locations)
            d.setflags(write=False)
            object.__setattr__(self, "_distances", d)
        return d

    def param_slices(self) -> dict[str, slice]:
        """Slices of the flat parameter vector: w (site-major), v, sigma2, psi."""
        m, L = self.state_dim_per_site, self.n_sites
        return {
            "w": slice(0, L * m),
            "v": slice(L * m, L * m + L),
            "sigma2": slice(L * m + L, L * m + L + m),
            "psi": slice(L * m + L + m, L * m + L + 2 * m),
        }

    def param_names(self) -> list[str]:
        m, L = self.state_dim_per_site, self.n_sites
        names = [f"w[{s.name},ch{c}]" for s in self.locations for c in range(m)]
        names += [f"v[{s.name}]" for s in self.locations]
        names += [f"sigma2[ch{c}]" for c in range(m)]
        names += [f"psi[ch{c}]" for c in range(m)]
        return names


@dataclass
class StaticParams:
    """Static model parameters.

    w: (L, m) per-site, per-channel system-noise variances
    v: (L,) per-site observation variances
    sigma2: (m,) spatial GP variances per state channel
    psi: (m,) spatial GP decay rates per state channel (1/km)
    """

    w: np.ndarray
    v: np.ndarray
    sigma2: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.psi = np.atleast_1d(np.asarray(self.psi, dtype=float))

    def validate(self, spec: DlmSpec, bound: float | None = None) -> None:
        m, L = spec.state_dim_per_site, spec.n_sites
        if self.w.shape != (L, m) or self.v.shape != (L,):
            raise ModelError("parameter shapes do not match spec")
        if self.sigma2.shape != (m,) or self.psi.shape != (m,):
            raise ModelError("GP parameter shapes do not match spec")
        vec = self.to_vector()
        if not np.all(vec > 0.0):
            raise ModelError("all parameters must be strictly positive")
        if bound is not None and not np.all(vec <= bound):
            raise ModelError(f"parameters exceed the truncation bound {bound}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.v, self.sigma2, self.psi])

    @classmethod
    def from_vector(cls, spec: DlmSpec, vec: np.ndarray) -> "StaticParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.n_params,):
            raise ModelError(f"expected {spec.n_params} parameters, got {vec.shape}")
        s = spec.param_slices()
        m, L = spec.state_dim_per_site, spec.n_sites
        return cls(
            w=vec[s["w"]].reshape(L, m).copy(),
            v=vec[s["v"]].copy(),
            sigma2=vec[s["sigma2"]].copy(),
            psi=vec[s["psi"]].copy(),
        )

    def copy(self) -> "StaticParams":
        return StaticParams(self.w.copy(), self.v.copy(),
                            self.sigma2.copy(), self.psi.copy())


@dataclass(frozen=True)
class GpCovariance:
    """Exponential spatial covariance function f(d) = sigma2 * exp(-psi d)."""

    sigma2: float
    psi: float

    def __call__(self, d):
        return gp_cov(self, d)


def gp_cov(gp: GpCovariance, d):
    """Evaluate sigma2 * exp(-psi * d) at distance d (km, >= 0)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0.0):
        raise ModelError("negative distance")
    out = gp.sigma2 * np.exp(-gp.psi * d)
    return float(out) if out.ndim == 0 else out


def build_spatial_K(spec: DlmSpec, params: StaticParams) -> np.ndarray:
    """Spatial system-noise covariance over the stacked state.

    Block (j, j') is diagonal across channels with entries
    sigma2_c * exp(-psi_c * d_jj'). Symmetric PSD by construction
    (kron of a PD exponential-kernel matrix per channel).
    """
    m = spec.state_dim_per_site
    D = spec.distances
    K = np.zeros((spec.state_dim, spec.state_dim))
    for c in range(m):
        K[c::m, c::m] = params.sigma2[c] * np.exp(-params.psi[c] * D)
    return K


def spatial_K_stack(spec: DlmSpec, sigma2: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """build_spatial_K for a stack of parameter draws.

    sigma2, psi: (n, m) arrays. Returns (n, p, p).
    """
    m = spec.state_dim_per_site
    D = spec.distances
    n = sigma2.shape[0]
    K = np.zeros((n, spec.state_dim, spec.state_dim))
    for c in range(m):
        K[:, c::m, c::m] = sigma2[:, c, None, None] * np.exp(
            -psi[:, c, None, None] * D[None, :, :]
        )
    return K


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    """Row selector for the sites observed at one time point.

    Stored as an index list; `dense()` materializes the 0/1 selector
    for tests and display.
    """

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        idx = np.flatnonzero(mask)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def n_obs(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        P = np.zeros((self.n_obs, self.mask.size))
        P[np.arange(self.n_obs), self.indices] = 1.0
        return P

    def select(self, v: np.ndarray) -> np.ndarray:
        """Apply the selector to a site-indexed vector (or rows of a matrix)."""
        return np.asarray(v)[..., self.indices]


def build_incidence(mask) -> IncidenceMatrix:
    return IncidenceMatrix(np.asarray(mask, dtype=bool))


def obs_row(spec: DlmSpec, t: float, regressor: float | None = None) -> np.ndarray:
    """The per-site observation row at time t (hours)."""
    if spec.family == "sinusoid":
        return np.array([math.cos(OMEGA * t), math.sin(OMEGA * t), 1.0])
    if spec.family == "fourier":
        row = np.zeros(spec.state_dim_per_site)
        row[0::2] = 1.0
        return row
    if regressor is None or not np.isfinite(regressor):
        raise ModelError("humidity row needs a temperature regressor")
    return np.array([float(regressor), 1.0])


def obs_matrix(spec: DlmSpec, t: float, regressors=None, mask=None) -> np.ndarray:
    """Full L x (L*m) block-diagonal observation matrix at time t.

    For the humidity family, `regressors` supplies the observed temperature
    per site; a site observed at t (per `mask`, default all observed) with a
    missing regressor is an input error. Rows of unobserved sites are zero
    and are dropped by the incidence selection downstream.
    """
    L, m = spec.n_sites, spec.state_dim_per_site
    observed = np.ones(L, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    F = np.zeros((L, L * m))
    if spec.family == "humidity":
        reg = np.full(L, np.nan) if regressors is None else np.asarray(regressors, dtype=float)
        for j in range(L):
            if not observed[j]:
                continue
            if not np.isfinite(reg[j]):
                raise ModelError(
                    f"site {spec.locations[j].name}: humidity observed at t={t} "
                    "with no temperature regressor"
                )
            F[j, j * m: (j + 1) * m] = obs_row(spec, t, reg[j])
    else:
        row = obs_row(spec, t)
        for j in range(L):
            F[j, j * m: (j + 1) * m] = row
    return F


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


def system_matrix(spec: DlmSpec) -> np.ndarray:
    """Unit-step state transition over the stacked state."""
    return transition_matrix(spec, 1.0)


def transition_matrix(spec: DlmSpec, dt: float) -> np.ndarray:
    """State transition over a gap of dt hours.

    Identity for sinusoid/humidity. For fourier, per-site block-diagonal
    harmonic rotations by angle r * OMEGA * dt (r = 1..q) and a trailing 1;
    equals the unit-step matrix raised to the power dt.
    """
    p = spec.state_dim
    if spec.family != "fourier":
        return np.eye(p)
    m = spec.state_dim_per_site
    block = np.zeros((m, m))
    for r in range(1, spec.q + 1):
        block[2 * (r - 1): 2 * r, 2 * (r - 1): 2 * r] = _rotation(r * OMEGA * dt)
    block[m - 1, m - 1] = 1.0
    G = np.zeros((p, p))
    for j in range(spec.n_sites):
        G[j * m: (j + 1) * m, j * m: (j + 1) * m] = block
    return G


def is_identity_transition(spec: DlmSpec) -> bool:
    return spec.family != "fourier"


@dataclass
class SystemMatrices:
    """Per-step matrices after incidence projection.

    F: (n_obs, p) selected observation rows; G: (p, p) transition (None means
    identity); Wtilde: (p, p) dt*diag(W) + K system-noise covariance (None at
    the initial time, which has no propagation); Vtilde: (n_obs, n_obs)
    diagonal observation-noise covariance; incidence: the selector used.
    """

    F: np.ndarray
    G: np.ndarray | None
    Wtilde: np.ndarray | None
    Vtilde: np.ndarray
    incidence: IncidenceMatrix


def assemble_mats(
    spec: DlmSpec,
    params: StaticParams,
    t: float,
    mask,
    dt: float | None,
    regressors=None,
) -> SystemMatrices:
    """Build the matrices the filter needs for one time point.

    dt is the hours elapsed since the previous assimilated time, or None for
    the initial time (no propagation, no system noise).
    """
    inc = build_incidence(mask)
    F_full = obs_matrix(spec, t, regressors=regressors, mask=inc.mask)
    F = F_full[inc.indices, :]
    Vt = np.diag(params.v[inc.indices])
    if dt is None:
        G = None
        Wt = None
    else:
        if dt <= 0:
            raise ModelError(f"non-increasing time at t={t}")
        G = None if is_identity_transition(spec) else transition_matrix(spec, dt)
        Wt = dt * np.diag(params.w.ravel()) + build_spatial_K(spec, params)
    return SystemMatrices(F=F, G=G, Wtilde=Wt, Vtilde=Vt, incidence=inc)


def amplitude_phase(state) -> tuple[float, float | None, float]:
    """(amplitude, phase, basal) of a per-site sinusoid state triple.

    amplitude = sqrt(th1^2 + th2^2), phase = atan2(th2, th1), basal = th3,
    so that th1 cos(wt) + th2 sin(wt) + th3 = A cos(wt - phase) + basal.
    Phase is undefined (None) at th1 = th2 = 0.
    """
    th1, th2, th3 = (float(x) for x in np.asarray(state, dtype=float))
    amp = math.hypot(th1, th2)
    phase = None if amp == 0.0 else math.atan2(th2, th1)
    return amp, phase, th3
