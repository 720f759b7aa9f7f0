import numpy as np
import pytest

from spatialdlm import (
    DlmSpec,
    Location,
    ObservationRecord,
    StatePrior,
    StaticParams,
)


def make_rng(seed=20260819):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def rng():
    return make_rng()


def random_locations(n, rng, spread_km=30.0):
    coords = rng.uniform(0.0, spread_km, size=(n, 2))
    return tuple(Location(id=i, name=f"s{i}", easting_km=float(coords[i, 0]),
                          northing_km=float(coords[i, 1])) for i in range(n))


def random_params(spec, rng, *, w_scale=0.05, v_scale=1.0, s_scale=1.0):
    L, m = spec.n_sites, spec.state_dim_per_site
    return StaticParams(
        w=w_scale * rng.uniform(0.2, 1.0, size=(L, m)),
        v=v_scale * rng.uniform(0.3, 1.5, size=L),
        sigma2=s_scale * rng.uniform(0.2, 1.2, size=m),
        psi=rng.uniform(0.005, 0.3, size=m),
    )


def random_records(spec, rng, n, *, missing=0.3, irregular=True, scale=3.0):
    """Arbitrary observation values on an irregular grid; not model draws.

    The likelihood and smoother are defined for any values, so oracle
    comparisons do not need model-consistent data.
    """
    if irregular:
        times = np.cumsum(rng.uniform(0.25, 3.0, size=n))
        times[0] = 0.0
    else:
        times = np.arange(n, dtype=float)
    records = []
    L = spec.n_sites
    for t in times:
        vals = 17.0 + scale * rng.standard_normal(L)
        vals[rng.random(L) < missing] = np.nan
        if spec.family == "humidity":
            hum = 80.0 + scale * rng.standard_normal(L)
            hum[~np.isfinite(vals)] = np.nan
            records.append(ObservationRecord(time=float(t), temperature=vals,
                                             humidity=hum))
        else:
            records.append(ObservationRecord(time=float(t), temperature=vals))
    return records


def default_state_prior(spec, var=1.0):
    m = spec.state_dim_per_site
    if spec.family == "humidity":
        block = [-1.0, 90.0]
    else:
        block = [0.0] * (m - 1) + [17.0]
    return StatePrior(m0=np.tile(block, spec.n_sites),
                      C0=var * np.eye(spec.state_dim))


def random_spec(rng, *, max_sites=2):
    family = rng.choice(["sinusoid", "fourier", "humidity"])
    L = int(rng.integers(1, max_sites + 1))
    q = int(rng.integers(1, 3)) if family == "fourier" else 0
    return DlmSpec(family=str(family), locations=random_locations(L, rng), q=q)
