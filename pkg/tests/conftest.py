import numpy as np
import pytest

from sectlab import ergodic_stats as es
from sectlab import field_library as fl
from sectlab import suspension as sp

_ENSEMBLES = {}


def ensemble(family, n_returns, seed=0, eps_u=0.05, zeta0=0.0,
             want_measure=False, bins=64, deltas=(1e-2, 1e-3, 1e-4),
             radii=(1e-2, 1e-3, 1e-4)):
    """Session-cached ensemble; heavy runs are shared between tests."""
    key = (family, n_returns, seed, eps_u, zeta0, want_measure, bins,
           deltas, radii)
    if key not in _ENSEMBLES:
        model = fl.ModelSpec(family, zeta0=zeta0)
        sol = sp.SolenoidSpec(k=sp.required_k(model), eps_u=eps_u)
        _ENSEMBLES[key] = es.collect_ensemble(
            model, sol, n_returns, seed=seed, deltas=deltas, radii=radii,
            want_measure=want_measure, measure_bins=bins)
    return _ENSEMBLES[key]


@pytest.fixture(scope="session")
def ensemble_cache():
    return ensemble


def pinned_orbit(family, n_returns, x_chart, seed=0, eps_u=0.05,
                 zeta0=0.0, warmup=0, dither=True, tau_cap=2500.0):
    """One orbit started on the section at a chosen chart offset.

    x_chart is the horizontal chart coordinate of the entry point; the
    section angle that produces it is x_chart * eps_u / 3.
    """
    model = fl.ModelSpec(family, zeta0=zeta0)
    sol = sp.SolenoidSpec(k=sp.required_k(model), eps_u=eps_u)
    theta = np.zeros(sol.k)
    theta[0] = x_chart * sol.eps_u / 3.0
    v = np.array([0.05, -0.2])
    return sp.orbit_generate(model, sol, theta, v, n_returns=n_returns,
                             warmup=warmup, seed=seed, dither=dither,
                             tau_cap=tau_cap)
