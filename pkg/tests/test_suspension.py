import math

import numpy as np
import pytest

from sectlab import field_library as fl
from sectlab import flow_engine as fe
from sectlab import suspension as sp


def g0_setup(eps_u=0.05):
    model = fl.ModelSpec("G0")
    sol = sp.SolenoidSpec(k=sp.required_k(model), eps_u=eps_u)
    return model, sol


# -- base solenoid ----------------------------------------------------------------

def test_solenoid_spec_validation():
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=0)
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=1, expansion=((1,),))  # must stretch
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=2, expansion=((2, 0),))  # wrong shape
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=1, alpha=0.7)  # slower than the slow cylinder rate
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=1, beta=0.0)
    with pytest.raises(sp.GluingError):
        sp.SolenoidSpec(k=1, eps_u=0.3)
    s = sp.SolenoidSpec(k=2)
    assert s.matrix.shape == (2, 2)
    assert np.min(np.linalg.svd(s.matrix, compute_uv=False)) > 1.0


def test_fixed_point_is_fixed():
    for k in (1, 2):
        sol = sp.SolenoidSpec(k=k)
        theta, v = sol.fixed_point
        th2, v2 = sp.solenoid_map(sol, theta, v)
        assert np.max(np.abs(sp.wrap_torus(th2 - theta))) < 1e-15
        assert np.max(np.abs(v2 - v)) < 1e-14


def test_image_disks_are_separated():
    for k in (1, 2):
        sol = sp.SolenoidSpec(k=k)
        assert sol.image_disk_separation(n_base=32) > 0.0


def test_wrap_torus():
    assert sp.wrap_torus(0.75) == -0.25
    assert sp.wrap_torus(-0.5) == -0.5
    assert sp.wrap_torus(0.49) == pytest.approx(0.49)
    out = sp.wrap_torus([1.25, -0.1])
    assert np.allclose(out, [0.25, -0.1])
    assert np.all((out >= -0.5) & (out < 0.5))


def test_base_jacobian_matches_finite_differences():
    sol = sp.SolenoidSpec(k=2)
    k = sol.k
    theta0 = np.array([0.31, 0.12])
    v0 = np.array([0.2, -0.1])
    M = sp.base_jacobian(sol, theta0)
    h = 1e-7

    def step(theta, v):
        th2, v2 = sp.solenoid_map(sol, theta, v)
        return np.concatenate([th2, v2])

    for j in range(k + 2):
        e = np.zeros(k + 2)
        e[j] = h
        tp, vp = theta0 + e[:k], v0 + e[k:]
        tm, vm = theta0 - e[:k], v0 - e[k:]
        col = (step(tp, vp) - step(tm, vm)) / (2 * h)
        assert np.max(np.abs(M[:k + 2, j] - col)) < 1e-6
    assert M[k + 2, k + 2] == 1.0
    assert np.all(M[k + 2, :k + 2] == 0.0)
    assert np.all(M[:k + 2, k + 2] == 0.0)


# -- chart plumbing ----------------------------------------------------------------

def test_family_codes_and_required_k():
    assert sp.family_code(fl.ModelSpec("G0")) == 0
    assert sp.family_code(fl.ModelSpec("Ghat4")) == 4
    assert sp.required_k(fl.ModelSpec("G0")) == 1
    assert sp.required_k(fl.ModelSpec("G1")) == 1
    assert sp.required_k(fl.ModelSpec("G3")) == 2
    assert sp.required_k(fl.ModelSpec("Ghat4")) == 2
    assert sp.required_k(fl.ModelSpec("G2", ell=2)) == 3
    with pytest.raises(sp.GluingError):
        sp.check_compatible(fl.ModelSpec("G3"), sp.SolenoidSpec(k=1))


def test_in_cylinder_and_entry_distance():
    model, sol = g0_setup()
    assert sp.in_cylinder(model, sol, np.array([0.01]), np.array([0.0, 0.0]))
    assert sp.in_cylinder(model, sol, np.array([0.99]), np.array([0.0, 0.0]))
    assert not sp.in_cylinder(model, sol, np.array([0.05]), np.zeros(2))
    assert not sp.in_cylinder(model, sol, np.array([0.3]), np.zeros(2))
    d = sp.entry_distance(model, sol, np.array([0.98]), np.zeros(2))
    assert abs(d - 0.02) < 1e-15


def test_chart_round_trip():
    for fam, k in (("G0", 1), ("G3", 2)):
        model = fl.ModelSpec(fam)
        sol = sp.SolenoidSpec(k=k, eps_u=0.05)
        theta = np.full(k, 0.01)
        v = np.array([0.05, -0.2])
        c = sp.chart_entry(model, sol, theta, v)
        assert c[-1] == -2.0
        th2, v2 = sp.section_exit(model, sol, c, theta, v)
        assert np.max(np.abs(sp.wrap_torus(th2 - theta))) < 1e-14
        assert np.max(np.abs(v2 - v)) < 1e-14


def test_chart_entry_scales_to_core_band():
    # eps_u of base angle maps to 3 chart units so the shoulder fits inside
    model, sol = g0_setup(eps_u=0.05)
    c = sp.chart_entry(model, sol, np.array([0.05 - 1e-12]), np.zeros(2))
    assert abs(c[0] - 3.0) < 1e-9


def test_collar_profiles_shape():
    eps = 0.12
    psi_mid, dpsi_mid, zet_mid, _ = sp.collar_profiles(eps, 0.4, 0.5)
    assert psi_mid == 0.0 and dpsi_mid == 0.0
    assert abs(zet_mid - 0.6) < 1e-15
    psi_end, _, zet_end, dz_end = sp.collar_profiles(eps, 0.4, 0.999)
    assert psi_end == 1.0
    assert zet_end == 1.0 and dz_end == 0.0
    # no slowdown leaves the speed factor constant
    for u in np.linspace(0.0, 1.0, 17):
        _, _, zet, dzet = sp.collar_profiles(eps, 0.0, float(u))
        assert zet == 1.0 and dzet == 0.0
    # weights stay in [0, 1] and derivatives match finite differences
    h = 1e-7
    for u in np.linspace(0.01, 0.99, 23):
        psi, dpsi, zet, dzet = sp.collar_profiles(eps, 0.4, float(u))
        assert 0.0 <= psi <= 1.0
        assert 0.0 < zet <= 1.0
        pp, _, zp, _ = sp.collar_profiles(eps, 0.4, float(u) + h)
        pm, _, zm, _ = sp.collar_profiles(eps, 0.4, float(u) - h)
        assert abs(dpsi - (pp - pm) / (2 * h)) < 1e-5
        assert abs(dzet - (zp - zm) / (2 * h)) < 1e-5


def test_chart_rhs_jacobian_consistency():
    for fam in ("G0", "G1", "G3", "G4"):
        model = fl.ModelSpec(fam)
        rhs, jac = sp.chart_rhs_jac(model)
        d = fl.model_dim(model)
        rng = np.random.default_rng(11)
        for _ in range(8):
            y = rng.uniform(-1.2, 1.2, size=d)
            # exercise the collar band too
            y[-1] = rng.choice([-1.8, -1.79, 0.3, 1.8])
            J = jac(y)
            h = 1e-6
            for j in range(d):
                e = np.zeros(d)
                e[j] = h
                col = (rhs(0.0, y + e) - rhs(0.0, y - e)) / (2 * h)
                assert np.max(np.abs(J[:, j] - col)) < 2e-5


def test_chart_field_is_pure_drift_at_section_levels():
    model = fl.ModelSpec("G0")
    rhs, _ = sp.chart_rhs_jac(model)
    for ylast in (-2.0, 2.0):
        g = rhs(0.0, np.array([0.8, ylast]))
        assert abs(g[0]) < 1e-15
        assert abs(g[-1] - 1.0) < 1e-15


# -- single returns ---------------------------------------------------------------

def test_laminar_return_is_closed_form():
    model, sol = g0_setup()
    theta = np.array([0.3])
    v = np.array([0.2, 0.1])
    res = sp.poincare_return(model, sol, theta, v,
                             frame=sp.default_frame(sol))
    assert not res.crossed and not res.timed_out
    assert res.tau == 1.0
    th2, v2 = sp.solenoid_map(sol, theta, v)
    assert np.allclose(res.theta, th2)
    assert np.allclose(res.v, v2)
    # no chart stage on a laminar step
    assert res.psi2_chart == 0.0 and res.logj_chart == 0.0
    # frozen from the base derivative: the angle column has norm
    # sqrt(4 + (2 pi beta)^2) and the phase column stays unit
    want = -0.5 * math.log(4.0 + (2.0 * math.pi * sol.beta) ** 2)
    assert abs(res.psi2_jump - want) < 1e-12
    assert res.psi2 <= -math.log(2.0) + 1e-12


def test_crossing_return_consistency():
    model, sol = g0_setup()
    theta = np.array([0.012])
    v = np.array([0.05, -0.2])
    res = sp.poincare_return(model, sol, theta, v,
                             frame=sp.default_frame(sol))
    assert res.crossed and not res.timed_out
    assert res.tau > 1.0
    assert abs(res.entry_dist - 0.012) < 1e-15
    assert abs(res.exit_chart[-1] - 2.0) < 1e-9
    th_exit, v_exit = sp.section_exit(model, sol, res.exit_chart, theta, v)
    th2, v2 = sp.solenoid_map(sol, th_exit, v_exit)
    assert np.max(np.abs(res.theta - th2)) < 1e-12
    assert np.max(np.abs(res.v - v2)) < 1e-12


def test_timed_out_return_reports_partial_state():
    # crossed marks chart entry; the timeout flag reports the failure and
    # the last finite chart state comes back for inspection
    model, sol = g0_setup()
    cfg = fe.IntegratorConfig(max_time=30.0)
    res = sp.poincare_return(model, sol, np.array([0.0]),
                             np.array([0.05, -0.2]), cfg=cfg)
    assert res.timed_out and res.crossed
    assert res.tau == 30.0
    assert np.all(np.isfinite(res.exit_chart))
    # the axis entry stalls at the lower chart saddle
    assert abs(res.exit_chart[0]) < 1e-12
    assert abs(res.exit_chart[-1] + 1.0) < 0.05


def test_sample_section_bounds():
    sol = sp.SolenoidSpec(k=2)
    rng = np.random.default_rng(3)
    for _ in range(50):
        theta, v = sp.sample_section(sol, rng)
        assert theta.shape == (2,) and v.shape == (2,)
        assert np.all((theta >= 0.0) & (theta < 1.0))
        assert float(v @ v) <= 1.0


def test_singular_table_entries():
    model, _ = g0_setup()
    rho, y = sp.singular_table(model)
    pairs = sorted(zip(rho.tolist(), y.tolist()))
    assert len(pairs) == 5
    assert pairs[0] == (0.0, -1.0)
    assert pairs[1] == (0.0, 1.0)
    assert abs(pairs[2][0] - fl.ROOT3_OVER_3) < 1e-14 and pairs[2][1] == 0.0
    assert abs(pairs[3][0] - 2.573628192927147) < 1e-9
    assert abs(pairs[4][0] - 2.9396928135376679) < 1e-9
    rho3, _ = sp.singular_table(fl.ModelSpec("G3"))
    assert rho3.shape[0] == 5


# -- orbit generation ---------------------------------------------------------------

def test_orbit_generate_is_reproducible():
    model, sol = g0_setup()
    kw = dict(theta0=np.array([0.26]), v0=np.array([0.05, -0.2]),
              n_returns=200, warmup=64, seed=5)
    a = sp.orbit_generate(model, sol, **kw)
    b = sp.orbit_generate(model, sol, **kw)
    assert np.array_equal(a.taus, b.taus)
    assert np.array_equal(a.psi2, b.psi2)
    assert np.array_equal(a.theta_rec, b.theta_rec)
    assert np.array_equal(a.cflags, b.cflags)
    assert a.t_end == b.t_end
    assert a.status == b.status
    assert a.n_returns > 0
    assert a.crossing_count == b.crossing_count


def test_orbit_seed_changes_dither_stream():
    model, sol = g0_setup()
    kw = dict(theta0=np.array([0.26]), v0=np.array([0.05, -0.2]),
              n_returns=300, warmup=0)
    a = sp.orbit_generate(model, sol, seed=1, **kw)
    b = sp.orbit_generate(model, sol, seed=2, **kw)
    assert not np.array_equal(a.theta_rec, b.theta_rec)


def test_orbit_totals_are_consistent():
    model, sol = g0_setup()
    od = sp.orbit_generate(model, sol, np.array([0.26]),
                           np.array([0.05, -0.2]), 150, warmup=16, seed=0)
    assert abs(od.total_time - (od.t_end - od.t_start)) < 1e-9 * od.t_end
    assert od.taus.min() >= 1.0 - 1e-12
    assert np.all((od.theta_rec >= 0.0) & (od.theta_rec < 1.0))
    laminar = od.taus[od.cflags == 0]
    assert np.allclose(laminar, 1.0)
    bound = sol.eps_u * math.sqrt(sol.k) + 1e-12
    assert np.all(od.entry_dists[od.cflags == 1] < bound)


def test_kernel_and_fallback_paths_agree():
    # only a shallow prefix is well conditioned: a deep chart entry has a
    # flight time of order -log(distance), so re-quantization noise at the
    # exit decorrelates the two integration paths afterwards
    model, sol = g0_setup()
    kw = dict(theta0=np.array([0.012]), v0=np.array([0.05, -0.2]),
              n_returns=2, warmup=0, seed=0, dither=False)
    ka = sp.orbit_generate(model, sol, use_kernel=True, **kw)
    py = sp.orbit_generate(model, sol, use_kernel=False, **kw)
    assert np.array_equal(ka.cflags, py.cflags)
    assert ka.cflags[0] == 1
    assert np.max(np.abs(ka.taus - py.taus)) < 1e-6
    assert np.max(np.abs(ka.psi2 - py.psi2)) < 1e-6
    assert np.max(np.abs(ka.logj - py.logj)) < 1e-6
    assert np.max(np.abs(ka.theta_rec - py.theta_rec)) < 1e-7
    assert np.max(np.abs(ka.entry_dists - py.entry_dists)) < 1e-9


def test_orbit_timeout_is_flagged_not_fatal():
    model, sol = g0_setup()
    od = sp.orbit_generate(model, sol, np.array([0.0]),
                           np.array([0.05, -0.2]), 5, warmup=0,
                           tau_cap=40.0, seed=0, dither=False)
    assert od.status == "timeout"
    assert od.n_returns < 5


def test_warmup_timeout_reports_empty_flagged_orbit():
    model, sol = g0_setup()
    od = sp.orbit_generate(model, sol, np.array([0.0]),
                           np.array([0.05, -0.2]), 5, warmup=3,
                           tau_cap=40.0, seed=0, dither=False)
    assert od.status == "timeout"
    assert od.n_returns == 0


# -- crossing ledger -----------------------------------------------------------------

def test_ledger_invariants():
    model, sol = g0_setup()
    od = sp.orbit_generate(model, sol, np.array([0.26]),
                           np.array([0.05, -0.2]), 2000, warmup=64, seed=0)
    led = sp.build_ledger(od)
    assert led.n_crossings == od.crossing_count >= 5
    assert np.all(np.diff(led.n_times) > 0.0)
    assert np.max(np.abs(led.m_times - led.n_times - led.taus)) < 1e-9
    # exit of one crossing precedes the entry of the next
    assert np.all(led.m_times[:-1] <= led.n_times[1:] + 1e-9)
    assert led.n_times[0] >= od.t_start - 1e-9
    assert led.m_times[-1] <= od.t_end + 1e-9
    assert np.all(led.laps == led.return_index + 1)
    assert np.all(led.taus > 1.0)
    assert np.all(led.entry_dists < sol.eps_u + 1e-12)
    assert led.lap_after(0, 3) == int(led.laps[0]) + 3


def test_ledger_csv(tmp_path):
    model, sol = g0_setup()
    od = sp.orbit_generate(model, sol, np.array([0.26]),
                           np.array([0.05, -0.2]), 300, warmup=16, seed=1)
    led = sp.build_ledger(od)
    path = tmp_path / "ledger.csv"
    led.write_csv(path)
    text = path.read_bytes()
    assert text.count(b"\r\n") == led.n_crossings + 1
    header = text.decode().splitlines()[0]
    assert header == "i,n_i,m_i,tau_i,lap"
