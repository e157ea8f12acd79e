import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from sectlab import ergodic_stats as es
from sectlab import field_library as fl
from sectlab import suspension as sp


# -- truncated distance profile -------------------------------------------------

def test_truncated_distance_branches():
    d = 0.01
    assert es.truncated_distance(0.005, d) == 0.005
    assert es.truncated_distance(0.03, d) == 1.0
    mid = es.truncated_distance(0.015, d)
    assert 0.01 < mid < 1.0
    arr = es.truncated_distance(np.array([0.0, 0.005, 0.015, 0.5]), d)
    assert arr.shape == (4,)
    assert arr[0] == 0.0 and arr[-1] == 1.0


def test_truncated_distance_continuity_at_knees():
    for delta in (1e-2, 1e-3, 1e-4, 0.3):
        lo = es.truncated_distance(delta * (1 - 1e-12), delta)
        hi = es.truncated_distance(delta * (1 + 1e-12), delta)
        assert abs(lo - hi) < 5e-12
        lo2 = es.truncated_distance(2 * delta * (1 - 1e-12), delta)
        assert abs(lo2 - 1.0) < 1e-11
        assert es.truncated_distance(2 * delta, delta) == 1.0


@settings(max_examples=80, deadline=None)
@given(st.floats(1e-6, 2.0), st.floats(1e-4, 0.49))
def test_truncated_distance_properties(d, delta):
    v = es.truncated_distance(d, delta)
    assert 0.0 < v <= 1.0
    assert v >= min(d, 1.0) - 1e-12  # clipping never shrinks a distance
    # monotone nondecreasing in d
    assert es.truncated_distance(d * 1.01, delta) >= v - 1e-15


@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 1.5), st.floats(1e-4, 0.2), st.floats(1.0, 2.4))
def test_neglog_nondecreasing_in_delta(d, delta, factor):
    # enlarging delta truncates less, so the -log observable grows
    small = es.neglog_truncated(d, delta)
    large = es.neglog_truncated(d, min(delta * factor, 0.49))
    assert large >= small - 1e-12
    assert small >= 0.0


def test_truncated_distance_validation():
    with pytest.raises(ValueError):
        es.truncated_distance(0.1, 0.5)
    with pytest.raises(ValueError):
        es.truncated_distance(0.1, 0.0)
    with pytest.raises(ValueError):
        es.truncated_distance(-0.1, 0.01)


def test_neglog_floor_handles_zero():
    v = es.neglog_truncated(0.0, 0.01)
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(1e-300))


# -- saddle passage oracle -------------------------------------------------------

def test_recurrence_oracle_exit_time():
    rb = es.recurrence_bound_oracle(1e-4, 1e-2)
    assert abs(rb.t_exit - 5.0 * math.log(100.0)) < 1e-12
    # expanding coordinate regains r at t_exit
    assert abs(abs(rb.x0) * math.exp(rb.t_exit / 5.0) - rb.r) < 1e-12


def test_recurrence_oracle_matches_quadrature():
    # the bound integrates the pure expanding profile; with no contracting
    # component it is attained exactly
    for x0, r in ((1e-5, 1e-2), (3e-4, 5e-2), (-2e-6, 1e-3)):
        rb = es.recurrence_bound_oracle(x0, r)
        val, err = quad(lambda t: -math.log(abs(x0) * math.exp(t / 5.0)),
                        0.0, rb.t_exit, limit=200)
        assert err < 1e-9
        assert abs(val - rb.s_bound) < 1e-8 * (1.0 + abs(val))


def test_recurrence_oracle_bounds_full_norm_passage():
    # with the contracting coordinate present the integral only drops
    for x0, r in ((1e-5, 1e-2), (1e-3, 3e-2)):
        rb = es.recurrence_bound_oracle(x0, r)
        y0 = math.sqrt(r * r - x0 * x0)
        val, err = quad(
            lambda t: -math.log(math.hypot(abs(x0) * math.exp(t / 5.0),
                                           y0 * math.exp(-t / 5.0))),
            0.0, rb.t_exit, limit=500)
        assert err < 1e-5
        assert val <= rb.s_bound + 1e-6


def test_recurrence_oracle_validation():
    with pytest.raises(ValueError):
        es.recurrence_bound_oracle(0.0, 0.01)
    with pytest.raises(ValueError):
        es.recurrence_bound_oracle(0.02, 0.01)


def test_ball_log_bound_matches_quadrature():
    for r in (0.3, 0.05, 1e-3):
        want, err = quad(
            lambda rho: 2.0 * math.pi * rho * (math.log(rho) ** 2
                                               - math.log(r) ** 2),
            0.0, r, limit=500)
        assert abs(es.ball_log_bound(r) - want) < 1e-7 * abs(want)
    with pytest.raises(ValueError):
        es.ball_log_bound(1.0)
    with pytest.raises(ValueError):
        es.ball_log_bound(0.0)


# -- accumulator -------------------------------------------------------------------

def fake_orbit(n, psi2=-0.1, psi3=0.0, logj=0.05, tau=1.0, status="ok",
               seed=0):
    zeros3 = np.zeros(3)
    return SimpleNamespace(
        deltas=sp.DEFAULT_DELTAS, radii=sp.DEFAULT_RADII,
        n_returns=n, taus=np.full(n, tau), psi2=np.full(n, psi2),
        psi3=np.full(n, psi3), logj=np.full(n, logj),
        cflags=np.zeros(n, dtype=np.int8), sigma_int=np.zeros(n),
        sr_cont=np.zeros((n, 3)), dr_cont=np.zeros((n, 3)),
        sr_disc=zeros3.copy(), visits=np.zeros(3, dtype=np.int64),
        n_marks=0, status=status, seed=seed,
        theta_rec=np.zeros((n, 1)), entry_dists=np.zeros(n))


def real_orbits(n=150):
    model = fl.ModelSpec("G1")
    sol = sp.SolenoidSpec(k=1)
    out = []
    for seed in (1, 2, 3):
        out.append(sp.orbit_generate(model, sol, np.array([0.31 * seed]),
                                     np.array([0.05, -0.2]), n, warmup=8,
                                     seed=seed))
    return out


def acc_of(orbits):
    acc = es.BirkhoffAccumulator()
    for od in orbits:
        acc.add_orbit(od)
    return acc


def test_accumulator_totals_match_arrays():
    od = real_orbits(n=200)[0]
    acc = acc_of([od])
    assert acc.n_returns == od.n_returns
    assert acc.n_crossings == od.crossing_count
    assert abs(acc.total_time - od.taus.sum()) < 1e-10 * max(acc.total_time, 1)
    assert abs(acc.sum_psi2 - od.psi2.sum()) < 1e-10 * (1 + abs(acc.sum_psi2))
    assert acc.n_segments == 1
    assert acc.seeds == [od.seed]


def test_accumulator_merge_is_associative():
    A, B, C = (acc_of([od]) for od in real_orbits())
    left = A.merge(B).merge(C)
    right = A.merge(B.merge(C))
    seq = acc_of(real_orbits())
    for out in (left, right):
        assert out.n_returns == seq.n_returns
        assert out.n_crossings == seq.n_crossings
        assert out.n_marks == seq.n_marks
        assert abs(out.total_time - seq.total_time) < 1e-9 * seq.total_time
        for name in ("sum_psi2", "sum_psi3", "sum_logj", "sum_sigma"):
            a, b = getattr(out, name), getattr(seq, name)
            assert abs(a - b) < 1e-9 * (1.0 + abs(b))
        assert np.allclose(out.sum_neglog_disc, seq.sum_neglog_disc,
                           rtol=1e-9)
        assert np.array_equal(out.visit_counts, seq.visit_counts)
    assert [c[0] for c in left.checkpoints] == [c[0] for c in right.checkpoints]
    for cl, cr in zip(left.checkpoints, right.checkpoints):
        assert np.allclose(cl[1:], cr[1:], rtol=1e-9, atol=1e-9)


def test_accumulator_grid_mismatch():
    acc = es.BirkhoffAccumulator(deltas=(0.1,), radii=(0.1,))
    with pytest.raises(ValueError):
        acc.add_orbit(fake_orbit(4))
    other = es.BirkhoffAccumulator()
    with pytest.raises(ValueError):
        acc.merge(other)


def test_flagged_segments_counted():
    acc = acc_of([fake_orbit(16), fake_orbit(16, status="timeout", seed=9)])
    assert acc.n_segments == 2
    assert acc.n_flagged == 1
    assert acc.seeds == [0, 9]


def test_window_convergence_on_steady_stream():
    acc = acc_of([fake_orbit(64)])
    conv = acc.convergence()
    assert conv == {"psi_cu": True, "psi_3": True, "wase": True}
    rep = es.condition_verdicts(acc)
    assert rep.verdicts["wnu2se"] == es.HOLDS
    assert rep.verdicts["wase"] == es.HOLDS
    assert rep.verdicts["wnu2se_implies_wase"] == "consistent"
    assert rep.verdicts["wnu3se"] == es.INCONCLUSIVE  # no order-3 signal
    assert abs(rep.nu2se_margin - 0.1) < 1e-12
    assert abs(rep.wase_rate - 0.05) < 1e-12


def test_window_convergence_rejects_drift():
    first = fake_orbit(32, psi2=-0.1)
    second = fake_orbit(32, psi2=-0.4)
    acc = acc_of([first, second])
    conv = acc.convergence()
    assert conv["psi_cu"] is False
    rep = es.condition_verdicts(acc)
    assert rep.verdicts["wnu2se"] == es.INCONCLUSIVE


def test_insufficient_data_is_inconclusive():
    acc = acc_of([fake_orbit(4)])
    assert acc.convergence() == {"psi_cu": None, "psi_3": None, "wase": None}
    rep = es.condition_verdicts(acc)
    assert rep.verdicts["wnu2se"] == es.INCONCLUSIVE


def test_empty_accumulator_raises_on_averages():
    acc = es.BirkhoffAccumulator()
    for fn in (lambda: es.sr_average(acc, 1e-2),
               lambda: es.wsr_frequency(acc, 1e-2),
               lambda: es.ball_quad_average(acc, 1e-2)):
        with pytest.raises(ValueError):
            fn()
    assert math.isnan(acc.tau_mean())
    rep = es.condition_verdicts(acc)
    assert set(rep.verdicts.values()) <= {es.INCONCLUSIVE}


def test_average_lookup_requires_grid_value():
    acc = acc_of([fake_orbit(8)])
    with pytest.raises(ValueError, match="grid"):
        es.sr_average(acc, 0.5)
    with pytest.raises(ValueError, match="grid"):
        es.wsr_frequency(acc, 0.5)


# -- crossing-time law ---------------------------------------------------------------

def test_tau_loglaw_recovers_synthetic_slope():
    rng = np.random.default_rng(0)
    d = 10.0 ** rng.uniform(-8, -2, size=100)
    taus = 5.0 * np.abs(np.log(d)) + 2.0
    fit = es.tau_loglaw_fit(taus, d)
    assert abs(fit.slope - 5.0) < 1e-9
    assert abs(fit.intercept - 2.0) < 1e-8
    assert fit.rms_residual < 1e-9
    assert fit.max_rel_excess < 1e-10
    assert fit.n_crossings == 100


def test_tau_loglaw_constant_times():
    d = 10.0 ** np.linspace(-8, -2, 60)
    fit = es.tau_loglaw_fit(np.full(60, 7.0), d)
    assert abs(fit.slope) < 1e-12
    assert abs(fit.intercept - 7.0) < 1e-10


def test_tau_loglaw_needs_enough_crossings():
    with pytest.raises(ValueError):
        es.tau_loglaw_fit(np.ones(10), np.full(10, 1e-3))


# -- empirical measure ---------------------------------------------------------------

def test_measure_update_and_normalization():
    m = es.EmpiricalMeasure(1, bins=4)
    m.update([0.1], 2.0)
    m.update([0.26], 1.0)
    m.update([0.99], 1.0)
    w = m.normalized()
    assert w.shape == (4,)
    assert abs(w.sum() - 1.0) < 1e-15
    assert w[0] == 0.5 and w[1] == 0.25 and w[3] == 0.25
    assert m.total_time == 4.0
    with pytest.raises(ValueError):
        m.update([0.1], -1.0)


def test_measure_tv_distance_bounds():
    a = es.EmpiricalMeasure(1, bins=4)
    b = es.EmpiricalMeasure(1, bins=4)
    a.update([0.1], 1.0)
    b.update([0.9], 1.0)
    assert a.tv_distance(b) == 1.0
    assert a.tv_distance(a) == 0.0
    c = a.merge(b)
    assert abs(c.tv_distance(a) - 0.5) < 1e-15
    with pytest.raises(ValueError):
        a.merge(es.EmpiricalMeasure(2, bins=4))
    with pytest.raises(ValueError):
        es.EmpiricalMeasure(1, bins=4).normalized()


def test_measure_add_orbit_weights_by_following_return():
    od = SimpleNamespace(
        n_returns=3,
        theta_rec=np.array([[0.1], [0.3], [0.6]]),
        taus=np.array([1.0, 2.0, 3.0]))
    m = es.EmpiricalMeasure(1, bins=4)
    m.add_orbit(od)
    assert m.total_time == 5.0
    assert m.weights[0] == 2.0  # theta 0.1 weighted by the next return
    assert m.weights[1] == 3.0
    short = SimpleNamespace(n_returns=1, theta_rec=np.zeros((1, 1)),
                            taus=np.ones(1))
    before = m.weights.copy()
    m.add_orbit(short)
    assert np.array_equal(m.weights, before)


def test_measure_two_dim_grid():
    m = es.EmpiricalMeasure(2, bins=8)
    m.update([0.15, 0.9], 1.5)
    assert m.weights[1, 7] == 1.5
    assert m.cell_of([0.999999, 0.0]) == (7, 0)


# -- ensemble level -----------------------------------------------------------------

def test_collect_ensemble_restarts_through_timeouts(ensemble_cache):
    ens = ensemble_cache("G0", 800)
    acc = ens.accumulator
    assert acc.n_returns == 800
    assert acc.n_segments >= 2  # time caps force restarts
    assert acc.n_flagged >= 1
    assert ens.flagged_fraction > 0.0
    assert np.all(np.diff(ens.ledger.n_times) > 0.0)
    assert len(set(acc.seeds)) == acc.n_segments


def test_ensemble_statistics_shape_g1(ensemble_cache):
    ens = ensemble_cache("G1", 4000)
    acc = ens.accumulator
    assert acc.n_returns == 4000
    assert acc.n_marks > 0
    sr = [es.sr_average(acc, d) for d in acc.deltas]
    # smaller truncation scales see less of the singular neighbourhood
    assert sr[0] >= sr[1] >= sr[2] >= 0.0
    wsr = [es.wsr_frequency(acc, r) for r in acc.radii]
    assert wsr[0] >= wsr[1] >= wsr[2] >= 0.0
    assert all(0.0 <= f <= 1.0 for f in wsr)
    bq = [es.ball_quad_average(acc, r) for r in acc.radii]
    assert all(v >= 0.0 for v in bq)
    rep = es.condition_verdicts(acc, model=ens.model, sol=ens.sol,
                                ledger=ens.ledger)
    assert rep.family == "G1"
    assert rep.n_returns == 4000
    if ens.ledger.n_crossings >= 30:
        assert math.isfinite(rep.tau_loglaw_slope)


def test_deep_entry_flight_times_follow_double_passage_law(ensemble_cache):
    # each transit passes two slow zones (leaving the lower saddle and
    # skirting the upper one), each at unit rate 1/5, so flight time grows
    # as 10 |log d| for deep entries; shallow entries obey no such law
    ens = ensemble_cache("G1", 4000)
    led = ens.ledger
    sol = ens.sol
    deep = led.entry_dists < sol.eps_u / 10.0
    if deep.sum() < 30:
        pytest.skip("too few deep crossings in this sample")
    fit = es.tau_loglaw_fit(led.taus[deep], led.entry_dists[deep])
    assert 9.0 < fit.slope < 11.0
    assert fit.rms_residual < 1.0


def test_slowdown_sweep_rows():
    sol = sp.SolenoidSpec(k=2, eps_u=0.2)
    rows = es.slowdown_sweep([0.0, 0.5], 400, family="Ghat3", sol=sol,
                             seed=0)
    assert [r.zeta0 for r in rows] == [0.0, 0.5]
    assert rows[0].slow_factor == 1.0
    assert rows[1].slow_factor == 2.0
    assert rows[0].n_returns == 400
    if rows[0].sigma_per_crossing != 0.0:
        assert rows[0].sigma_ratio == 1.0
        assert rows[1].sigma_ratio > 1.0
    with pytest.raises(ValueError):
        es.slowdown_sweep([0.96], 10)
