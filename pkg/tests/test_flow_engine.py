import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from sectlab import compound_linalg as cl
from sectlab import field_library as fl
from sectlab import flow_engine as fe


# endpoints frozen from an independent high-order integration at rel_tol 1e-13
FROZEN_ENDPOINTS = [
    ("Y0", (0.4, 0.3), 10.0, (0.391560606940065, -0.28375231079234781)),
    ("Y1", (0.5, -0.2), 8.0, (0.67080066890350132, -0.0045366173725076547)),
    ("Y3", (0.4, 0.1, 0.3), 10.0,
     (0.3832144870303596, 0.095803621757589899, -0.2674975432801534)),
]


@pytest.mark.parametrize("fam,w0,T,want", FROZEN_ENDPOINTS)
def test_frozen_endpoints(fam, w0, T, want):
    spec = fl.ModelSpec(fam)
    traj = fe.integrate(spec, w0, T)
    assert np.max(np.abs(traj.y_end - np.asarray(want))) < 5e-8


def test_against_reference_integrator():
    spec = fl.ModelSpec("Y4")
    w0 = np.array([0.3, -0.2, 0.1])
    T = 7.0
    sol = solve_ivp(lambda t, w: fl.field_eval(spec, w), (0.0, T), w0,
                    method="DOP853", rtol=1e-12, atol=1e-13)
    traj = fe.integrate(spec, w0, T)
    assert np.max(np.abs(traj.y_end - sol.y[:, -1])) < 1e-7


def test_dense_output_consistency():
    spec = fl.ModelSpec("Y0")
    w0 = (0.4, 0.3)
    traj = fe.integrate(spec, w0, 12.0)
    rng = np.random.default_rng(0)
    for t in rng.uniform(0.1, 11.9, size=8):
        end = fe.integrate(spec, w0, float(t)).y_end
        assert np.max(np.abs(traj.at(float(t)) - end)) < 1e-7
    assert np.array_equal(traj.at(-1.0), np.asarray(w0, float))
    assert np.array_equal(traj.at(99.0), traj.y_end)


def test_stream_value_conserved_long_horizon():
    spec = fl.ModelSpec("Y0")
    traj = fe.integrate(spec, (0.4, 0.3), 50.0)
    h0 = fl.hamiltonian(spec, 0.4, 0.3)
    for t in np.linspace(0.0, 50.0, 101):
        x, y = traj.at(float(t))
        assert abs(fl.hamiltonian(spec, x, y) - h0) < 1e-8


def test_max_time_guard():
    spec = fl.ModelSpec("Y0")
    with pytest.raises(ValueError):
        fe.integrate(spec, (0.1, 0.1), 2e4)


def test_finite_time_escape_raises_step_error():
    # outside the bounded level sets the vertical velocity grows
    # quadratically and the orbit leaves in finite time
    spec = fl.ModelSpec("Y0")
    with pytest.raises(fe.StepSizeError):
        fe.integrate(spec, (0.7, -1.6), 50.0)


def test_fixed_step_mode_is_deterministic():
    spec = fl.ModelSpec("Y1")
    cfg = fe.IntegratorConfig(fixed_step=0.01)
    a = fe.integrate(spec, (0.5, -0.2), 6.0, cfg)
    b = fe.integrate(spec, (0.5, -0.2), 6.0, cfg)
    assert np.array_equal(a.states, b.states)
    ref = fe.integrate(spec, (0.5, -0.2), 6.0)
    assert np.max(np.abs(a.y_end - ref.y_end)) < 1e-6


# -- variational transport -----------------------------------------------------

def test_frame_matches_flow_map_derivative():
    spec = fl.ModelSpec("Y0")
    w0 = np.array([0.4, 0.3])
    T = 3.0
    st = fe.integrate_variational(spec, w0, T, renormalize=False)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        col = (fe.integrate(spec, w0 + e, T).y_end
               - fe.integrate(spec, w0 - e, T).y_end) / (2 * h)
        assert np.max(np.abs(st.frame[:, j] - col)) < 1e-6


def test_volume_preserved_by_divergence_free_flows():
    for fam, w0 in (("Y0", (0.4, 0.3)), ("Y4", (0.3, -0.2, 0.1))):
        spec = fl.ModelSpec(fam)
        st = fe.integrate_variational(spec, w0, 8.0, renormalize=False)
        assert abs(np.linalg.det(st.frame) - 1.0) < 1e-7


def test_renormalized_log_volume_matches_raw():
    spec = fl.ModelSpec("Y1")
    w0 = np.array([0.5, -0.2])
    raw = fe.integrate_variational(spec, w0, 6.0, renormalize=False)
    ren = fe.integrate_variational(spec, w0, 6.0, renormalize=True)
    log_raw = math.log(abs(np.linalg.det(raw.frame)))
    log_ren = math.log(abs(np.linalg.det(ren.frame))) + float(np.sum(ren.log_frame))
    assert abs(log_raw - log_ren) < 1e-8


def test_compound_transport_matches_wedge_of_frame():
    for fam, w0 in (("Y1", (0.5, -0.2)), ("Y3", (0.4, 0.1, 0.3))):
        spec = fl.ModelSpec(fam)
        st = fe.integrate_variational(spec, w0, 5.0, renormalize=False,
                                      with_compound=True)
        want = cl.multiplicative_compound(st.frame, 2)
        assert np.max(np.abs(st.compound_frame - want)) < 1e-6 * (
            1.0 + np.max(np.abs(want)))


def test_psi_cu_vanishes_for_planar_volume_preserver():
    spec = fl.ModelSpec("Y0")
    val = fe.psi_cu_over_segment(spec, (0.4, 0.3), 10.0, p=2)
    assert abs(val) < 1e-6


def test_psi_cu_matches_singular_values_of_frame():
    spec = fl.ModelSpec("Y1")
    w0 = (0.5, -0.2)
    T = 6.0
    st = fe.integrate_variational(spec, w0, T, renormalize=False)
    sv = np.linalg.svd(st.frame, compute_uv=False)
    want = -float(np.sum(np.log(sv)))  # p = d = 2
    got = fe.psi_cu_over_segment(spec, w0, T, p=2)
    assert abs(got - want) < 1e-8 * (1.0 + abs(want))


def test_fiber_coordinate_grows_exponentially_on_plateau():
    spec = fl.ModelSpec("Y2", omega=2.0, ell=0)
    w0 = (0.2, 0.3, -0.5)
    T = 0.8
    traj = fe.integrate(spec, w0, T)
    want = 0.3 * math.exp(2.0 * T)
    assert abs(traj.y_end[1] - want) < 1e-8 * want


# -- section events --------------------------------------------------------------

def test_section_crossing_residual_and_point():
    spec = fl.ModelSpec("Y0")
    sec = fe.SectionSpec(1, 0.0, direction=1)
    res = fe.section_crossing(spec, (0.4, -0.3), sec, t_max=50.0)
    assert isinstance(res, fe.CrossingEvent)
    assert res.residual < 1e-10
    assert abs(res.point[1]) < 1e-10
    end = fe.integrate(spec, (0.4, -0.3), res.time).y_end
    assert np.max(np.abs(end - res.point)) < 1e-7


def test_section_crossing_respects_min_time():
    spec = fl.ModelSpec("Y0")
    sec = fe.SectionSpec(1, 0.0, direction=1)
    first = fe.section_crossing(spec, (0.4, -0.3), sec, t_max=80.0)
    later = fe.section_crossing(spec, (0.4, -0.3), sec, t_max=80.0,
                                min_time=first.time + 0.01)
    assert later.time > first.time + 0.01
    assert later.residual < 1e-10


def test_section_crossing_direction_filter():
    spec = fl.ModelSpec("Y0")
    up = fe.section_crossing(spec, (0.4, -0.3), fe.SectionSpec(1, 0.0, 1),
                             t_max=80.0)
    down = fe.section_crossing(spec, (0.4, -0.3), fe.SectionSpec(1, 0.0, -1),
                               t_max=80.0)
    assert up.time != down.time
    vy_up = fl.field_eval(spec, up.point)[1]
    vy_down = fl.field_eval(spec, down.point)[1]
    assert vy_up > 0.0 > vy_down


def test_section_crossing_horizon_returns_no_crossing():
    spec = fl.ModelSpec("Y0")
    sec = fe.SectionSpec(1, 5.0, direction=1)  # never reached
    res = fe.section_crossing(spec, (0.4, 0.3), sec, t_max=5.0)
    assert isinstance(res, fe.NoCrossing)
    assert res.elapsed == 5.0


def test_escape_during_search_reports_no_crossing():
    # the orbit from this start leaves upward in finite time, so a section
    # below it is never hit; the search must hand back the last finite state
    spec = fl.ModelSpec("Y0")
    sec = fe.SectionSpec(1, -3.0, direction=-1)
    res = fe.section_crossing(spec, (0.7, -1.6), sec, t_max=100.0)
    assert isinstance(res, fe.NoCrossing)
    assert np.all(np.isfinite(res.last_point))


# -- transition map ---------------------------------------------------------------

def test_transition_map_symmetric_exit():
    spec = fl.ModelSpec("Y0")
    for x0 in (0.5, -1.2, 1.7):
        res = fe.transition_map(spec, x0, t_max=60.0)
        assert abs(res.exit[0] - x0) < 1e-5
        assert res.residual < 1e-9
        assert res.tau > 0.0


def test_transition_map_axis_entry_is_trapped():
    spec = fl.ModelSpec("Y0")
    with pytest.raises(fe.NoCrossingError) as ei:
        fe.transition_map(spec, 0.0, t_max=40.0)
    assert ei.value.elapsed == 40.0


def test_transition_map_shoulder_band_is_trapped():
    # level sets through the profile shoulder stall at the extra zeros on
    # y = 0, so entries in that band never reach the exit level
    spec = fl.ModelSpec("Y0")
    with pytest.raises(fe.NoCrossingError):
        fe.transition_map(spec, 2.5, t_max=60.0)


def test_transition_map_checks_arity():
    spec = fl.ModelSpec("Y3")
    with pytest.raises(ValueError):
        fe.transition_map(spec, (0.5,), t_max=10.0)


def test_axis_heteroclinic_flows_downward():
    # on the symmetry axis the vertical speed is (y^2 - 1)/5 for this family,
    # so the connecting orbit runs from the upper saddle to the lower one
    spec = fl.ModelSpec("Y1")
    end = fe.integrate(spec, (0.0, 0.5), 40.0).y_end
    assert abs(end[0]) < 1e-12
    assert abs(end[1] + 1.0) < 1e-4
    near = fe.integrate(spec, (0.0, -1.0 + 1e-6), 40.0).y_end
    assert abs(near[1] + 1.0) < 1e-3


def test_trajectory_csv_export(tmp_path):
    spec = fl.ModelSpec("Y0")
    path = tmp_path / "orbit.csv"
    fe.write_trajectory_csv(path, spec, (0.4, 0.3), 5.0, n_samples=50)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 51
    header = lines[0].split(",")
    assert header[0] == "t"
    row = [float(v) for v in lines[1].split(",")]
    assert len(row) == len(header)
