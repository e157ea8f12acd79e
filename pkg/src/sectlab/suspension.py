"""Solenoid suspensions of the cylinder fields.

The base dynamics is an expanding integer matrix on the k-torus crossed
with a contracting disk embedding.  Over its mapping cylinder, orbits climb
the suspension phase at unit speed except inside a thin cylinder around the
zero phase-section fiber, where the glued chart field takes over.  A
Poincare return to the section is therefore either laminar (exact affine
step, return time 1) or a cylinder crossing computed by integration.

Section-tangent frames carry k torus rows, 2 disk rows and 1 phase row.
The distinguished k+1 frame starts on the torus-plus-phase block and is QR
renormalized per return; singular values of the triangular updates supply
the sectional-contraction and volume observables.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from . import field_library as fl
from . import flow_engine as fe

DEFAULT_DELTAS = (1e-2, 1e-3, 1e-4)
DEFAULT_RADII = (1e-2, 1e-3, 1e-4)

_ALPHA_CAP = math.exp(-0.4)

_FAMILY_CODE = {"Y0": 0, "Y1": 1, "Y2": 2, "Y3": 3, "Y4": 4}


class GluingError(ValueError):
    pass


def _default_expansion(k):
    return tuple(tuple(2 if i == j else 0 for j in range(k))
                 for i in range(k))


@dataclass(frozen=True)
class SolenoidSpec:
    """Base solenoid data: torus expansion, disk contraction, cylinder width."""

    k: int = 1
    expansion: tuple = None
    alpha: float = 0.1
    beta: float = 0.5
    eps_u: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise GluingError("k must be at least 1")
        if self.expansion is None:
            object.__setattr__(self, "expansion", _default_expansion(self.k))
        E = np.asarray(self.expansion, dtype=float)
        if E.shape != (self.k, self.k):
            raise GluingError("expansion must be a k x k matrix")
        if not np.allclose(E, np.round(E)):
            raise GluingError("expansion must have integer entries")
        sv = np.linalg.svd(E, compute_uv=False)
        if sv.min() <= 1.0:
            raise GluingError("expansion must stretch every direction")
        if not (0.0 < self.alpha < _ALPHA_CAP):
            raise GluingError(
                "alpha must lie in (0, e^-2/5) so the disk contracts faster "
                "than the slow cylinder rate")
        if self.beta <= 0.0:
            raise GluingError("beta must be positive")
        if not (0.0 < self.eps_u <= 0.25):
            raise GluingError("eps_u must lie in (0, 1/4]")
        object.__setattr__(
            self, "expansion",
            tuple(tuple(int(x) for x in row) for row in np.round(E).astype(int)))

    @property
    def matrix(self):
        return np.asarray(self.expansion, dtype=float)

    @property
    def betas(self):
        return np.array([self.beta / 3.0 ** j for j in range(self.k)])

    @property
    def fixed_point(self):
        theta = np.zeros(self.k)
        v = np.array([self.betas.sum() / (1.0 - self.alpha), 0.0])
        return theta, v

    def image_disk_separation(self, n_base=64, seed=7):
        """Minimal gap between image disks over common base points.

        Positive values certify the embedded-solenoid picture: distinct
        preimage branches land in disjoint alpha-disks.
        """
        E = self.matrix
        Einv = np.linalg.inv(E)
        det = abs(round(float(np.linalg.det(E))))
        span = int(np.abs(E).sum(axis=1).max()) + 1
        rng = np.random.default_rng(seed)
        worst = np.inf
        grids = [np.arange(span)] * self.k
        shifts = np.stack(np.meshgrid(*grids, indexing="ij"),
                          axis=-1).reshape(-1, self.k)
        for _ in range(n_base):
            phi = rng.random(self.k)
            pres = (Einv @ (phi[None, :] + shifts).T).T % 1.0
            uniq = []
            for p in pres:
                if not any(np.linalg.norm((p - q + 0.5) % 1.0 - 0.5) < 1e-9
                           for q in uniq):
                    uniq.append(p)
            if len(uniq) != det:
                continue
            offs = [self._offset(p) for p in uniq]
            for i in range(len(offs)):
                for j in range(i + 1, len(offs)):
                    gap = float(np.linalg.norm(offs[i] - offs[j])) \
                        - 2.0 * self.alpha
                    worst = min(worst, gap)
        return worst

    def _offset(self, theta):
        ang = 2.0 * math.pi * np.asarray(theta)
        b = self.betas
        return np.array([float(np.sum(b * np.cos(ang))),
                         float(np.sum(b * np.sin(ang)))])


@dataclass
class HybridState:
    """Section point with suspension phase; chart coordinates when inside."""

    theta: np.ndarray
    v: np.ndarray
    u: float = 0.0
    chart: np.ndarray = None


def wrap_torus(theta):
    """Componentwise representative in [-1/2, 1/2)."""
    th = np.asarray(theta, dtype=float)
    return th - np.floor(th + 0.5)


def solenoid_map(sol, theta, v):
    """One base step: expand the torus, contract and recenter the disk."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    theta_new = (sol.matrix @ theta) % 1.0
    v_new = sol.alpha * v + sol._offset(theta)
    return theta_new, v_new


def base_jacobian(sol, theta):
    """Full (k+3) section-tangent derivative block of the base step."""
    k = sol.k
    M = np.zeros((k + 3, k + 3))
    M[:k, :k] = sol.matrix
    ang = 2.0 * math.pi * np.asarray(theta, dtype=float)
    b = sol.betas
    M[k, :k] = -2.0 * math.pi * b * np.sin(ang)
    M[k + 1, :k] = 2.0 * math.pi * b * np.cos(ang)
    M[k:k + 2, k:k + 2] = sol.alpha * np.eye(2)
    M[k + 2, k + 2] = 1.0
    return M


def family_code(model):
    return _FAMILY_CODE[_core_key(model)]


def _core_key(model):
    core = fl.core_family(model)
    for key in ("Y0", "Y1", "Y2", "Y3", "Y4"):
        if core.startswith(key):
            return key
    raise GluingError("family %s has no cylinder chart" % model.family)


def required_k(model):
    fam = _FAMILY_CODE[_core_key(model)]
    if fam in (0, 1):
        return 1
    if fam in (3, 4):
        return 2
    return 1 + model.ell


def check_compatible(model, sol):
    need = required_k(model)
    if sol.k != need:
        raise GluingError(
            "family %s needs a %d-torus base, got k=%d"
            % (model.family, need, sol.k))


def in_cylinder(model, sol, theta, v):
    w = wrap_torus(theta)
    if np.any(np.abs(w) >= sol.eps_u):
        return False
    if _FAMILY_CODE[_core_key(model)] == 2:
        vstar = sol.fixed_point[1]
        if abs(float(v[0]) - float(vstar[0])) >= sol.eps_u:
            return False
    return True


def entry_distance(model, sol, theta, v):
    """Section distance from the chart center line at entry."""
    w = wrap_torus(theta)
    d2 = float(np.sum(w * w))
    if _FAMILY_CODE[_core_key(model)] == 2:
        vstar = sol.fixed_point[1]
        d2 += (float(v[0]) - float(vstar[0])) ** 2
    return math.sqrt(d2)


def _chart_rows(model, sol):
    """Ambient frame rows carried by the chart, with their scales.

    Returns (rows, scales, frozen_rows); the last chart slot is always the
    phase row k+2 at scale 4 (chart vertical spans one phase unit over 4).
    """
    k = sol.k
    fam = _FAMILY_CODE[_core_key(model)]
    c_h = 3.0 / sol.eps_u
    if fam in (0, 1):
        rows = [0, k + 2]
        scales = [c_h, 4.0]
        frozen = [k, k + 1]
    elif fam in (3, 4):
        rows = [0, 1, k + 2]
        scales = [c_h, c_h, 4.0]
        frozen = [k, k + 1]
    else:
        rows = [k] + list(range(k)) + [k + 2]
        scales = [c_h] * (k + 1) + [4.0]
        frozen = [k + 1]
    return rows, scales, frozen


def chart_entry(model, sol, theta, v):
    """Chart coordinates of a section point about to cross."""
    k = sol.k
    fam = _FAMILY_CODE[_core_key(model)]
    c_h = 3.0 / sol.eps_u
    w = wrap_torus(theta)
    if fam in (0, 1):
        c = np.array([w[0] * c_h, -2.0])
    elif fam in (3, 4):
        c = np.array([w[0] * c_h, w[1] * c_h, -2.0])
    else:
        vstar = sol.fixed_point[1]
        c = np.concatenate([[(float(v[0]) - float(vstar[0])) * c_h],
                            w * c_h, [-2.0]])
    return c


def section_exit(model, sol, c, theta, v):
    """Section coordinates at chart exit, before the base step applies."""
    k = sol.k
    fam = _FAMILY_CODE[_core_key(model)]
    c_h = 3.0 / sol.eps_u
    theta = np.asarray(theta, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    if fam in (0, 1):
        theta[0] = c[0] / c_h
    elif fam in (3, 4):
        theta[0] = c[0] / c_h
        theta[1] = c[1] / c_h
    else:
        vstar = sol.fixed_point[1]
        v[0] = float(vstar[0]) + c[0] / c_h
        for j in range(k):
            theta[j] = c[1 + j] / c_h
    return theta, v


def collar_profiles(eps, zeta0, u):
    """Vertical-speed and slowdown weights at suspension phase u."""
    from ._scalar import bump, bump_d1
    pa = 0.5 - eps / 2.0
    pb = 0.5 - eps / 3.0
    za = 0.5 - 2.0 * eps
    zb = 0.5 - eps
    psi = 1.0 - bump(u - 0.5, pa, pb)
    dpsi = -bump_d1(u - 0.5, pa, pb)
    zet = 1.0 - zeta0 * bump(u - 0.5, za, zb)
    dzet = -zeta0 * bump_d1(u - 0.5, za, zb)
    return psi, dpsi, zet, dzet


def chart_rhs_jac(model):
    """Blended chart field and Jacobian closures in chart coordinates.

    The chart shares the core model coordinates; the vertical (last) slot
    doubles as an affine function of the suspension phase, u = (y+2)/4.
    """
    eps = model.epsilon
    zeta0 = model.zeta0

    def rhs(t, y):
        u = (y[-1] + 2.0) / 4.0
        psi, _, zet, _ = collar_profiles(eps, zeta0, u)
        f = fl.field_eval(model, y)
        g = (1.0 - psi) * zet * f
        g[-1] += psi
        return g

    def jac(y):
        u = (y[-1] + 2.0) / 4.0
        psi, dpsi, zet, dzet = collar_profiles(eps, zeta0, u)
        dpsi /= 4.0
        dzet /= 4.0
        f = fl.field_eval(model, y)
        J = fl.field_jacobian(model, y)
        w = (1.0 - psi) * zet
        dw = -dpsi * zet + (1.0 - psi) * dzet
        G = w * J
        G[:, -1] += dw * f
        G[-1, -1] += dpsi
        return G

    return rhs, jac


@dataclass
class ReturnResult:
    theta: np.ndarray
    v: np.ndarray
    tau: float
    crossed: bool
    timed_out: bool = False
    entry_dist: float = -1.0
    psi2_chart: float = 0.0
    psi2_jump: float = 0.0
    psi3_chart: float = 0.0
    psi3_jump: float = 0.0
    logj_chart: float = 0.0
    logj_jump: float = 0.0
    frame: np.ndarray = None
    exit_chart: np.ndarray = None

    @property
    def psi2(self):
        return self.psi2_chart + self.psi2_jump

    @property
    def logj(self):
        return self.logj_chart + self.logj_jump


def default_frame(sol):
    """Torus-plus-phase starting frame, k+1 orthonormal columns."""
    k = sol.k
    F = np.zeros((k + 3, k + 1))
    for j in range(k):
        F[j, j] = 1.0
    F[k + 2, k] = 1.0
    return F


def _frame_qr(F):
    q, logs = _k._tri_logsv(np.ascontiguousarray(F))
    return np.asarray(q), np.asarray(logs)


def _stage_stats(logs, ncol):
    psi2 = -(logs[ncol - 1] + logs[ncol - 2])
    psi3 = -(logs[ncol - 1] + logs[ncol - 2] + logs[ncol - 3]) \
        if ncol >= 3 else 0.0
    return psi2, psi3, float(np.sum(logs))


def poincare_return(model, sol, theta, v, cfg=None, frame=None):
    """One exact-section return of the suspension flow.

    Laminar returns are closed-form.  Crossings integrate the blended
    chart field adaptively; with a frame the variational transport is
    carried too, split into the in-chart stage and the base-map stage.
    """
    check_compatible(model, sol)
    cfg = cfg or fe.IntegratorConfig(max_time=2000.0)
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    ncol = frame.shape[1] if frame is not None else 0

    if not in_cylinder(model, sol, theta, v):
        th2, v2 = solenoid_map(sol, theta, v)
        res = ReturnResult(th2, v2, 1.0, False)
        if frame is not None:
            M = base_jacobian(sol, theta)
            q, logs = _frame_qr(M @ frame)
            res.frame = q
            res.psi2_jump, res.psi3_jump, res.logj_jump = \
                _stage_stats(logs, ncol)
        return res

    ed = entry_distance(model, sol, theta, v)
    c0 = chart_entry(model, sol, theta, v)
    d = c0.shape[0]
    rhs, jac = chart_rhs_jac(model)
    section = fe.SectionSpec(d - 1, 2.0, +1)
    ev = fe.section_crossing(None, c0, section, cfg, t_max=cfg.max_time,
                             rhs=rhs)
    if isinstance(ev, fe.NoCrossing):
        res = ReturnResult(theta.copy(), v.copy(), ev.elapsed, True,
                           timed_out=True, entry_dist=ed,
                           exit_chart=np.asarray(ev.last_point, dtype=float))
        if frame is not None:
            res.frame = frame.copy()
        return res

    tau = ev.time
    c_exit = np.asarray(ev.point, dtype=float)
    th_exit, v_exit = section_exit(model, sol, c_exit, theta, v)
    th2, v2 = solenoid_map(sol, th_exit, v_exit)
    res = ReturnResult(th2, v2, tau, True, entry_dist=ed, exit_chart=c_exit)

    if frame is not None:
        vs = fe.integrate_variational(
            None, c0, tau, cfg, with_compound=False, renormalize=False,
            rhs=rhs, jac=jac, dim=d, psi_rate=lambda x: 0.0)
        V = vs.frame
        rows, scales, frozen = _chart_rows(model, sol)
        S = np.diag(scales)
        Sinv = np.diag([1.0 / s for s in scales])
        newF = frame.copy()
        newF[rows, :] = Sinv @ V @ S @ frame[rows, :]
        q, logs = _frame_qr(newF)
        res.psi2_chart, res.psi3_chart, res.logj_chart = \
            _stage_stats(logs, ncol)
        M = base_jacobian(sol, th_exit)
        q, logs = _frame_qr(M @ q)
        res.psi2_jump, res.psi3_jump, res.logj_jump = _stage_stats(logs, ncol)
        res.frame = q
    return res


def sample_section(sol, rng):
    """Uniform draw on the section, avoiding a tiny ball at the fixed point."""
    tp, vp = (np.zeros(sol.k), sol.fixed_point[1])
    guard = 10.0 * np.finfo(float).eps
    while True:
        theta = rng.random(sol.k)
        while True:
            v = rng.uniform(-1.0, 1.0, size=2)
            if float(v @ v) <= 1.0:
                break
        dw = wrap_torus(theta - tp)
        d = math.sqrt(float(dw @ dw) + float((v - vp) @ (v - vp)))
        if d > guard:
            return theta, v


@dataclass
class OrbitData:
    """Raw per-return record of one orbit segment, post warm-up."""

    model: object
    sol: object
    taus: np.ndarray
    psi2: np.ndarray
    psi3: np.ndarray
    logj: np.ndarray
    cflags: np.ndarray
    theta_rec: np.ndarray
    entry_dists: np.ndarray
    psi2_chart: np.ndarray
    logj_chart: np.ndarray
    sigma_int: np.ndarray
    sr_cont: np.ndarray
    dr_cont: np.ndarray
    sr_disc: np.ndarray
    visits: np.ndarray
    n_marks: int
    t_start: float
    t_end: float
    status: str
    deltas: tuple
    radii: tuple
    seed: object = None
    warmup: int = 0

    @property
    def n_returns(self):
        return int(self.taus.shape[0])

    @property
    def total_time(self):
        return float(self.taus.sum())

    @property
    def crossing_count(self):
        return int(self.cflags.sum())


def _theta_to_fixed(theta):
    """Quantize float torus coordinates into the 64-bit fixed-point state."""
    th = np.asarray(theta, dtype=float) % 1.0
    return ((th * 2.0 ** 53).astype(np.uint64) << np.uint64(11))


_SING_TABLE_CACHE = {}


def singular_table(model):
    """Equilibria of the chart field as (radius, height) pairs.

    The set is symmetric under the horizontal reflection (one active
    coordinate) or rotation (two), so each entry is the horizontal
    radius and the vertical coordinate.  Used for chart-metric distance
    to the singular set in the recurrence statistics.
    """
    key = (_core_key(model), model.xi0, model.xi1)
    hit = _SING_TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    pts = []
    for eq in fl.equilibria(model) + fl.spurious_equilibria_scan(model):
        loc = np.asarray(eq.location, dtype=float)
        rho = float(np.hypot(loc[0], loc[1])) if loc.shape[0] == 3 \
            else abs(float(loc[0]))
        y = float(loc[-1])
        if not any(abs(rho - p) < 1e-12 and abs(y - q) < 1e-12
                   for p, q in pts):
            pts.append((rho, y))
    rho_arr = np.array([p for p, _ in pts], dtype=float)
    y_arr = np.array([q for _, q in pts], dtype=float)
    _SING_TABLE_CACHE[key] = (rho_arr, y_arr)
    return rho_arr, y_arr


def orbit_generate(model, sol, theta0, v0, n_returns, warmup=64,
                   h_cross=0.01, tau_cap=2500.0, cfg=None,
                   deltas=DEFAULT_DELTAS, radii=DEFAULT_RADII,
                   use_kernel=True, t0=0.0, seed=0, dither=True):
    """Generate per-return statistics for one orbit.

    Warm-up returns align the frame with the dominant section bundle before
    any accumulation.  The torus state advances in 64-bit fixed point with
    seeded dither bits (see the kernel module); disable dither only for
    short cross-path comparisons.  A crossing outlasting tau_cap flags the
    orbit as timed out and the completed prefix is reported.  Kernel
    eligible families run compiled; others fall back to the adaptive
    per-return path (without mark-based recurrence sums, which the
    compiled families cover).
    """
    check_compatible(model, sol)
    fam = _FAMILY_CODE[_core_key(model)]
    v = np.asarray(v0, dtype=float).copy()
    frame = default_frame(sol)
    k = sol.k
    theta_u = _theta_to_fixed(theta0)
    rng_state = np.uint64((0x5DEECE66D if seed is None else int(seed))
                          & 0xFFFFFFFFFFFFFFFF)

    kernel_ok = use_kernel and fam in (0, 1, 3, 4)
    if kernel_ok:
        E = sol.matrix.copy()
        E_u = np.round(E).astype(np.int64).astype(np.uint64)
        betas = sol.betas.copy()
        dg = np.asarray(deltas, dtype=float)
        rg = np.asarray(radii, dtype=float)
        s_rho, s_y = singular_table(model)

        def alloc(n):
            return dict(
                taus=np.zeros(n), psi2=np.zeros(n), psi3=np.zeros(n),
                logj=np.zeros(n), cflags=np.zeros(n, dtype=np.int8),
                theta_rec=np.zeros((n, k)), cross_entry_d=np.zeros(n),
                cross_psi_chart=np.zeros(n), cross_logj_chart=np.zeros(n),
                cross_sigma_int=np.zeros(n),
                cross_sr_cont=np.zeros((n, dg.shape[0])),
                cross_dr_cont=np.zeros((n, rg.shape[0])),
                sr_disc=np.zeros(dg.shape[0]),
                visits=np.zeros(rg.shape[0], dtype=np.int64))

        t_run = float(t0)
        with np.errstate(over="ignore"):
            if warmup > 0:
                wa = alloc(warmup)
                st, t_run, _, done, rng_state = _k.run_orbit(
                    fam, k, E, E_u, sol.alpha, betas, sol.eps_u,
                    model.epsilon, model.zeta0, model.xi0.plateau_end,
                    model.xi0.support_end,
                    theta_u, v, frame, warmup, h_cross, tau_cap, dg, rg,
                    s_rho, s_y,
                    wa["taus"], wa["psi2"], wa["psi3"], wa["logj"],
                    wa["cflags"], wa["theta_rec"], wa["cross_entry_d"],
                    wa["cross_psi_chart"], wa["cross_logj_chart"],
                    wa["cross_sigma_int"], wa["cross_sr_cont"],
                    wa["cross_dr_cont"], wa["sr_disc"], wa["visits"],
                    t_run, rng_state, dither)
                # numba boxes the returned uint64 as a python int; coerce
                # before reentry or the conversion truncates or raises
                rng_state = np.uint64(int(rng_state) & 0xFFFFFFFFFFFFFFFF)
                if st == _k.STEP_CAP:
                    # warm-up hit the crossing cap: nothing was recorded,
                    # report an empty flagged orbit so ensemble drivers can
                    # move to the next seed instead of dying here
                    z = alloc(0)
                    return OrbitData(
                        model=model, sol=sol, taus=z["taus"],
                        psi2=z["psi2"], psi3=z["psi3"], logj=z["logj"],
                        cflags=z["cflags"], theta_rec=z["theta_rec"],
                        entry_dists=z["cross_entry_d"],
                        psi2_chart=z["cross_psi_chart"],
                        logj_chart=z["cross_logj_chart"],
                        sigma_int=z["cross_sigma_int"],
                        sr_cont=z["cross_sr_cont"],
                        dr_cont=z["cross_dr_cont"],
                        sr_disc=z["sr_disc"], visits=z["visits"],
                        n_marks=0, t_start=float(t0), t_end=t_run,
                        status="timeout", deltas=tuple(deltas),
                        radii=tuple(radii), seed=seed, warmup=warmup)
                if st != _k.OK:
                    raise GluingError(
                        "orbit warm-up failed with status %d" % st)
            ar = alloc(n_returns)
            t_begin = t_run
            st, t_end, n_marks, done, rng_state = _k.run_orbit(
                fam, k, E, E_u, sol.alpha, betas, sol.eps_u, model.epsilon,
                model.zeta0, model.xi0.plateau_end, model.xi0.support_end,
                theta_u, v, frame, n_returns, h_cross, tau_cap, dg, rg,
                s_rho, s_y,
                ar["taus"], ar["psi2"], ar["psi3"], ar["logj"], ar["cflags"],
                ar["theta_rec"], ar["cross_entry_d"], ar["cross_psi_chart"],
                ar["cross_logj_chart"], ar["cross_sigma_int"],
                ar["cross_sr_cont"], ar["cross_dr_cont"],
                ar["sr_disc"], ar["visits"], t_run, rng_state, dither)
        status = {_k.OK: "ok", _k.STEP_CAP: "timeout",
                  _k.SCALE_FAULT: "scale-fault"}[st]
        n_keep = done if st != _k.OK else n_returns
        return OrbitData(
            model=model, sol=sol,
            taus=ar["taus"][:n_keep], psi2=ar["psi2"][:n_keep],
            psi3=ar["psi3"][:n_keep], logj=ar["logj"][:n_keep],
            cflags=ar["cflags"][:n_keep], theta_rec=ar["theta_rec"][:n_keep],
            entry_dists=ar["cross_entry_d"][:n_keep],
            psi2_chart=ar["cross_psi_chart"][:n_keep],
            logj_chart=ar["cross_logj_chart"][:n_keep],
            sigma_int=ar["cross_sigma_int"][:n_keep],
            sr_cont=ar["cross_sr_cont"][:n_keep],
            dr_cont=ar["cross_dr_cont"][:n_keep],
            sr_disc=ar["sr_disc"], visits=ar["visits"], n_marks=n_marks,
            t_start=t_begin, t_end=t_end, status=status,
            deltas=tuple(deltas), radii=tuple(radii), seed=seed,
            warmup=warmup)

    # adaptive fallback: per-return integration, no mark-based sums.
    # The torus state advances in python-int fixed point with the same
    # dither discipline as the kernel (different stream, same seed rules).
    cfg = cfg or fe.IntegratorConfig(max_time=float(tau_cap))
    n_total = warmup + n_returns
    rows = dict(taus=[], psi2=[], psi3=[], logj=[], cflags=[], theta_rec=[],
                entry=[], p2c=[], ljc=[])
    t_run = float(t0)
    t_begin = t_run
    status = "ok"
    mask = (1 << 64) - 1
    tu = [int(x) for x in theta_u]
    E_int = [[int(x) for x in row] for row in sol.expansion]
    rng = np.random.default_rng(0x5DEECE66D if seed is None else int(seed))
    for i in range(n_total):
        theta = np.array([x * 2.0 ** -64 for x in tu])
        res = poincare_return(model, sol, theta, v, cfg=cfg, frame=frame)
        if res.timed_out:
            status = "timeout"
            break
        if res.crossed:
            tu = [int(x * 2.0 ** 53) << 11 for x in (res.theta % 1.0)]
            if dither:
                bits = rng.integers(0, 2048, size=k)
                tu = [tu[j] | int(bits[j]) for j in range(k)]
        else:
            nxt = []
            for r in range(k):
                acc = sum(E_int[r][j] * tu[j] for j in range(k))
                if dither:
                    acc += int(rng.integers(0, 2))
                nxt.append(acc & mask)
            tu = nxt
        v, frame = res.v, res.frame
        if i == warmup - 1:
            t_begin = t_run + res.tau
        if i >= warmup:
            rows["taus"].append(res.tau)
            rows["psi2"].append(res.psi2)
            rows["psi3"].append(res.psi3_chart + res.psi3_jump)
            rows["logj"].append(res.logj)
            rows["theta_rec"].append(np.array([x * 2.0 ** -64 for x in tu]))
            rows["cflags"].append(1 if res.crossed else 0)
            rows["entry"].append(res.entry_dist)
            rows["p2c"].append(res.psi2_chart)
            rows["ljc"].append(res.logj_chart)
        t_run += res.tau
    n_keep = len(rows["taus"])
    zero2 = np.zeros((n_keep, len(deltas)))
    return OrbitData(
        model=model, sol=sol,
        taus=np.array(rows["taus"]), psi2=np.array(rows["psi2"]),
        psi3=np.array(rows["psi3"]), logj=np.array(rows["logj"]),
        cflags=np.array(rows["cflags"], dtype=np.int8),
        theta_rec=np.array(rows["theta_rec"]).reshape(n_keep, k),
        entry_dists=np.array(rows["entry"]),
        psi2_chart=np.array(rows["p2c"]),
        logj_chart=np.array(rows["ljc"]),
        sigma_int=np.zeros(n_keep),
        sr_cont=zero2, dr_cont=np.zeros((n_keep, len(radii))),
        sr_disc=None, visits=None, n_marks=0,
        t_start=t_begin, t_end=t_run, status=status,
        deltas=tuple(deltas), radii=tuple(radii), seed=seed, warmup=warmup)


@dataclass
class CrossingLedger:
    """Per-crossing bookkeeping: continuous entry/exit times, flight times,
    lap numbers (count of section returns up to and including the
    crossing), entry distances and in-chart frame observables."""

    n_times: np.ndarray
    m_times: np.ndarray
    taus: np.ndarray
    laps: np.ndarray
    entry_dists: np.ndarray
    psi2_chart: np.ndarray
    sigma_int: np.ndarray
    return_index: np.ndarray

    @property
    def n_crossings(self):
        return int(self.taus.shape[0])

    def lap_after(self, i, q):
        """Lap count q laminar returns past crossing i."""
        return int(self.laps[i]) + int(q)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["i", "n_i", "m_i", "tau_i", "lap"])
            for i in range(self.n_crossings):
                w.writerow([i,
                            format(self.n_times[i], ".17g"),
                            format(self.m_times[i], ".17g"),
                            format(self.taus[i], ".17g"),
                            int(self.laps[i])])


def build_ledger(od):
    """Assemble the crossing ledger from per-return orbit data."""
    t_entry = od.t_start + np.concatenate([[0.0], np.cumsum(od.taus)[:-1]])
    mask = od.cflags.astype(bool)
    idx = np.nonzero(mask)[0]
    return CrossingLedger(
        n_times=t_entry[idx],
        m_times=t_entry[idx] + od.taus[idx],
        taus=od.taus[idx].copy(),
        laps=idx + 1,
        entry_dists=od.entry_dists[idx].copy(),
        psi2_chart=od.psi2_chart[idx].copy(),
        sigma_int=od.sigma_int[idx].copy(),
        return_index=idx.copy())
