"""Adaptive flow integration with dense output, variational frames, and
section-crossing events.

The stepper is an embedded 5(4) Dormand-Prince pair with the standard
quartic interpolant.  A fixed-step fourth-order mode is available when a
bitwise-reproducible step sequence matters more than local error control;
both modes share the same event refinement, which polishes crossings with
Newton steps against the integrated flow rather than the interpolant.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import compound_linalg as cl
from . import field_library as fl

__all__ = [
    "IntegratorConfig",
    "Trajectory",
    "VariationalState",
    "SectionSpec",
    "CrossingEvent",
    "NoCrossing",
    "NoCrossingError",
    "StepSizeError",
    "TransitionResult",
    "integrate",
    "integrate_variational",
    "psi_cu_over_segment",
    "section_crossing",
    "transition_map",
    "write_trajectory_csv",
]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
               -17253 / 339200, 22 / 525, -1 / 40])
# quartic dense-output coefficients (columns: theta^1..theta^4 weights)
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608,
     -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933,
     87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304,
     -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883,
     -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class StepSizeError(RuntimeError):
    pass


class NoCrossingError(RuntimeError):
    def __init__(self, msg, elapsed):
        super().__init__(msg)
        self.elapsed = elapsed


@dataclass
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_time: float = 1e4
    renorm_interval: float = 1.0
    max_step: float = 0.5
    first_step: float = 1e-3
    fixed_step: Optional[float] = None


@dataclass
class SectionSpec:
    coordinate_index: int
    level: float
    direction: int = 1  # +1: increasing through the level, -1: decreasing


@dataclass
class CrossingEvent:
    time: float
    point: np.ndarray
    residual: float


@dataclass
class NoCrossing:
    elapsed: float
    last_point: np.ndarray


class _Step:
    __slots__ = ("t0", "h", "y0", "K", "y1", "hermite")

    def __init__(self, t0, h, y0, K=None, y1=None, hermite=None):
        self.t0 = t0
        self.h = h
        self.y0 = y0
        self.K = K
        self.y1 = y1
        self.hermite = hermite

    def eval(self, t):
        th = (t - self.t0) / self.h
        if self.K is not None:
            powers = np.array([th, th * th, th ** 3, th ** 4])
            return self.y0 + self.h * (self.K.T @ (_P @ powers))
        # cubic Hermite fallback for the fixed-step mode
        y0, f0, y1, f1 = self.hermite
        h = self.h
        a = 2 * (y0 - y1) + h * (f0 + f1)
        b = -3 * (y0 - y1) - h * (2 * f0 + f1)
        return ((a * th + b) * th + h * f0) * th + y0


class Trajectory:
    """Dense-output record of one integration run."""

    def __init__(self, steps, t0, y0):
        self._steps = steps
        self.t0 = t0
        self.y0 = np.asarray(y0, dtype=float)
        if steps:
            self.t_end = steps[-1].t0 + steps[-1].h
            self.y_end = steps[-1].y1
        else:
            self.t_end = t0
            self.y_end = self.y0
        self._ends = np.array([s.t0 + s.h for s in steps])

    def at(self, t):
        if not self._steps or t <= self.t0:
            return self.y0.copy()
        if t >= self.t_end:
            return self.y_end.copy()
        i = int(np.searchsorted(self._ends, t, side="left"))
        return self._steps[i].eval(t)

    @property
    def times(self):
        return np.concatenate(([self.t0], self._ends))

    @property
    def states(self):
        if not self._steps:
            return self.y0[np.newaxis, :]
        return np.vstack([self.y0] + [s.y1 for s in self._steps])


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def _integrate_raw(rhs, t0, y0, T, cfg, observer=None):
    """March from t0 to t0+T collecting dense-output steps.

    observer(step) may return True to halt early (used by event scans).
    """
    y = np.asarray(y0, dtype=float).copy()
    t = t0
    t_final = t0 + T
    steps = []
    if T <= 0.0:
        return Trajectory(steps, t0, y0)

    if cfg.fixed_step is not None:
        h_nom = cfg.fixed_step
        n = max(1, int(math.ceil(T / h_nom - 1e-12)))
        h = T / n
        f0 = rhs(t, y)
        for _ in range(n):
            y1, _ = _rk4_step(rhs, t, y, h)
            f1 = rhs(t + h, y1)
            st = _Step(t, h, y.copy(), hermite=(y.copy(), f0, y1.copy(), f1))
            st.y1 = y1.copy()
            steps.append(st)
            t += h
            y, f0 = y1, f1
            if observer is not None and observer(st):
                break
        return Trajectory(steps, t0, y0)

    h = min(cfg.first_step, cfg.max_step, T)
    k1 = rhs(t, y)
    nfev_stall = 0
    while t < t_final - 1e-14 * max(1.0, abs(t_final)):
        h = min(h, cfg.max_step, t_final - t)
        with np.errstate(all="ignore"):
            K = np.empty((7, y.size))
            K[0] = k1
            for i in range(1, 7):
                K[i] = rhs(t + _C[i] * h, y + h * (_A[i] @ K[:i]))
            y1 = y + h * (_B @ K)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y1))
            err = math.sqrt(float(np.mean(((h * (_E @ K)) / scale) ** 2)))
        if not np.isfinite(err):
            err = 2.0  # divergent trial step; shrink and retry
        if err <= 1.0:
            st = _Step(t, h, y.copy(), K=K.copy())
            st.y1 = y1.copy()
            steps.append(st)
            t += h
            y = y1
            k1 = K[6]  # first-same-as-last
            factor = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.2)
            h *= max(0.2, factor)
            nfev_stall = 0
            if observer is not None and observer(st):
                break
        else:
            h *= max(0.2, 0.9 * err ** -0.2)
            nfev_stall += 1
            if h < 1e-14 * max(1.0, abs(t)) or nfev_stall > 200:
                raise StepSizeError(f"step size collapsed at t={t:.6g}")
    return Trajectory(steps, t0, y0)


def _field_rhs(spec):
    def rhs(t, y):
        return fl.field_eval(spec, y)
    return rhs


def integrate(spec, w0, T, cfg=None):
    """Flow the field from w0 for time T; returns a dense Trajectory."""
    cfg = cfg or IntegratorConfig()
    if T > cfg.max_time:
        raise ValueError(f"T={T} exceeds max_time={cfg.max_time}")
    return _integrate_raw(_field_rhs(spec), 0.0, np.asarray(w0, float), T, cfg)


# -- variational transport ---------------------------------------------------

@dataclass
class VariationalState:
    t: float
    point: np.ndarray
    frame: np.ndarray
    log_frame: np.ndarray
    compound_frame: np.ndarray
    log_compound: float
    psi_cu_integral: float


def _variational_rhs(rhs_point, jac, d, n2, with_compound, psi_rate):
    def rhs(t, z):
        x = z[:d]
        J = jac(x)
        out = np.empty_like(z)
        out[:d] = rhs_point(t, x)
        F = z[d:d + d * d].reshape(d, d)
        out[d:d + d * d] = (J @ F).ravel()
        p = d + d * d
        if with_compound:
            A2 = cl.additive_compound(J, 2)
            C = z[p:p + n2 * n2].reshape(n2, n2)
            out[p:p + n2 * n2] = (A2 @ C).ravel()
            p += n2 * n2
        out[p] = psi_rate(x)
        return out
    return rhs


def integrate_variational(spec, w0, T, cfg=None, with_compound=True,
                          renormalize=True, rhs=None, jac=None, dim=None,
                          psi_rate=None, frame0=None):
    """Transport a full tangent frame (and optionally its second wedge)
    along the flow, QR-renormalizing each renorm_interval.

    With renormalize=False the raw matrices are returned, which is only
    safe for short horizons.  Custom rhs/jac callables override the field
    catalogue (the suspension charts use this).
    """
    cfg = cfg or IntegratorConfig()
    if rhs is None:
        rhs = _field_rhs(spec)
        jac = lambda x: fl.field_jacobian(spec, x)
        d = fl.model_dim(spec)
    else:
        d = dim
        if d is None or jac is None:
            raise ValueError("custom rhs needs dim and jac")
    if psi_rate is None:
        if spec is not None and fl.model_dim(spec) >= 3 \
                and fl.core_family(spec) in ("Y3", "Y4", "Y3hat", "Y4hat"):
            psi_rate = lambda x: x[2] / 5.0
        else:
            psi_rate = lambda x: 0.0
    n2 = d * (d - 1) // 2
    F = np.eye(d) if frame0 is None else np.asarray(frame0, float).copy()
    C = np.eye(n2)
    log_frame = np.zeros(F.shape[1])
    log_compound = 0.0
    psi_int = 0.0
    x = np.asarray(w0, dtype=float).copy()
    vrhs = _variational_rhs(rhs, jac, d, n2, with_compound, psi_rate)

    t = 0.0
    chunk = cfg.renorm_interval if renormalize else T
    while t < T - 1e-14 * max(1.0, T):
        dt = min(chunk, T - t)
        z0 = np.concatenate([x, F.ravel(),
                             C.ravel() if with_compound else np.empty(0),
                             [0.0]])
        traj = _integrate_raw(vrhs, t, z0, dt, cfg)
        z = traj.y_end
        x = z[:d]
        F = z[d:d + d * d].reshape(d, d).copy()
        p = d + d * d
        if with_compound:
            C = z[p:p + n2 * n2].reshape(n2, n2).copy()
            p += n2 * n2
        psi_int += z[p]
        t += dt
        if renormalize and t < T - 1e-14 * max(1.0, T):
            F, logs = cl.qr_renormalize(F)
            log_frame += logs
            if with_compound:
                nc = float(np.linalg.norm(C))
                log_compound += math.log(nc)
                C /= nc
    return VariationalState(t, x, F, log_frame,
                            C if with_compound else np.empty((0, 0)),
                            log_compound, psi_int)


def psi_cu_over_segment(spec, w0, T, cfg=None, p=2, rhs=None, jac=None,
                        dim=None):
    """Accumulated sectional-contraction log over [0, T]:
    -log(product of the p smallest singular values of the time-T derivative).

    The full tangent space serves as the center-unstable proxy for the bare
    cylinder fields.  Stable for long T via norm-rescaled triangular
    accumulation; returns the total, not a rate.
    """
    cfg = cfg or IntegratorConfig()
    if rhs is None:
        rhs = _field_rhs(spec)
        jac = lambda x: fl.field_jacobian(spec, x)
        d = fl.model_dim(spec)
    else:
        d = dim
    vrhs = _variational_rhs(rhs, jac, d, 0, False, lambda x: 0.0)
    F = np.eye(d)
    P_acc = np.eye(d)
    log_scale = 0.0
    x = np.asarray(w0, dtype=float).copy()
    t = 0.0
    while t < T - 1e-14 * max(1.0, T):
        dt = min(cfg.renorm_interval, T - t)
        z0 = np.concatenate([x, F.ravel(), [0.0]])
        traj = _integrate_raw(vrhs, t, z0, dt, cfg)
        z = traj.y_end
        x = z[:d]
        Fnew = z[d:d + d * d].reshape(d, d)
        F, logs = cl.qr_renormalize(Fnew)
        R = np.triu(F.T @ Fnew)  # R = Q^T (Dphi Q_prev)
        P_acc = R @ P_acc
        s = float(np.linalg.norm(P_acc))
        log_scale += math.log(s)
        P_acc /= s
        t += dt
    sv = np.linalg.svd(P_acc, compute_uv=False)
    logs_sv = np.log(sv) + log_scale
    return -float(np.sum(logs_sv[d - p:]))


# -- section events ----------------------------------------------------------

def _refine_crossing(rhs, t_base, y_base, t_guess, section, cfg):
    """Newton-polish a crossing time against freshly integrated substeps."""
    idx, level = section.coordinate_index, section.level
    sub = IntegratorConfig(rel_tol=min(cfg.rel_tol, 1e-12), abs_tol=1e-14,
                           max_step=cfg.max_step)
    t_star = t_guess
    y_star = y_base
    for _ in range(12):
        dt = t_star - t_base
        if dt <= 0.0:
            t_star = t_base
            y_star = y_base.copy()
            break
        traj = _integrate_raw(rhs, t_base, y_base, dt, sub)
        y_star = traj.y_end
        g = y_star[idx] - level
        dg = rhs(t_star, y_star)[idx]
        if dg == 0.0:
            break
        t_new = t_star - g / dg
        if abs(t_new - t_star) < 1e-15 * max(1.0, abs(t_star)):
            t_star = t_new
            break
        t_star = t_new
    dt = max(t_star - t_base, 0.0)
    traj = _integrate_raw(rhs, t_base, y_base, dt, sub) if dt > 0 else None
    y_star = traj.y_end if traj is not None else y_base.copy()
    return t_star, y_star, abs(y_star[idx] - level)


def section_crossing(spec, w0, section, cfg=None, t_max=None, min_time=0.0,
                     rhs=None):
    """First transversal crossing of a coordinate section after min_time.

    Returns a CrossingEvent, or a NoCrossing record carrying the elapsed
    time if the horizon runs out first.
    """
    cfg = cfg or IntegratorConfig()
    if rhs is None:
        rhs = _field_rhs(spec)
    horizon = t_max if t_max is not None else cfg.max_time
    idx, level, sgn = section.coordinate_index, section.level, section.direction

    w0 = np.asarray(w0, dtype=float)
    hit = {"last": w0}

    def crossed(g0, g1):
        return (g0 < 0.0 <= g1) if sgn > 0 else (g0 > 0.0 >= g1)

    def observer(st):
        hit["last"] = st.y1
        if st.t0 + st.h <= min_time:
            return False
        # scan subintervals of the dense output so a brief excursion
        # through the level inside one step is not skipped
        knots = np.linspace(st.t0, st.t0 + st.h, 6)
        gs = [st.y0[idx] - level]
        gs += [st.eval(tt)[idx] - level for tt in knots[1:-1]]
        gs.append(st.y1[idx] - level)
        a = b = None
        for i in range(5):
            if knots[i + 1] <= min_time:
                continue
            if crossed(gs[i], gs[i + 1]):
                a, b = knots[i], knots[i + 1]
                break
        if a is None:
            return False
        if min_time > a:
            ga = st.eval(min_time)[idx] - level
            if not crossed(ga, gs[i + 1]):
                return False
            a = min_time
        for _ in range(80):
            m = 0.5 * (a + b)
            gm = st.eval(m)[idx] - level
            if (gm < 0.0) == (sgn > 0):
                a = m
            else:
                b = m
            if b - a < 1e-13 * max(1.0, abs(b)):
                break
        hit["t_guess"] = 0.5 * (a + b)
        hit["step"] = st
        return True

    try:
        _integrate_raw(rhs, 0.0, w0, horizon, cfg, observer=observer)
    except StepSizeError:
        # finite-time escape through the profile shoulder; report the last
        # finite state as a non-crossing outcome
        return NoCrossing(horizon, np.asarray(hit["last"], dtype=float))
    if "t_guess" not in hit:
        return NoCrossing(horizon, np.asarray(hit["last"], dtype=float))
    st = hit["step"]
    t_star, y_star, res = _refine_crossing(rhs, st.t0, st.y0, hit["t_guess"],
                                           section, cfg)
    return CrossingEvent(t_star, y_star, res)


@dataclass
class TransitionResult:
    entry: np.ndarray
    exit: np.ndarray
    tau: float
    residual: float


def transition_map(spec, transverse, cfg=None, entry_level=-2.0,
                   exit_level=2.0, t_max=None):
    """Bottom-to-top section map of a cylinder field.

    transverse holds every coordinate except the vertical one; the vertical
    coordinate starts at entry_level and the map reports the transverse exit
    data and the flight time.  Raises NoCrossingError when the orbit never
    reaches the exit level (stable-manifold entries).
    """
    cfg = cfg or IntegratorConfig()
    fam = fl.core_family(spec)
    d = fl.model_dim(spec)
    v_idx = 2 if fam in ("Y3hat", "Y4hat") else d - 1
    tv = np.atleast_1d(np.asarray(transverse, dtype=float))
    if tv.size != d - 1:
        raise ValueError(f"expected {d - 1} transverse coordinates, got {tv.size}")
    w0 = np.insert(tv, v_idx, entry_level)
    section = SectionSpec(v_idx, exit_level, direction=1)
    res = section_crossing(spec, w0, section, cfg, t_max=t_max)
    if isinstance(res, NoCrossing):
        raise NoCrossingError(
            f"no section crossing within t={res.elapsed:.6g}", res.elapsed)
    exit_tv = np.delete(res.point, v_idx)
    return TransitionResult(tv, exit_tv, res.time, res.residual)


# -- trajectory export -------------------------------------------------------

def write_trajectory_csv(path, spec, w0, T, cfg=None, n_samples=1000):
    """Integrate with the full frame and dump uniform samples as CSV.

    Columns: t, the coordinates, the accumulated second-wedge inverse log
    norm, and the stream-function value for the planar families.
    """
    cfg = cfg or IntegratorConfig()
    d = fl.model_dim(spec)
    fam = fl.core_family(spec)
    rhs = _field_rhs(spec)
    jac = lambda x: fl.field_jacobian(spec, x)
    vrhs = _variational_rhs(rhs, jac, d, 0, False, lambda x: 0.0)

    sample_ts = np.linspace(0.0, T, n_samples)
    rows = []
    F = np.eye(d)
    P_acc = np.eye(d)
    log_scale = 0.0
    x = np.asarray(w0, dtype=float).copy()
    t = 0.0

    def emit(tt, xx):
        sv = np.linalg.svd(P_acc, compute_uv=False)
        logs = np.log(sv) + log_scale
        wedge_inv = -(logs[d - 1] + logs[d - 2])
        row = [tt] + list(xx) + [wedge_inv]
        if fam in fl.PLANAR_FAMILIES:
            row.append(fl.hamiltonian(spec, xx[0], xx[1]))
        rows.append(row)

    emit(0.0, x)
    k = 1
    while t < T - 1e-12 * max(1.0, T):
        dt = min(cfg.renorm_interval, T - t)
        z0 = np.concatenate([x, F.ravel(), [0.0]])
        traj = _integrate_raw(vrhs, t, z0, dt, cfg)
        # sample points that fall inside this chunk
        while k < n_samples and sample_ts[k] <= t + dt + 1e-12:
            z = traj.at(sample_ts[k])
            # wedge data is only renormalized at chunk ends; mid-chunk rows
            # reuse the last boundary value, adequate for plotting cadence
            emit(sample_ts[k], z[:d])
            k += 1
        z = traj.y_end
        x = z[:d]
        Fnew = z[d:d + d * d].reshape(d, d)
        F, _ = cl.qr_renormalize(Fnew)
        R = np.triu(F.T @ Fnew)
        P_acc = R @ P_acc
        s = float(np.linalg.norm(P_acc))
        log_scale += math.log(s)
        P_acc /= s
        t += dt

    header = (["t"] + [f"x{i}" for i in range(d)] + ["log_wedge2_inv"]
              + (["H"] if fam in fl.PLANAR_FAMILIES else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" for v in row])
    return len(rows)
