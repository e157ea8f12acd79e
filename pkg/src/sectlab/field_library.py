"""Closed-form vector fields on the plane and the open cylinder.

Every field is built from one scalar stream function H and two smooth
plateau bumps.  Jacobians are analytic (the bump profiles carry exact first
and second derivatives), so spectra at equilibria are reliable to rounding.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _scalar

__all__ = [
    "BumpSpec",
    "ModelSpec",
    "SingularityClass",
    "Equilibrium",
    "ClassificationError",
    "FAMILIES",
    "GLUED_FAMILIES",
    "LORENZ_LIKE",
    "ROVELLA_LIKE",
    "NON_SECTIONAL_SADDLE",
    "NON_HYPERBOLIC",
    "bump_eval",
    "bump_deriv",
    "bump_deriv2",
    "hamiltonian",
    "grad_hamiltonian",
    "model_dim",
    "core_family",
    "field_eval",
    "field_jacobian",
    "divergence",
    "classify_singularity",
    "equilibria",
    "spurious_equilibria_scan",
]

ROOT3_OVER_3 = math.sqrt(3.0) / 3.0

LORENZ_LIKE = "GeneralizedLorenzLike"
ROVELLA_LIKE = "GeneralizedRovellaLike"
NON_SECTIONAL_SADDLE = "NonSectionalSaddle"
NON_HYPERBOLIC = "NonHyperbolic"

PLANAR_FAMILIES = ("Y0", "Y1", "Yhat")
CYLINDER_FAMILIES = ("Y0", "Y1", "Y2", "Y3", "Y4", "Y3hat", "Y4hat", "Yhat")
GLUED_FAMILIES = ("G0", "G1", "G2", "G3", "G4",
                  "Ghat0", "Ghat1", "Ghat2", "Ghat3", "Ghat4")
FAMILIES = CYLINDER_FAMILIES + GLUED_FAMILIES


@dataclass(frozen=True)
class BumpSpec:
    """Even C-infinity plateau profile: 1 on [-plateau_end, plateau_end],
    0 outside (-support_end, support_end), monotone on each side."""

    plateau_end: float
    support_end: float

    def __post_init__(self):
        if not 0.0 < self.plateau_end < self.support_end:
            raise ValueError(
                f"need 0 < plateau_end < support_end, got "
                f"({self.plateau_end}, {self.support_end})"
            )


DEFAULT_XI0 = BumpSpec(2.45, 3.0)
# argument is a squared norm: plateau |y| <= 2, support |y| < 3
DEFAULT_XI1 = BumpSpec(4.0, 9.0)


def bump_eval(spec, t):
    f = np.vectorize(lambda s: _scalar.bump(s, spec.plateau_end, spec.support_end))
    out = f(t)
    return float(out) if np.ndim(t) == 0 else out


def bump_deriv(spec, t):
    f = np.vectorize(lambda s: _scalar.bump_d1(s, spec.plateau_end, spec.support_end))
    out = f(t)
    return float(out) if np.ndim(t) == 0 else out


def bump_deriv2(spec, t):
    f = np.vectorize(lambda s: _scalar.bump_d2(s, spec.plateau_end, spec.support_end))
    out = f(t)
    return float(out) if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    """One member of the field catalogue plus its profile parameters."""

    family: str
    omega: float = 2.0
    ell: int = 0
    zeta0: float = 0.0
    epsilon: float = 0.12
    xi0: BumpSpec = DEFAULT_XI0
    xi1: BumpSpec = DEFAULT_XI1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family in ("Y2", "G2", "Ghat2") and not self.omega > 1.0:
            raise ValueError(
                f"family {self.family} requires omega > 1 for fiberwise "
                f"domination, got omega={self.omega}"
            )
        if self.ell < 0 or int(self.ell) != self.ell:
            raise ValueError(f"ell must be a nonnegative integer, got {self.ell}")
        if not 0.0 <= self.zeta0 < 1.0:
            raise ValueError(f"zeta0 must lie in [0, 1), got {self.zeta0}")
        if self.zeta0 != 0.0 and not self.family.startswith("Ghat"):
            raise ValueError(
                f"slowdown zeta0={self.zeta0} only applies to Ghat families"
            )
        if not 0.0 < self.epsilon < 1.0 / 6.0:
            raise ValueError(f"epsilon must lie in (0, 1/6), got {self.epsilon}")


def core_family(spec):
    """Cylinder core of a glued family; identity on plain families."""
    fam = spec.family
    if fam.startswith("Ghat"):
        return "Y" + fam[4:]
    if fam.startswith("G"):
        return "Y" + fam[1:]
    return fam


def model_dim(spec):
    fam = core_family(spec)
    if fam in PLANAR_FAMILIES:
        return 2
    if fam == "Y2":
        return 3 + spec.ell
    if fam in ("Y3", "Y4"):
        return 3
    return 3 + spec.ell  # Y3hat / Y4hat


# -- stream function ---------------------------------------------------------

def _h_parts(spec, x, y):
    """Bump values and the shared quadratic for H and its derivatives."""
    a, b = spec.xi0.plateau_end, spec.xi0.support_end
    xi = _scalar.bump(x, a, b)
    xi1 = _scalar.bump_d1(x, a, b)
    xi2 = _scalar.bump_d2(x, a, b)
    q = 2.0 - x * x - y * y
    return xi, xi1, xi2, q


def hamiltonian(spec, x, y):
    xi, _, _, q = _h_parts(spec, x, y)
    return x * (-1.0 + xi * q) / 10.0


def grad_hamiltonian(spec, x, y):
    xi, xi1, _, q = _h_parts(spec, x, y)
    hx = (-1.0 + xi * q + x * xi1 * q - 2.0 * x * x * xi) / 10.0
    hy = -x * y * xi / 5.0
    return hx, hy


def _hess_hamiltonian(spec, x, y):
    xi, xi1, xi2, q = _h_parts(spec, x, y)
    hxx = ((2.0 * xi1 + x * xi2) * q - 4.0 * x * x * xi1 - 6.0 * x * xi) / 10.0
    hxy = -y * (xi + x * xi1) / 5.0
    hyy = -x * xi / 5.0
    return hxx, hxy, hyy


# -- radial helpers for the rotationally symmetric fields --------------------

def _radial_parts(spec, rho, z):
    """g = -z xi0(rho)/5 and the radial stream derivatives, with the
    removable rho -> 0 limits taken explicitly (the profile is flat there)."""
    a, b = spec.xi0.plateau_end, spec.xi0.support_end
    xi = _scalar.bump(rho, a, b)
    xi1 = _scalar.bump_d1(rho, a, b)
    xi2 = _scalar.bump_d2(rho, a, b)
    q = 2.0 - rho * rho - z * z
    g = -z * xi / 5.0
    g_z = -xi / 5.0
    h_rho = (-1.0 + xi * q + rho * xi1 * q - 2.0 * rho * rho * xi) / 10.0
    h_rho_z = -z * (xi + rho * xi1) / 5.0
    if rho <= a:
        # profile plateau: xi1 = xi2 = 0 identically
        g_r_over_rho = 0.0
        h_rr_over_rho = -6.0 * xi / 10.0
    else:
        g_r_over_rho = -z * xi1 / (5.0 * rho)
        h_rr_over_rho = ((2.0 * xi1 + rho * xi2) * q / rho
                         - 4.0 * rho * xi1 - 6.0 * xi) / 10.0
    return g, g_z, g_r_over_rho, h_rho, h_rho_z, h_rr_over_rho


# -- field evaluation --------------------------------------------------------

def field_eval(spec, w):
    """Field value at a point.  Glued families evaluate their cylinder core;
    the blended chart field lives in the suspension module."""
    fam = core_family(spec)
    w = np.asarray(w, dtype=float)
    d = model_dim(spec)
    if w.shape != (d,):
        raise ValueError(f"point shape {w.shape} does not match dimension {d}")
    if fam in PLANAR_FAMILIES:
        x, y = w
        hx, hy = grad_hamiltonian(spec, x, y)
        if fam == "Y0":
            return np.array([hy, -hx])
        if fam == "Y1":
            return np.array([hy, -2.0 * hx])
        return np.array([hy - x / 10.0, -hx])  # Yhat
    if fam == "Y2":
        x, z = w[0], w[-1]
        yv = w[1:-1]
        hx, _ = grad_hamiltonian(spec, x, z)
        # H_z of the planar stream evaluated at (x, z)
        xi = _scalar.bump(x, spec.xi0.plateau_end, spec.xi0.support_end)
        hz = -x * z * xi / 5.0
        r2 = float(yv @ yv)
        a1, b1 = spec.xi1.plateau_end, spec.xi1.support_end
        fib = spec.omega * _scalar.bump(r2, a1, b1)
        return np.concatenate(([hz], fib * yv, [-2.0 * hx]))
    # Y3 / Y4 (+hat): rotationally symmetric in (x, y)
    x, y, z = w[0], w[1], w[2]
    rho = math.hypot(x, y)
    g, _, _, h_rho, _, _ = _radial_parts(spec, rho, z)
    c = 2.0 if fam in ("Y4", "Y4hat") else 1.0
    out = np.zeros(d)
    out[0] = x * g
    out[1] = y * g
    out[2] = -c * h_rho
    return out


def field_jacobian(spec, w):
    """Analytic Jacobian of field_eval at a point."""
    fam = core_family(spec)
    w = np.asarray(w, dtype=float)
    d = model_dim(spec)
    if w.shape != (d,):
        raise ValueError(f"point shape {w.shape} does not match dimension {d}")
    if fam in PLANAR_FAMILIES:
        x, y = w
        hxx, hxy, hyy = _hess_hamiltonian(spec, x, y)
        if fam == "Y0":
            return np.array([[hxy, hyy], [-hxx, -hxy]])
        if fam == "Y1":
            return np.array([[hxy, hyy], [-2.0 * hxx, -2.0 * hxy]])
        return np.array([[hxy - 0.1, hyy], [-hxx, -hxy]])  # Yhat
    if fam == "Y2":
        x, z = w[0], w[-1]
        yv = w[1:-1]
        m = len(yv)
        a, b = spec.xi0.plateau_end, spec.xi0.support_end
        xi = _scalar.bump(x, a, b)
        xi1 = _scalar.bump_d1(x, a, b)
        hxx, hxz, _ = _hess_hamiltonian(spec, x, z)
        h_zx = -z * (xi + x * xi1) / 5.0
        h_zz = -x * xi / 5.0
        r2 = float(yv @ yv)
        a1, b1 = spec.xi1.plateau_end, spec.xi1.support_end
        f0 = _scalar.bump(r2, a1, b1)
        f1 = _scalar.bump_d1(r2, a1, b1)
        J = np.zeros((d, d))
        J[0, 0] = h_zx
        J[0, -1] = h_zz
        J[1:-1, 1:-1] = spec.omega * (f0 * np.eye(m) + 2.0 * f1 * np.outer(yv, yv))
        J[-1, 0] = -2.0 * hxx
        J[-1, -1] = -2.0 * hxz
        return J
    x, y, z = w[0], w[1], w[2]
    rho = math.hypot(x, y)
    g, g_z, gr, _, h_rho_z, hrr = _radial_parts(spec, rho, z)
    c = 2.0 if fam in ("Y4", "Y4hat") else 1.0
    J = np.zeros((d, d))
    J[0, 0] = g + x * x * gr
    J[0, 1] = x * y * gr
    J[0, 2] = x * g_z
    J[1, 0] = x * y * gr
    J[1, 1] = g + y * y * gr
    J[1, 2] = y * g_z
    J[2, 0] = -c * x * hrr
    J[2, 1] = -c * y * hrr
    J[2, 2] = -c * h_rho_z
    return J


def divergence(spec, w):
    return float(np.trace(field_jacobian(spec, w)))


# -- equilibria and their saddle taxonomy ------------------------------------

@dataclass(frozen=True)
class SingularityClass:
    tag: str
    lambda_s: Optional[float]
    lambda_u: Optional[float]


class ClassificationError(ValueError):
    pass


@dataclass
class Equilibrium:
    label: str
    location: np.ndarray
    jacobian: np.ndarray
    eigenvalues: np.ndarray
    sing_class: Optional[SingularityClass]


def classify_singularity(J, tol=1e-9):
    """Saddle taxonomy from the spectrum of the linearisation.

    lambda_s is the largest negative real eigenvalue, lambda_u the smallest
    real part among eigenvalues with nonnegative real part.  Any eigenvalue
    on the imaginary axis (within tol, scale-aware) makes the point
    NonHyperbolic; a spectrum without nonnegative real parts is not a saddle
    and raises.
    """
    ev = np.linalg.eigvals(np.asarray(J, dtype=float))
    scale = 1.0 + np.abs(ev)
    if np.any(np.abs(ev.real) < tol * scale):
        return SingularityClass(NON_HYPERBOLIC, None, None)
    if np.all(ev.real < 0.0):
        raise ClassificationError(
            "all eigenvalues have negative real part; not a saddle"
        )
    real_mask = np.abs(ev.imag) < tol * scale
    neg_real = ev.real[real_mask & (ev.real < 0.0)]
    if neg_real.size == 0:
        raise ClassificationError(
            "no negative real eigenvalue; stable spiral data fall outside "
            "the saddle taxonomy"
        )
    lam_s = float(np.max(neg_real))
    lam_u = float(np.min(ev.real[ev.real >= 0.0]))
    if abs(lam_s + lam_u) < tol * (1.0 + abs(lam_u)):
        return SingularityClass(NON_SECTIONAL_SADDLE, lam_s, lam_u)
    if -lam_u < lam_s:
        return SingularityClass(LORENZ_LIKE, lam_s, lam_u)
    return SingularityClass(ROVELLA_LIKE, lam_s, lam_u)


def _make_equilibrium(spec, label, loc):
    loc = np.asarray(loc, dtype=float)
    J = field_jacobian(spec, loc)
    ev = np.linalg.eigvals(J)
    try:
        cls = classify_singularity(J)
    except ClassificationError:
        cls = None
    return Equilibrium(label, loc, J, ev, cls)


def equilibria(spec):
    """Closed-form equilibria of the core field.

    For the rotationally symmetric families the neutral circle is reported
    through sample angles; for the hat-lifted families the fiber coordinates
    of every equilibrium are pinned at zero.
    """
    fam = core_family(spec)
    d = model_dim(spec)
    out = []

    def lift(p2or3):
        v = np.zeros(d)
        v[: len(p2or3)] = p2or3
        return v

    if fam in ("Y0", "Y1"):
        out.append(_make_equilibrium(spec, "sigma1", (0.0, -1.0)))
        out.append(_make_equilibrium(spec, "sigma2", (0.0, 1.0)))
        out.append(_make_equilibrium(spec, "zeta+", (ROOT3_OVER_3, 0.0)))
        out.append(_make_equilibrium(spec, "zeta-", (-ROOT3_OVER_3, 0.0)))
    elif fam == "Yhat":
        out.append(_make_equilibrium(spec, "sigma1", (0.0, -1.0)))
        out.append(_make_equilibrium(spec, "sigma2", (0.0, 1.0)))
        out.append(_make_equilibrium(spec, "sink+", (0.5, -0.5)))
        out.append(_make_equilibrium(spec, "sink-", (-0.5, -0.5)))
    elif fam == "Y2":
        lo = np.zeros(d)
        lo[-1] = -1.0
        hi = np.zeros(d)
        hi[-1] = 1.0
        out.append(_make_equilibrium(spec, "sigma1", lo))
        out.append(_make_equilibrium(spec, "sigma2", hi))
        zp = np.zeros(d)
        zp[0] = ROOT3_OVER_3
        out.append(_make_equilibrium(spec, "zeta+", zp))
        out.append(_make_equilibrium(spec, "zeta-", -zp))
    else:  # Y3 / Y4 and their hat lifts
        out.append(_make_equilibrium(spec, "sigma1", lift((0.0, 0.0, -1.0))))
        out.append(_make_equilibrium(spec, "sigma2", lift((0.0, 0.0, 1.0))))
        for alpha in (0.0, math.pi / 2.0, math.pi):
            p = (ROOT3_OVER_3 * math.cos(alpha),
                 ROOT3_OVER_3 * math.sin(alpha), 0.0)
            out.append(
                _make_equilibrium(spec, f"circle(alpha={alpha:.4f})", lift(p))
            )
    return out


def spurious_equilibria_scan(spec, band=(2.0, 3.0), n=4001):
    """Zeros of the field on the symmetry axis inside the profile shoulder.

    The shoulder of the radial profile can create extra equilibria on the
    line y = 0 (plane) or the ray z = 0 (symmetric families); any such zero
    blocks transition orbits passing its level set.  Returns both signs of x.
    """
    fam = core_family(spec)
    if fam not in ("Y0", "Y1", "Y3", "Y4", "Y3hat", "Y4hat"):
        return []
    d = model_dim(spec)

    def axis_point(x):
        p = np.zeros(d)
        p[0] = x
        return p

    def vertical_comp(x):
        if fam in ("Y0", "Y1"):
            return field_eval(spec, axis_point(x))[1]
        return field_eval(spec, axis_point(x))[2]

    lo, hi = band
    xs = np.linspace(lo, hi, n)
    vals = np.array([vertical_comp(x) for x in xs])
    found = []
    for i in range(n - 1):
        if vals[i] == 0.0:
            found.append(xs[i])
            continue
        if vals[i] * vals[i + 1] < 0.0:
            a, b = xs[i], xs[i + 1]
            fa = vals[i]
            for _ in range(200):
                m = 0.5 * (a + b)
                fm = vertical_comp(m)
                if fm == 0.0 or (b - a) < 1e-15:
                    break
                if fa * fm < 0.0:
                    b = m
                else:
                    a, fa = m, fm
            found.append(0.5 * (a + b))
    out = []
    for j, x in enumerate(found):
        for s in (1.0, -1.0):
            out.append(_make_equilibrium(spec, f"shoulder{j}{'+' if s > 0 else '-'}",
                                         axis_point(s * x)))
    return out
