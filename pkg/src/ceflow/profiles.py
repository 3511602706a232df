"""Smooth compactly supported profiles used throughout the construction.

Everything here is a plain function of numpy arrays so the building blocks
can be evaluated in closed form at arbitrary points (the grids only sample
them).  All profiles are built from the standard C-infinity bump
exp(-1/(1-u^2)) and the symmetric smooth step derived from exp(-1/t).
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad


def bump(u):
    """exp(-1/(1-u^2)) on |u|<1, zero outside.  Vectorized."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1.0
    um = u[m]
    out[m] = np.exp(-1.0 / (1.0 - um * um))
    return out


def bump_deriv(u):
    """d/du of bump(u)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1.0
    um = u[m]
    w = 1.0 - um * um
    out[m] = np.exp(-1.0 / w) * (-2.0 * um / (w * w))
    return out


def _sigma(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = t > 0.0
    out[m] = np.exp(-1.0 / t[m])
    return out


def _sigma_deriv(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = t > 0.0
    tm = t[m]
    out[m] = np.exp(-1.0 / tm) / (tm * tm)
    return out


def smooth_step(t):
    """Symmetric C-infinity step: 0 for t<=0, 1 for t>=1, s(t)+s(1-t)=1."""
    t = np.asarray(t, dtype=float)
    a = _sigma(t)
    b = _sigma(1.0 - t)
    with np.errstate(invalid="ignore"):
        out = np.where(a + b > 0.0, a / np.where(a + b > 0.0, a + b, 1.0), 0.0)
    return out


def smooth_step_deriv(t):
    t = np.asarray(t, dtype=float)
    a = _sigma(t)
    b = _sigma(1.0 - t)
    da = _sigma_deriv(t)
    db = -_sigma_deriv(1.0 - t)
    s = a + b
    out = np.zeros_like(t)
    m = s > 0.0
    out[m] = (da[m] * s[m] - a[m] * (da[m] + db[m])) / (s[m] * s[m])
    return out


def plateau(r, r_inner, r_outer):
    """Radial plateau: 1 on [0, r_inner], 0 on [r_outer, inf), smooth between."""
    r = np.asarray(r, dtype=float)
    return smooth_step((r_outer - r) / (r_outer - r_inner))


def plateau_deriv(r, r_inner, r_outer):
    r = np.asarray(r, dtype=float)
    return -smooth_step_deriv((r_outer - r) / (r_outer - r_inner)) / (r_outer - r_inner)


# second derivative of the plateau, via FD of the analytic first derivative;
# only the div-W consistency check needs it and a 1e-6 step keeps full float
# accuracy there because the profile scale is O(1).
_PLATEAU_FD = 1e-6


def plateau_second_deriv(r, r_inner, r_outer):
    h = _PLATEAU_FD
    return (plateau_deriv(r + h, r_inner, r_outer) - plateau_deriv(r - h, r_inner, r_outer)) / (2 * h)


def bump_l_s_norm(dim: int, s: float, deriv: int = 0) -> float:
    """||D^k bump(|y|)||_{L^s(R^dim)} ** s for k in {0,1}, radial quadrature."""
    if deriv == 0:
        f = lambda r: bump(np.array([r]))[0] ** s
    else:
        f = lambda r: abs(bump_deriv(np.array([r]))[0]) ** s
    if dim == 2:
        val, _ = quad(lambda r: f(r) * 2 * np.pi * r, 0.0, 1.0, limit=200)
    elif dim == 3:
        val, _ = quad(lambda r: f(r) * 4 * np.pi * r * r, 0.0, 1.0, limit=200)
    else:
        raise ValueError("dim must be 2 or 3")
    return val


def bump_normalization(dim: int) -> float:
    """c such that the integral of c*bump(|y|) over R^dim equals 1."""
    return 1.0 / bump_l_s_norm(dim, 1.0)


def partition_cutoff(tau):
    """chi: C_c^infty(-3/4, 3/4) with sum_n chi(tau - n) = 1 for every tau.

    chi(tau) = s(tau + 3/4) - s(tau - 1/4) with s the unit smooth step.
    """
    tau = np.asarray(tau, dtype=float)
    return smooth_step(tau + 0.75) - smooth_step(tau - 0.25)


def partition_cutoff_deriv(tau):
    tau = np.asarray(tau, dtype=float)
    return smooth_step_deriv(tau + 0.75) - smooth_step_deriv(tau - 0.25)


def plateau_cutoff(tau):
    """chibar: C_c^infty(-4/5, 4/5), identically 1 on [-3/4, 3/4]."""
    tau = np.asarray(tau, dtype=float)
    return smooth_step((0.8 - np.abs(tau)) / 0.05)


def plateau_cutoff_deriv(tau):
    tau = np.asarray(tau, dtype=float)
    return -np.sign(tau) * smooth_step_deriv((0.8 - np.abs(tau)) / 0.05) / 0.05
