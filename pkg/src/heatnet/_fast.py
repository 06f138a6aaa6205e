"""Fused inner loop of the Strang integrator.

Same arithmetic as ``dynamics._Strang.step``, compiled so that a step costs
one pass over the bath modes instead of a dozen array temporaries.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _horner_row(c, k, x):
    out = c[k, c.shape[1] - 1]
    for j in range(c.shape[1] - 2, -1, -1):
        out = out * x + c[k, j]
    return out


@njit(cache=True)
def network_force(q, pin1, edge1, ei, ej, f):
    for i in range(q.shape[0]):
        f[i] = -_horner_row(pin1, i, q[i])
    for e in range(ei.shape[0]):
        d = _horner_row(edge1, e, q[ei[e]] - q[ej[e]])
        f[ei[e]] -= d
        f[ej[e]] += d


@njit(cache=True)
def _bath_half(q, p, xi, xd, tv, c, s_over_nu, nu_s, dress, a_u, a_v, kh):
    nm, nk = xi.shape
    for m in range(nm):
        qm = q[tv[m]]
        imp = kh[m] * qm
        for k in range(nk):
            eq = dress[m, k] * qm
            u = xi[m, k] - eq
            v = xd[m, k]
            imp += a_u[m, k] * u + a_v[m, k] * v
            xi[m, k] = eq + u * c[k] + v * s_over_nu[k]
            xd[m, k] = v * c[k] - u * nu_s[k]
        p[tv[m]] += imp


@njit(cache=True)
def advance(q, p, xi, xd, f, nsteps, dt, tv, c, s_over_nu, nu_s, dress, a_u, a_v, kh, pin1, edge1, ei, ej):
    """Run ``nsteps`` steps in place; ``f`` holds the network force at ``q``."""
    h = 0.5 * dt
    n = q.shape[0]
    for _ in range(nsteps):
        _bath_half(q, p, xi, xd, tv, c, s_over_nu, nu_s, dress, a_u, a_v, kh)
        for i in range(n):
            p[i] += h * f[i]
            q[i] += dt * p[i]
        network_force(q, pin1, edge1, ei, ej, f)
        for i in range(n):
            p[i] += h * f[i]
        _bath_half(q, p, xi, xd, tv, c, s_over_nu, nu_s, dress, a_u, a_v, kh)


def compiled_args(stepper):
    """Contiguous argument tuple for ``advance`` built from a ``_Strang``."""
    s = stepper.sys
    fld = s.field
    arr = np.ascontiguousarray
    return (
        s.tv.astype(np.int64), arr(stepper.c), arr(stepper.s_over_nu), arr(stepper.nu_s),
        arr(stepper.dress), arr(stepper.a_u), arr(stepper.a_v), arr(stepper.kh),
        arr(fld.pin1), arr(fld.edge1), fld.ei.astype(np.int64), fld.ej.astype(np.int64),
    )
