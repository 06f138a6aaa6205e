"""Bath elimination: memory kernel, noise term and the reduced (GLE) integrator.

Solving every bath mode by the Duhamel formula turns the coupling force
into ``phi(t) = phi0(t) + int_0^t w(tau) q(t - tau) d tau`` where ``phi0``
is the free evolution of the initial bath data and

    w(tau) = int kappa(nu)**2 sin(nu tau) / nu d nu

(real and odd because ``kappa**2`` is even for the supported families).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .dynamics import CoupledSystem, FullState, IntegratorConfig, IntegratorError, Trajectory, check_guard
from .io import fmt
from .thermostat import BathInitSpec, BathState, CouplingSpec, SpectralGrid, compute_K, init_bath


class KernelTailError(ValueError):
    """Tabulated kernel has not decayed at the requested cutoff."""


@dataclass
class MemoryKernel:
    tau: np.ndarray
    w: np.ndarray
    K: float
    dtau: float
    quad_error: float = 0.0

    @property
    def tau_max(self) -> float:
        return float(self.tau[-1])

    def integral(self) -> np.ndarray:
        """Running trapezoid ``int_0^tau w`` on the lag grid."""
        out = np.zeros_like(self.w)
        out[1:] = np.cumsum(0.5 * self.dtau * (self.w[1:] + self.w[:-1]))
        return out

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["tau", "w"])
            for t, v in zip(self.tau, self.w):
                wr.writerow([fmt(t), fmt(v)])


def _kernel_value(c: CouplingSpec, tau: float, L: float, tol: float) -> tuple[float, float]:
    if tau == 0.0:
        return 0.0, 0.0

    def f(nu):
        # kappa^2 / nu
        return nu * c.kappa_sq_over_nu_sq(nu)

    v, e = integrate.quad(f, 0.0, L, weight="sin", wvar=tau, epsabs=tol, epsrel=1e-13, limit=400)
    return 2.0 * v, 2.0 * e


def build_kernel(
    c: CouplingSpec, dtau: float, tau_max: float, tail_tol: float = 1e-10, quad_tol: float = 1e-13
) -> MemoryKernel:
    """Tabulate ``w`` on ``0, dtau, ..., tau_max`` by adaptive sine quadrature."""
    if not dtau > 0 or not tau_max > 0:
        raise ValueError("dtau and tau_max must be positive")
    n = int(round(tau_max / dtau))
    if abs(n * dtau - tau_max) > 1e-9 * tau_max:
        raise ValueError("tau_max must be a multiple of dtau")
    # frequency truncation: one-sided tail of kappa^2/nu below quad_tol
    L = c.tail_cutoff(quad_tol)
    tau = np.arange(n + 1) * dtau
    w = np.empty(n + 1)
    err = 0.0
    for k, t in enumerate(tau):
        w[k], e = _kernel_value(c, float(t), L, quad_tol)
        err = max(err, e)
    if abs(w[-1]) > tail_tol:
        raise KernelTailError(f"|w(tau_max)| = {abs(w[-1]):.3g} exceeds tail tolerance {tail_tol:g}")
    return MemoryKernel(tau, w, compute_K(c), float(dtau), err + quad_tol)


def gauss_kernel_exact(tau, sigma: float = 1.0, a: float = 1.0):
    """Closed form of ``w`` for ``kappa = a nu exp(-nu^2/(2 sigma^2))``."""
    tau = np.asarray(tau, dtype=float)
    return a**2 * math.sqrt(math.pi) * sigma**3 * tau / 2.0 * np.exp(-(sigma * tau) ** 2 / 4.0)


def _pv_pole(h, c: float, delta: float, tol: float) -> tuple[float, float]:
    """Principal value of ``int h(x) / (x - c) dx`` over the real line.

    The symmetric window ``|x - c| < delta`` is folded into the regular
    integrand ``(h(c + s) - h(c - s)) / s`` on ``(0, delta)``.
    """
    def odd_part(s):
        return (h(c + s) - h(c - s)) / s if s > 0 else 0.0

    kw = dict(epsabs=tol, epsrel=1e-12, limit=400)
    inner, e0 = integrate.quad(odd_part, 0.0, delta, **kw)
    left, e1 = integrate.quad(lambda x: h(x) / (x - c), -np.inf, c - delta, **kw)
    right, e2 = integrate.quad(lambda x: h(x) / (x - c), c + delta, np.inf, **kw)
    return inner + left + right, e0 + e1 + e2


def w_hat(c: CouplingSpec, nu) -> complex:
    """Fourier transform ``2 pi kappa(nu)^2 / (i nu)`` of the kernel."""
    return 2.0 * math.pi * float(c.kappa_sq(nu)) / (1j * nu)


def w_diamond_hat(c: CouplingSpec, nu: float, sign: int = 1, tol: float = 1e-12) -> tuple[complex, float]:
    """Fourier transform of the causal (``sign=+1``) or anti-causal half-line kernel.

    Returns ``(value, error_estimate)``.  The principal-value integral is
    split into its two simple poles at ``+-nu`` and each is evaluated by
    symmetric excision.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    nu = float(nu)
    # lam * w_hat(lam) / (2 pi i) = -kappa(lam)^2, smooth through lam = 0
    def h(lam):
        return -float(c.kappa_sq(lam))

    if nu == 0.0:
        # -int h / lam^2 = int kappa^2 / lam^2
        val, err = integrate.quad(lambda x: float(c.kappa_sq_over_nu_sq(x)), -np.inf, np.inf, epsabs=tol, epsrel=1e-13)
        return complex(val, 0.0), err
    a = abs(nu)
    delta = 0.5 * a
    # 1/(nu^2 - lam^2) = (1/(2 nu)) * (1/(lam + nu) - 1/(lam - nu))
    p_plus, e1 = _pv_pole(h, -nu, delta, tol)
    p_minus, e2 = _pv_pole(h, nu, delta, tol)
    pv = (p_plus - p_minus) / (2.0 * nu)
    jump = sign * 0.25 * (w_hat(c, nu) - w_hat(c, -nu))
    return jump + pv, (e1 + e2) / (2.0 * a)


def noise_term(c: CouplingSpec, bath0, g: SpectralGrid, t) -> np.ndarray:
    """Free-bath part of the coupling force on the grid.

    ``sum_k w_k kappa_k [xi0_k cos(nu_k t) + xidot0_k sin(nu_k t) / nu_k]``
    """
    if isinstance(bath0, BathInitSpec):
        bath0 = init_bath(bath0, c, g)
    nu = g.nodes
    wk = g.weights * c(nu)
    a, b = wk * bath0.xi, wk * bath0.xidot / nu
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(t.shape)
    for s in range(0, len(t), 1024):
        ph = np.outer(t[s:s + 1024], nu)
        out[s:s + 1024] = np.cos(ph) @ a + np.sin(ph) @ b
    return out


def integrate_gle(
    sys: CoupledSystem,
    init: FullState,
    cfg: IntegratorConfig,
    kernels: dict,
    track_bath_energy: bool = True,
) -> Trajectory:
    """Integrate the reduced equation with the baths eliminated.

    Kick-drift-kick on the oscillators; the memory integral is a trapezoid
    sum over the stored ``q`` history (``w(0) = 0`` keeps it explicit).
    Bath energies are reconstructed from ``xi0 + kappa * qhat^t`` where
    ``qhat^t`` is the running transform of the history.
    """
    check_guard(sys, cfg.horizon)
    dt, nsteps, every = cfg.dt, cfg.steps, int(cfg.sample_every)
    ker = []
    for name in sys.names:
        kr = kernels[name]
        if abs(kr.dtau - dt) > 1e-12 * dt:
            raise ValueError("kernel lag spacing must equal the time step")
        ker.append(kr)
    m, n = sys.m, sys.net.n
    q, p, xi0, xd0 = sys.arrays(init)
    times = np.arange(nsteps + 1) * dt
    phi0 = np.array([
        noise_term(t.coupling, BathState(xi0[i], xd0[i]), sys.grid, times)
        for i, t in enumerate(sys.net.thermostats)
    ]).reshape(m, nsteps + 1)
    hist = np.zeros((m, nsteps + 1))
    tv = sys.tv
    hist[:, 0] = q[tv]
    wts = [k.w.copy() for k in ker]
    nu, w_grid = sys.nu, sys.w
    bold0 = xd0 + 1j * nu * xi0
    qhat = np.zeros((m, sys.grid.count), dtype=complex)
    prev_phase = np.ones(sys.grid.count, dtype=complex)

    def memory(step):
        out = np.empty(m)
        for i in range(m):
            L = len(wts[i]) - 1
            top = min(step, L)
            if top == 0:
                out[i] = 0.0
                continue
            seg = hist[i, step - top:step][::-1]  # q at lags 1..top
            s = wts[i][1:top + 1] @ seg
            s -= 0.5 * wts[i][top] * seg[-1]
            out[i] = dt * s
        return out

    def force(step, qv):
        phi = phi0[:, step] + memory(step)
        return sys.field.network_force(qv) + sys.incidence @ phi, phi

    nsamp = nsteps // every + 1
    T, Q, P = np.empty(nsamp), np.empty((nsamp, n)), np.empty((nsamp, n))
    EB, PHI, E = np.full((nsamp, m), np.nan), np.empty((nsamp, m)), np.full(nsamp, np.nan)

    def record(k, step, phi):
        T[k], Q[k], P[k], PHI[k] = step * dt, q, p, phi
        if track_bath_energy:
            EB[k] = 0.5 * (w_grid * np.abs(bold0 + sys.kappa * qhat) ** 2).sum(axis=1)
            E[k] = 0.5 * p @ p + sys.field.network_energy(q) + EB[k].sum() - q[tv] @ phi

    f, phi = force(0, q)
    record(0, 0, phi)
    k = 0
    h = 0.5 * dt
    for step in range(1, nsteps + 1):
        p = p + h * f
        q = q + dt * p
        hist[:, step] = q[tv]
        f, phi = force(step, q)
        p = p + h * f
        if track_bath_energy:
            phase = np.exp(-1j * nu * (step * dt))
            qhat += h * (prev_phase * hist[:, step - 1:step] + phase * hist[:, step:step + 1])
            prev_phase = phase
        if step % every == 0:
            k += 1
            record(k, step, phi)
            if not np.all(np.isfinite(Q[k])):
                raise IntegratorError(f"non-finite state at t={T[k]:g}")
    sl = slice(0, k + 1)
    return Trajectory(
        times=init.t + T[sl], q=Q[sl], p=P[sl], bath_energy=EB[sl], coupling_force=PHI[sl], energy=E[sl],
        vertices=list(sys.net.vertices), thermostats=list(sys.names),
        thermostat_vertices=[t.vertex for t in sys.net.thermostats],
        recurrence_horizon=sys.recurrence,
        meta={"dt": dt, "scheme": "gle_trapezoid_kdk", "backward": False, "source": "gle"},
    )


@dataclass
class ThetaSeries:
    times: np.ndarray
    theta: np.ndarray
    names: list

    def tail_sup(self, fraction: float = 0.25) -> np.ndarray:
        start = int(len(self.times) * (1.0 - fraction))
        return np.abs(self.theta[start:]).max(axis=0)

    def offset(self) -> np.ndarray:
        """Mean of theta over the tail quarter (systematic part)."""
        start = int(len(self.times) * 0.75)
        return self.theta[start:].mean(axis=0)


def theta_decomposition(traj: Trajectory, K: dict) -> ThetaSeries:
    """``theta_m = phi_m - K_m q_m`` for every thermostat of the trajectory."""
    cols = [traj.vertices.index(v) for v in traj.thermostat_vertices]
    kv = np.array([K[name] for name in traj.thermostats])
    theta = traj.coupling_force - kv * traj.q[:, cols]
    return ThetaSeries(traj.times.copy(), theta, list(traj.thermostats))
