"""Direct integration of the network coupled to its discretized thermostats.

The default scheme is a Strang splitting of the Hamiltonian into the
oscillator part ``p**2/2 + V_net(q)`` (velocity Verlet) and the bath part
``sum_m [bath energy - q_m * phi_m]``.  With ``q`` frozen the bath part is
an affine rotation of every mode, integrated in closed form together with
the momentum impulse it transmits, so the bath frequencies never enter the
stability limit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _fast
from .io import fmt
from .network import NetworkSpec, _Field
from .thermostat import BathState, SpectralGrid, compute_K, recurrence_horizon

log = logging.getLogger(__name__)

SCHEMES = ("strang_exact_bath", "rk4_reference")


class GuardError(ValueError):
    """Requested horizon runs past half of the bath recurrence time."""


class IntegratorError(RuntimeError):
    """Energy drift above the configured bound or a non-finite state."""


@dataclass
class FullState:
    q: np.ndarray
    p: np.ndarray
    baths: dict
    t: float = 0.0

    def copy(self) -> "FullState":
        return FullState(self.q.copy(), self.p.copy(), {k: b.copy() for k, b in self.baths.items()}, self.t)

    def reversed(self) -> "FullState":
        """Same configuration with all velocities negated."""
        return FullState(
            self.q.copy(), -self.p,
            {k: BathState(b.xi.copy(), -b.xidot) for k, b in self.baths.items()}, -self.t,
        )


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    horizon: float = 10.0
    sample_every: int = 100
    scheme: str = "strang_exact_bath"
    max_drift: float = 1e-4

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if int(self.sample_every) != self.sample_every or self.sample_every < 1:
            raise ValueError("sample_every must be a positive integer")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


class CoupledSystem:
    """Array view of a network plus its thermostats on one spectral grid."""

    def __init__(self, net: NetworkSpec, grid: SpectralGrid, K: Mapping | None = None, quad_tol: float = 1e-12):
        self.net = net
        self.grid = grid
        self.names = [t.name for t in net.thermostats]
        self.tv = np.array([net.index[t.vertex] for t in net.thermostats], dtype=int)
        self.nu = grid.nodes
        self.w = grid.weights
        m = len(self.names)
        self.kappa = np.array([t.coupling(self.nu) for t in net.thermostats]).reshape(m, grid.count)
        self.wk = self.w * self.kappa
        self.K_grid = (self.wk * self.kappa / self.nu**2).sum(axis=1)
        if K is None:
            K = {t.name: compute_K(t.coupling, quad_tol) for t in net.thermostats}
        self.K = dict(K)
        self.field = _Field(net)
        self.field_eff = _Field(net, net.vertex_K(self.K))
        self.recurrence = recurrence_horizon(grid) if m else math.inf
        self.incidence = np.zeros((net.n, m))
        self.incidence[self.tv, np.arange(m)] = 1.0

    @property
    def m(self) -> int:
        return len(self.names)

    def arrays(self, state: FullState):
        xi = np.array([state.baths[k].xi for k in self.names], dtype=float).reshape(self.m, self.grid.count)
        xd = np.array([state.baths[k].xidot for k in self.names], dtype=float).reshape(self.m, self.grid.count)
        return (np.array(state.q, dtype=float), np.array(state.p, dtype=float), xi, xd)

    def state(self, q, p, xi, xd, t) -> FullState:
        baths = {k: BathState(xi[i].copy(), xd[i].copy()) for i, k in enumerate(self.names)}
        return FullState(q.copy(), p.copy(), baths, float(t))

    # observables on raw arrays
    def phi(self, xi) -> np.ndarray:
        return (self.wk * xi).sum(axis=1)

    def bath_energies(self, xi, xd) -> np.ndarray:
        return 0.5 * (self.w * (xd * xd + (self.nu * xi) ** 2)).sum(axis=1)

    def energy(self, q, p, xi, xd) -> float:
        return (
            0.5 * float(p @ p) + self.field.network_energy(q)
            + float(self.bath_energies(xi, xd).sum()) - float(q[self.tv] @ self.phi(xi))
        )

    def energy_completed_square(self, q, p, xi, xd) -> float:
        """Kinetic + grid effective potential + squared deviation from the dressed profile."""
        qm = q[self.tv]
        dev = xi - self.kappa / self.nu**2 * qm[:, None]
        kin_bath = 0.5 * (self.w * xd * xd).sum()
        v_grid = self.field.network_energy(q) - 0.5 * float(self.K_grid @ (qm * qm))
        return 0.5 * float(p @ p) + float(kin_bath) + v_grid + 0.5 * float((self.w * (self.nu * dev) ** 2).sum())

    def derivatives(self, q, p, xi, xd):
        dp = self.field.network_force(q) + self.incidence @ self.phi(xi)
        dxd = -(self.nu**2) * xi + self.kappa * q[self.tv][:, None]
        return p.copy(), dp, xd.copy(), dxd


class _Strang:
    """Precomputed half-step bath propagator plus Verlet on the oscillators."""

    def __init__(self, sys: CoupledSystem, dt: float):
        self.sys = sys
        self.dt = dt
        h = 0.5 * dt
        self.h = h
        nu = sys.nu
        c, s = np.cos(nu * h), np.sin(nu * h)
        self.c = c
        self.s_over_nu = s / nu
        self.nu_s = nu * s
        self.dress = sys.kappa / nu**2
        # impulse integrals of phi over the half step
        self.a_u = sys.wk * (s / nu)
        self.a_v = sys.wk * ((1.0 - c) / nu**2)
        self.kh = sys.K_grid * h

    def bath_half(self, q, p, xi, xd):
        qm = q[self.sys.tv]
        eq = self.dress * qm[:, None]
        u = xi - eq
        imp = self.kh * qm + np.einsum("ij,ij->i", self.a_u, u) + np.einsum("ij,ij->i", self.a_v, xd)
        xi_new = eq + u * self.c + xd * self.s_over_nu
        xd_new = xd * self.c - u * self.nu_s
        p = p + self.sys.incidence @ imp
        return p, xi_new, xd_new

    def step(self, q, p, xi, xd, f):
        """One step; ``f`` is the network force at ``q``.  Returns the new force too."""
        h = self.h
        p, xi, xd = self.bath_half(q, p, xi, xd)
        p = p + h * f
        q = q + self.dt * p
        f = self.sys.field.network_force(q)
        p = p + h * f
        p, xi, xd = self.bath_half(q, p, xi, xd)
        return q, p, xi, xd, f


def rhs(sys: CoupledSystem, state: FullState):
    """Time derivatives ``(dq, dp, {name: (dxi, dxidot)})`` of the full system."""
    dq, dp, dxi, dxd = sys.derivatives(*sys.arrays(state))
    return dq, dp, {k: (dxi[i], dxd[i]) for i, k in enumerate(sys.names)}


def step_strang(sys: CoupledSystem, state: FullState, dt: float) -> FullState:
    q, p, xi, xd = sys.arrays(state)
    q, p, xi, xd, _ = _Strang(sys, dt).step(q, p, xi, xd, sys.field.network_force(q))
    return sys.state(q, p, xi, xd, state.t + dt)


def _rk4(sys: CoupledSystem, y, dt):
    def add(a, b, k):
        return tuple(x + k * d for x, d in zip(a, b))

    k1 = sys.derivatives(*y)
    k2 = sys.derivatives(*add(y, k1, 0.5 * dt))
    k3 = sys.derivatives(*add(y, k2, 0.5 * dt))
    k4 = sys.derivatives(*add(y, k3, dt))
    return tuple(x + dt / 6.0 * (a + 2 * b + 2 * c + d) for x, a, b, c, d in zip(y, k1, k2, k3, k4))


def step_rk4(sys: CoupledSystem, state: FullState, dt: float) -> FullState:
    q, p, xi, xd = _rk4(sys, sys.arrays(state), dt)
    return sys.state(q, p, xi, xd, state.t + dt)


def total_energy(sys: CoupledSystem, state: FullState) -> float:
    return sys.energy(*sys.arrays(state))


def total_energy_completed_square(sys: CoupledSystem, state: FullState) -> float:
    return sys.energy_completed_square(*sys.arrays(state))


@dataclass
class Trajectory:
    """Sampled observables; all series share ``times``.

    For backward runs ``times`` are negative and decrease, so the end of
    every array is always the far end of the run.
    """

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    bath_energy: np.ndarray
    coupling_force: np.ndarray
    energy: np.ndarray
    vertices: list
    thermostats: list
    thermostat_vertices: list
    recurrence_horizon: float = math.inf
    meta: dict = field(default_factory=dict)

    @property
    def sample_dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def span(self) -> float:
        return float(abs(self.times[-1] - self.times[0]))

    def q_of(self, vertex) -> np.ndarray:
        return self.q[:, self.vertices.index(vertex)]

    def header(self) -> list:
        return (
            ["t"] + [f"q_{v}" for v in self.vertices] + [f"p_{v}" for v in self.vertices] + ["E"]
            + [f"E_{k}" for k in self.thermostats] + [f"phi_{k}" for k in self.thermostats]
        )

    def to_csv(self, path) -> None:
        cols = np.column_stack([self.times, self.q, self.p, self.energy, self.bath_energy, self.coupling_force])
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for row in cols:
                w.writerow([fmt(x) for x in row])

    @classmethod
    def from_csv(cls, path, net: NetworkSpec, recurrence: float = math.inf, meta: dict | None = None) -> "Trajectory":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        vertices = list(net.vertices)
        names = [t.name for t in net.thermostats]
        expected = cls(np.zeros(0), None, None, None, None, None, vertices, names, []).header()
        if header != expected:
            raise ValueError(f"{path}: header does not match the scenario network")
        n, m = len(vertices), len(names)
        return cls(
            times=data[:, 0], q=data[:, 1:1 + n], p=data[:, 1 + n:1 + 2 * n], energy=data[:, 1 + 2 * n],
            bath_energy=data[:, 2 + 2 * n:2 + 2 * n + m], coupling_force=data[:, 2 + 2 * n + m:2 + 2 * n + 2 * m],
            vertices=vertices, thermostats=names, thermostat_vertices=[t.vertex for t in net.thermostats],
            recurrence_horizon=recurrence, meta=dict(meta or {}),
        )

    def drift(self) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(1.0, abs(e0)))


def check_guard(sys: CoupledSystem, horizon: float) -> None:
    if sys.m == 0:
        return
    limit = 0.5 * sys.recurrence
    if horizon > limit * (1 + 1e-12):
        raise GuardError(
            f"horizon {horizon:g} exceeds half the bath recurrence time ({limit:g}); "
            "refine the frequency grid or shorten the run"
        )


def simulate(sys: CoupledSystem, init: FullState, cfg: IntegratorConfig, backward: bool = False) -> Trajectory:
    """Integrate from ``init`` for ``cfg.horizon`` and sample observables.

    ``backward=True`` integrates towards negative times by reversing all
    velocities, running forward, and mapping the samples back.
    """
    check_guard(sys, cfg.horizon)
    if cfg.scheme == "rk4_reference" and cfg.dt * sys.grid.nu_max >= 2.0:
        raise ValueError("rk4_reference needs dt * nu_max < 2")
    start = init.reversed() if backward else init
    q, p, xi, xd = sys.arrays(start)
    if q.shape != (sys.net.n,) or xi.shape != (sys.m, sys.grid.count):
        raise ValueError("initial state does not match the system")
    nsteps, every = cfg.steps, int(cfg.sample_every)
    nsamp = nsteps // every + 1
    n, m = sys.net.n, sys.m
    T = np.empty(nsamp)
    Q, P = np.empty((nsamp, n)), np.empty((nsamp, n))
    EB, PHI, E = np.empty((nsamp, m)), np.empty((nsamp, m)), np.empty(nsamp)

    def record(k, step):
        T[k] = step * cfg.dt
        Q[k], P[k] = q, p
        EB[k] = sys.bath_energies(xi, xd)
        PHI[k] = sys.phi(xi)
        E[k] = sys.energy(q, p, xi, xd)

    record(0, 0)
    e0, scale = E[0], max(1.0, abs(E[0]))
    fast = cfg.scheme == "strang_exact_bath"
    if fast:
        args = _fast.compiled_args(_Strang(sys, cfg.dt))
        q, p, xi, xd = (np.ascontiguousarray(a) for a in (q, p, xi, xd))
        f = sys.field.network_force(q)
    k = 0
    done = 0
    while done < nsteps:
        chunk = min(every, nsteps - done)
        if fast:
            _fast.advance(q, p, xi, xd, f, chunk, cfg.dt, *args)
        else:
            for _ in range(chunk):
                q, p, xi, xd = _rk4(sys, (q, p, xi, xd), cfg.dt)
        done += chunk
        if chunk == every:
            k += 1
            record(k, done)
            if not (np.all(np.isfinite(Q[k])) and np.all(np.isfinite(P[k])) and np.isfinite(E[k])):
                raise IntegratorError(f"non-finite state at t={T[k]:g}")
            if abs(E[k] - e0) / scale > cfg.max_drift:
                raise IntegratorError(
                    f"energy drift {abs(E[k] - e0) / scale:.3g} above bound {cfg.max_drift:g} at t={T[k]:g}"
                )
    T, Q, P, EB, PHI, E = T[: k + 1], Q[: k + 1], P[: k + 1], EB[: k + 1], PHI[: k + 1], E[: k + 1]
    t0 = init.t
    if backward:
        T, P = t0 - T, -P
    else:
        T = t0 + T
    return Trajectory(
        times=T, q=Q, p=P, bath_energy=EB, coupling_force=PHI, energy=E,
        vertices=list(sys.net.vertices), thermostats=list(sys.names),
        thermostat_vertices=[t.vertex for t in sys.net.thermostats],
        recurrence_horizon=sys.recurrence,
        meta={"dt": cfg.dt, "scheme": cfg.scheme, "backward": backward, "source": "direct"},
    )


def final_state(sys: CoupledSystem, init: FullState, cfg: IntegratorConfig) -> FullState:
    """State after ``cfg.steps`` Strang steps, no sampling (used for reversibility checks)."""
    q, p, xi, xd = (np.ascontiguousarray(a) for a in sys.arrays(init))
    f = sys.field.network_force(q)
    _fast.advance(q, p, xi, xd, f, cfg.steps, cfg.dt, *_fast.compiled_args(_Strang(sys, cfg.dt)))
    return sys.state(q, p, xi, xd, init.t + cfg.steps * cfg.dt)


@dataclass
class DerivativeSeries:
    times: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    qdddot: np.ndarray


def central_differences(y: np.ndarray, h: float):
    """First, second and third central differences on interior points ``2..n-3``."""
    y = np.asarray(y, dtype=float)
    if len(y) < 5:
        raise ValueError("need at least 5 samples for finite differences")
    c = slice(2, -2)
    d1 = (y[3:-1] - y[1:-3]) / (2 * h)
    d2 = (y[3:-1] - 2 * y[c] + y[1:-3]) / h**2
    d3 = (y[4:] - 2 * y[3:-1] + 2 * y[1:-3] - y[:-4]) / (2 * h**3)
    return d1, d2, d3


def derivative_series(traj: Trajectory) -> DerivativeSeries:
    t = traj.times
    h = traj.sample_dt
    if len(t) >= 3 and not np.allclose(np.diff(t), h, rtol=1e-9, atol=1e-12):
        raise ValueError("derivative_series needs uniform sampling")
    d1, d2, d3 = central_differences(traj.q, h)
    return DerivativeSeries(t[2:-2], d1, d2, d3)


def with_horizon(cfg: IntegratorConfig, horizon: float) -> IntegratorConfig:
    return replace(cfg, horizon=horizon)
