"""Post-processing of simulated trajectories: critical set of the effective
potential, convergence diagnostics and the two-thermostat energy balance."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import qmc

from .dynamics import CoupledSystem, FullState, Trajectory, central_differences
from .network import NetworkSpec, _Field
from .thermostat import BathState

log = logging.getLogger(__name__)


class GuardViolation(ValueError):
    """Trajectory extends past half of the bath recurrence time."""


@dataclass
class CriticalPoint:
    q: np.ndarray
    morse_index: int
    hessian_min_abs_eigenvalue: float
    grad_norm: float

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "morse_index": self.morse_index,
            "hessian_min_abs_eigenvalue": self.hessian_min_abs_eigenvalue,
            "grad_norm": self.grad_norm,
        }


@dataclass
class CriticalSet:
    points: list
    search_box: float
    dedup_tol: float
    failed_starts: int = 0
    n_starts: int = 0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.array([p.q for p in self.points])

    def to_dict(self) -> dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "search_box": [-self.search_box, self.search_box],
            "dedup_tol": self.dedup_tol,
            "failed_starts": self.failed_starts,
            "n_starts": self.n_starts,
        }


def _newton(fld: _Field, x: np.ndarray, tol: float, step_tol: float, max_iter: int):
    """Newton on ``grad V_eff`` with a Levenberg-damped, backtracked fallback.

    Iterates past ``|grad| < tol`` until the step itself is negligible, so
    starts converging slowly onto a degenerate point end up together.
    """
    g = fld.grad(x)
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        H = fld.hess(x)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        ok = bool(np.all(np.isfinite(step)))
        if ok:
            x_new = x + step
            g_new = fld.grad(x_new)
            gn_new = float(np.linalg.norm(g_new))
        if not ok or gn_new > gn:
            # damped fallback
            mu = 1e-3 * max(1.0, float(np.abs(H).max()))
            accepted = False
            for _ in range(60):
                step = -np.linalg.solve(H.T @ H + mu * np.eye(len(x)), H.T @ g)
                x_new = x + step
                g_new = fld.grad(x_new)
                gn_new = float(np.linalg.norm(g_new))
                if gn_new < gn:
                    accepted = True
                    break
                mu *= 4.0
            if not accepted:
                break
        x, g, gn = x_new, g_new, gn_new
        if not np.all(np.isfinite(x)):
            return x, math.inf
        if gn < tol and float(np.linalg.norm(step)) < step_tol:
            break
    return x, gn


def find_critical_points(
    net: NetworkSpec,
    K: Mapping,
    box: float = 5.0,
    n_starts: int | None = None,
    tol: float = 1e-10,
    dedup_tol: float = 1e-6,
    seed: int = 0,
    max_iter: int = 200,
) -> CriticalSet:
    """Critical points of ``V_eff`` from quasi-random Newton starts in ``[-box, box]^N``.

    ``K`` maps vertices to their total coupling constant.  Points are
    classified by the signs of the Hessian eigenvalues and returned in
    lexicographic order.
    """
    n = net.n
    n_starts = 64 * n if n_starts is None else int(n_starts)
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    if not box > 0 or not math.isfinite(box):
        raise ValueError("box must be a positive finite half-width")
    fld = _Field(net, K)
    starts = qmc.scale(qmc.Halton(d=n, seed=seed).random(n_starts), -box, box) if n > 0 else np.zeros((1, 0))
    found: list = []
    failed = 0
    for x0 in starts:
        x, gn = _newton(fld, x0.copy(), tol, 1e-3 * dedup_tol, max_iter)
        if not gn < tol:
            failed += 1
            continue
        for k, (y, gy) in enumerate(found):
            if np.linalg.norm(x - y) <= dedup_tol:
                if gn < gy:
                    found[k] = (x, gn)
                break
        else:
            found.append((x, gn))
    if failed:
        log.info("%d of %d Newton starts did not converge", failed, n_starts)
    found.sort(key=lambda t: tuple(np.round(t[0], 9)))
    points = []
    for x, gn in found:
        ev = np.linalg.eigvalsh(fld.hess(x))
        points.append(CriticalPoint(x, int((ev < 0).sum()), float(np.abs(ev).min()), float(gn)))
    return CriticalSet(points, float(box), float(dedup_tol), failed, n_starts)


def dist_to_critical_set(q, cs: CriticalSet) -> tuple[float, int]:
    """Euclidean distance to the nearest critical point and its index (lowest on ties)."""
    if not cs.points:
        raise ValueError("critical set is empty")
    d = np.linalg.norm(cs.array - np.asarray(q, dtype=float), axis=1)
    k = int(np.argmin(d))
    return float(d[k]), k


def spectral_diagnostic(series, sample_dt: float, eps: float) -> float:
    """Fraction of windowed power at angular frequencies ``|lambda| > eps``.

    The sample mean is kept as an exact zero-frequency component; only the
    fluctuation around it is Hann-windowed and transformed, so the window's
    own sidelobes never move mean power out of the zero bin.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or len(x) < 16:
        raise ValueError("spectral diagnostic needs a 1-d series of at least 16 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("series must be finite")
    win = np.hanning(len(x))
    mean = x.mean()
    p_dc = (win.sum() * mean) ** 2
    Y = np.fft.fft(win * (x - mean))
    lam = 2.0 * np.pi * np.fft.fftfreq(len(x), d=abs(sample_dt))
    power = np.abs(Y) ** 2
    total = p_dc + power.sum()
    if total == 0.0:
        return 0.0
    return float(power[np.abs(lam) > eps].sum() / total)


def slowest_frequency(net: NetworkSpec, K: Mapping, q_c) -> float:
    """Smallest linearized frequency at ``q_c`` (square root of the least positive Hessian eigenvalue)."""
    ev = np.linalg.eigvalsh(_Field(net, K).hess(np.asarray(q_c, dtype=float)))
    pos = ev[ev > 1e-12]
    return float(np.sqrt(pos.min())) if len(pos) else 0.0


@dataclass
class ConvergenceReport:
    approached_point: int | None
    dist_final: float
    tail_p: float
    tail_qddot: float
    tail_qdddot: float
    tail_dE_dt: dict
    theta_tail: dict
    spectral_ratio: float
    spectral_eps: float
    energy_sum_defect: float
    energy_sum_defect_final: float
    monotone_tail: bool
    tail_window: tuple
    E0: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _tail_start(n: int, fraction: float) -> int:
    return min(int(n * (1.0 - fraction)), n - 1)


def _monotone_envelope(d: np.ndarray, blocks: int = 8, ripple: float = 0.1, floor: float = 1e-9) -> bool:
    chunks = [c for c in np.array_split(d, blocks) if len(c)]
    env = [float(c.max()) for c in chunks]
    return all(b <= (1.0 + ripple) * a + floor for a, b in zip(env, env[1:]))


def convergence_report(
    traj: Trajectory,
    cs: CriticalSet,
    net: NetworkSpec,
    K: Mapping,
    tail_fraction: float = 0.25,
    approach_tol: float = 0.05,
    eps_fraction: float = 0.1,
) -> ConvergenceReport:
    """Tail diagnostics of a trajectory against the critical set.

    ``K`` maps thermostat names to their coupling constants.  All tails are
    sup norms over the final ``tail_fraction`` of the samples.
    """
    if traj.span > 0.5 * traj.recurrence_horizon * (1 + 1e-12):
        raise GuardViolation(
            f"trajectory span {traj.span:g} exceeds half the recurrence time {traj.recurrence_horizon:g}"
        )
    n = len(traj.times)
    if n < 32:
        raise ValueError("trajectory too short for tail diagnostics")
    s = _tail_start(n, tail_fraction)
    dist = np.linalg.norm(cs.array[None, :, :] - traj.q[:, None, :], axis=2).min(axis=1)
    d_final, k = dist_to_critical_set(traj.q[-1], cs)
    h = traj.sample_dt
    _, d2, d3 = central_differences(traj.q, h)
    s2 = max(s - 2, 0)
    Kv = net.vertex_K(K)
    q_c = cs.points[k].q

    tail_dE, theta = {}, {}
    cols = [traj.vertices.index(v) for v in traj.thermostat_vertices]
    for j, name in enumerate(traj.thermostats):
        dE = np.gradient(traj.bath_energy[:, j], h)
        tail_dE[name] = float(np.abs(dE[s:]).max())
        th = traj.coupling_force[:, j] - K[name] * traj.q[:, cols[j]]
        theta[name] = float(np.abs(th[s:]).max())

    omega = slowest_frequency(net, Kv, q_c)
    eps = eps_fraction * omega
    ratios = [spectral_diagnostic(traj.q[s:, c], h, eps) for c in sorted(set(cols))]

    fld = _Field(net, Kv)
    E0 = float(traj.energy[0])
    limit = E0 - fld.veff(q_c) + 0.5 * float(fld.K @ (q_c * q_c))
    defect = np.abs(traj.bath_energy.sum(axis=1) - limit)
    return ConvergenceReport(
        approached_point=k if d_final < approach_tol else None,
        dist_final=d_final,
        tail_p=float(np.abs(traj.p[s:]).max()),
        tail_qddot=float(np.abs(d2[s2:]).max()),
        tail_qdddot=float(np.abs(d3[s2:]).max()),
        tail_dE_dt=tail_dE,
        theta_tail=theta,
        spectral_ratio=float(max(ratios)) if ratios else 0.0,
        spectral_eps=eps,
        energy_sum_defect=float(defect[s:].max()),
        energy_sum_defect_final=float(defect[-1]),
        monotone_tail=_monotone_envelope(dist[s:]),
        tail_window=(float(traj.times[s]), float(traj.times[-1])),
        E0=E0,
    )


# two-thermostat analysis

def bold(b: BathState, nu: np.ndarray) -> np.ndarray:
    """Complex mode amplitude ``xidot + i nu xi``."""
    return b.xidot + 1j * nu * b.xi


def transform_pair(b1: BathState, b2: BathState) -> tuple[BathState, BathState]:
    """Sum and difference modes ``((b1 + b2)/sqrt 2, (b1 - b2)/sqrt 2)``.

    The map is its own inverse.
    """
    if b1.xi.shape != b2.xi.shape:
        raise ValueError("bath states live on different grids")
    r = 1.0 / math.sqrt(2.0)
    return (
        BathState(r * (b1.xi + b2.xi), r * (b1.xidot + b2.xidot)),
        BathState(r * (b1.xi - b2.xi), r * (b1.xidot - b2.xidot)),
    )


inverse_transform_pair = transform_pair


def _check_two_bath(sys: CoupledSystem) -> None:
    if sys.net.n != 1 or sys.m != 2:
        raise ValueError("two-bath analysis needs exactly one oscillator and two thermostats")
    c1, c2 = (t.coupling for t in sys.net.thermostats)
    if c1 != c2:
        raise ValueError("the two thermostats must share the same coupling")


def two_bath_transform(sys: CoupledSystem, state: FullState) -> tuple[BathState, BathState]:
    _check_two_bath(sys)
    return transform_pair(*(state.baths[k] for k in sys.names))


def inner(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> complex:
    """Weighted inner product ``sum w conj(a) b``."""
    return complex(np.sum(w * np.conj(a) * b))


def running_transform(times: np.ndarray, q: np.ndarray, nu: np.ndarray, stride: int = 1) -> np.ndarray:
    """Trapezoid ``int e^{-i nu t} q(t) dt`` over the sampled window."""
    t, x = times[::stride], q[::stride]
    h = np.diff(t)
    out = np.zeros(len(nu), dtype=complex)
    for a in range(0, len(t) - 1, 2048):
        b = min(a + 2048, len(t) - 1)
        left = np.exp(-1j * np.outer(t[a:b], nu)) * x[a:b, None]
        right = np.exp(-1j * np.outer(t[a + 1:b + 1], nu)) * x[a + 1:b + 1, None]
        out += (0.5 * h[a:b, None] * (left + right)).sum(axis=0)
    return out


@dataclass
class TwoBathReport:
    E1_final: float
    E2_final: float
    E_sum_initial: float
    D: float
    D_quad_error: float
    predicted_difference: float
    observed_difference: float
    agreement_error: float
    relative_agreement_error: float
    truncation_time: float
    sum_defect: float | None = None
    indeterminate: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def equilibrium_defect(
    sys: CoupledSystem,
    init: FullState,
    traj: Trajectory,
    truncation: float | None = None,
    cs: CriticalSet | None = None,
) -> TwoBathReport:
    """Compare ``E1 - E2`` at the horizon with ``Re<eta0, zeta0 + sqrt2 kappa qhat>``.

    ``qhat`` is truncated at ``truncation`` (default: the full trajectory).
    The quadrature error of ``D`` is estimated by repeating the trapezoid
    on every other sample.
    """
    _check_two_bath(sys)
    if traj.meta.get("backward"):
        raise ValueError("equilibrium defect needs a forward trajectory")
    t = traj.times - traj.times[0]
    T_hat = float(t[-1]) if truncation is None else float(truncation)
    if T_hat > t[-1] * (1 + 1e-12) or T_hat <= 0:
        raise ValueError("truncation time must lie inside the trajectory")
    keep = t <= T_hat * (1 + 1e-12)
    t, q = t[keep], traj.q[keep, 0]
    nu, w = sys.nu, sys.w
    kappa = sys.kappa[0]
    zeta0, eta0 = two_bath_transform(sys, init)
    Z0, H0 = bold(zeta0, nu), bold(eta0, nu)

    def defect(stride):
        qhat = running_transform(t, q, nu, stride)
        return inner(w, H0, Z0 + math.sqrt(2.0) * kappa * qhat).real

    D = defect(1)
    # every-other-sample trapezoid needs an even number of intervals
    err = abs(D - defect(2)) if (len(t) - 1) % 2 == 0 and len(t) > 4 else math.nan
    E1, E2 = traj.bath_energy[-1]
    j = int(np.argmin(np.abs(traj.times - traj.times[0] - T_hat)))
    observed = float(traj.bath_energy[j, 0] - traj.bath_energy[j, 1])
    e_sum0 = float(traj.bath_energy[0].sum())
    indeterminate = not abs(D) > 10.0 * err if math.isfinite(err) else abs(D) == 0.0
    if indeterminate:
        warnings.warn(f"defect D = {D:.3g} is within quadrature error {err:.3g} of zero", RuntimeWarning)
    sum_defect = None
    if cs is not None:
        d, k = dist_to_critical_set(traj.q[-1], cs)
        qc = cs.points[k].q
        fld = _Field(sys.net, sys.net.vertex_K(sys.K))
        limit = float(traj.energy[0]) - fld.veff(qc) + 0.5 * float(fld.K @ (qc * qc))
        sum_defect = float(abs(E1 + E2 - limit))
    agree = abs(observed - D)
    return TwoBathReport(
        E1_final=float(E1), E2_final=float(E2), E_sum_initial=e_sum0, D=float(D), D_quad_error=float(err),
        predicted_difference=float(D), observed_difference=observed, agreement_error=agree,
        relative_agreement_error=agree / e_sum0 if e_sum0 > 0 else math.inf, truncation_time=T_hat,
        sum_defect=sum_defect, indeterminate=bool(indeterminate),
    )
