"""Continuum thermostats discretized on a uniform midpoint frequency grid."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

log = logging.getLogger(__name__)

COUPLING_KINDS = ("gauss", "rational")
BATH_INIT_KINDS = ("zero", "gauss_packet", "dressed")


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class CouplingSpec:
    """Coupling profile ``kappa(nu)``, vanishing only at ``nu = 0``.

    gauss:    ``a * nu * exp(-nu**2 / (2 sigma**2))``
    rational: ``a * nu / (1 + nu**2)**p`` with integer ``p >= 2``
    """

    kind: str = "gauss"
    a: float = 1.0
    sigma: float = 1.0
    p: int = 2

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if not self.a > 0:
            raise ValueError("coupling amplitude a must be positive")
        if self.kind == "gauss" and not self.sigma > 0:
            raise ValueError("gauss coupling needs sigma > 0")
        if self.kind == "rational" and (int(self.p) != self.p or self.p < 2):
            raise ValueError("rational coupling needs integer p >= 2")

    def __call__(self, nu):
        nu = np.asarray(nu, dtype=float)
        if self.kind == "gauss":
            return self.a * nu * np.exp(-nu * nu / (2.0 * self.sigma**2))
        return self.a * nu / (1.0 + nu * nu) ** self.p

    def kappa_sq_over_nu_sq(self, nu):
        """``kappa**2 / nu**2`` with the removable singularity filled in."""
        nu = np.asarray(nu, dtype=float)
        if self.kind == "gauss":
            return self.a**2 * np.exp(-nu * nu / self.sigma**2)
        return self.a**2 / (1.0 + nu * nu) ** (2 * self.p)

    def kappa_sq(self, nu):
        nu = np.asarray(nu, dtype=float)
        return nu * nu * self.kappa_sq_over_nu_sq(nu)

    def tail_cutoff(self, tol: float) -> float:
        """Frequency beyond which ``int kappa**2/nu d nu`` (one side) is below ``tol``."""
        a2 = self.a**2
        if self.kind == "gauss":
            s2 = self.sigma**2
            # tail = a^2 s^2 / 2 * exp(-L^2/s^2)
            return self.sigma * math.sqrt(max(math.log(max(a2 * s2 / (2 * tol), 1.0)), 1.0))
        # tail <= a^2 L^(2-4p) / (4p-2)
        e = 4 * self.p - 2
        return max((a2 / (e * tol)) ** (1.0 / e), 1.0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "a": self.a}
        d.update({"sigma": self.sigma} if self.kind == "gauss" else {"p": self.p})
        return d


@dataclass(frozen=True)
class SpectralGrid:
    """Symmetric midpoint frequency grid; ``0`` is never a node."""

    nu_max: float
    count: int

    def __post_init__(self):
        if not self.nu_max > 0:
            raise ValueError("nu_max must be positive")
        if self.count < 2 or self.count % 2:
            raise ValueError("count must be an even integer >= 2")

    @property
    def spacing(self) -> float:
        return 2.0 * self.nu_max / self.count

    @property
    def nodes(self) -> np.ndarray:
        return -self.nu_max + (np.arange(self.count) + 0.5) * self.spacing

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.count, self.spacing)


@dataclass
class BathState:
    xi: np.ndarray
    xidot: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.xidot = np.asarray(self.xidot, dtype=float)
        if self.xi.shape != self.xidot.shape or self.xi.ndim != 1:
            raise ValueError("xi and xidot must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.xi)) and np.all(np.isfinite(self.xidot))):
            raise ValueError("bath state must be finite")

    def copy(self) -> "BathState":
        return BathState(self.xi.copy(), self.xidot.copy())


@dataclass(frozen=True)
class BathInitSpec:
    """Initial bath profile.

    gauss_packet: ``xi0 = b nu g(nu)``, ``xidot0 = c g(nu)``, ``g = exp(-nu^2/(2 s^2))``
    dressed:      ``xi0 = kappa(nu) q_ref / nu**2``, ``xidot0 = 0``
    """

    kind: str = "zero"
    b: float = 0.0
    c: float = 0.0
    s: float = 1.0
    q_ref: float = 0.0

    def __post_init__(self):
        if self.kind not in BATH_INIT_KINDS:
            raise ValueError(f"unknown bath init kind {self.kind!r}")
        if self.kind == "gauss_packet" and not self.s > 0:
            raise ValueError("gauss_packet needs s > 0")

    def to_dict(self) -> dict:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "dressed":
            return {"kind": "dressed", "q_ref": self.q_ref}
        return {"kind": self.kind, "b": self.b, "c": self.c, "s": self.s}


def build_grid(nu_max: float, count: int) -> SpectralGrid:
    return SpectralGrid(float(nu_max), int(count))


def recurrence_horizon(g: SpectralGrid) -> float:
    """Echo time ``2 pi / d_nu`` of the discretized bath."""
    return 2.0 * math.pi / g.spacing


def compute_K(c: CouplingSpec, tol: float = 1e-12) -> float:
    """``int kappa**2 / nu**2 d nu`` over the real line, by adaptive quadrature."""
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    # even integrand: integrate [0, L] and [L, inf) separately
    L = c.tail_cutoff(tol) if c.kind == "gauss" else 1.0
    f = c.kappa_sq_over_nu_sq
    body, e1 = integrate.quad(f, 0.0, L, epsabs=tol / 8, epsrel=1e-13, limit=200)
    tail, e2 = integrate.quad(f, L, np.inf, epsabs=tol / 8, epsrel=1e-13, limit=200)
    err = 2.0 * (e1 + e2)
    if not (np.isfinite(body) and np.isfinite(tail)) or err > tol:
        raise QuadratureError(f"K quadrature did not converge (error estimate {err:.3g})")
    return 2.0 * (body + tail)


def dressed_profile(c: CouplingSpec, nu, q) -> np.ndarray:
    """Bath displacement ``kappa q / nu**2`` that balances a frozen ``q``."""
    nu = np.asarray(nu, dtype=float)
    return c(nu) / (nu * nu) * q


def init_bath(spec: BathInitSpec, c: CouplingSpec, g: SpectralGrid) -> BathState:
    nu = g.nodes
    if spec.kind == "zero":
        state = BathState(np.zeros_like(nu), np.zeros_like(nu))
    elif spec.kind == "gauss_packet":
        env = np.exp(-nu * nu / (2.0 * spec.s**2))
        state = BathState(spec.b * nu * env, spec.c * env)
    else:
        state = BathState(dressed_profile(c, nu, spec.q_ref), np.zeros_like(nu))
    log.debug("initialized %s bath, energy %.6g", spec.kind, bath_energy(state, g))
    return state


def bath_energy(s: BathState, g: SpectralGrid) -> float:
    nu = g.nodes
    return 0.5 * float(np.dot(g.weights, s.xidot**2 + (nu * s.xi) ** 2))


def coupling_force(s: BathState, c: CouplingSpec, g: SpectralGrid) -> float:
    """Grid quadrature of ``int kappa xi d nu``."""
    return float(np.dot(g.weights * c(g.nodes), s.xi))


def write_bath_csv(path, s: BathState, g: SpectralGrid) -> None:
    from .io import fmt

    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nu", "xi", "xidot"])
        for row in zip(g.nodes, s.xi, s.xidot):
            w.writerow([fmt(x) for x in row])
