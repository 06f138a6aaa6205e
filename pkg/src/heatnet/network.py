"""Oscillator network: potentials, graph, thermostat attachment and the
effective potential with its analytic derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .thermostat import CouplingSpec

Vertex = Hashable


@dataclass(frozen=True)
class PotentialSpec:
    """Polynomial potential ``sum_k coeffs[k] * x**k`` (ascending order).

    ``kind`` only records how the potential was declared; ``harmonic``
    potentials are stored as ``[0, 0, k/2]``.
    """

    coeffs: tuple[float, ...]
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind not in ("polynomial", "harmonic"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        coeffs = tuple(float(c) for c in self.coeffs)
        if not coeffs:
            coeffs = (0.0,)
        if not all(np.isfinite(coeffs)):
            raise ValueError("potential coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def polynomial(cls, coeffs: Sequence[float]) -> "PotentialSpec":
        return cls(tuple(coeffs), "polynomial")

    @classmethod
    def harmonic(cls, stiffness: float) -> "PotentialSpec":
        return cls((0.0, 0.0, 0.5 * float(stiffness)), "harmonic")

    @property
    def stiffness(self) -> float:
        return 2.0 * self.coeffs[2] if len(self.coeffs) > 2 else 0.0

    def _derived(self, order: int) -> np.ndarray:
        c = np.asarray(self.coeffs)
        for _ in range(order):
            c = c[1:] * np.arange(1, len(c)) if len(c) > 1 else np.zeros(1)
        return c

    def value(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def d1(self, x):
        return np.polynomial.polynomial.polyval(x, self._derived(1))

    def d2(self, x):
        return np.polynomial.polynomial.polyval(x, self._derived(2))

    def second_derivative_vanishes(self) -> bool:
        """True when the second derivative is identically zero."""
        return not np.any(self._derived(2))

    def to_dict(self) -> dict:
        if self.kind == "harmonic":
            return {"harmonic": self.stiffness}
        return {"polynomial": list(self.coeffs)}


@dataclass(frozen=True)
class Thermostat:
    """A continuum bath attached to one network vertex."""

    name: str
    vertex: Vertex
    coupling: CouplingSpec


@dataclass(frozen=True)
class NetworkSpec:
    """Finite undirected oscillator graph with attached thermostats.

    Edge potentials take the argument ``q[i] - q[j]`` where ``i`` precedes
    ``j`` in ``vertices``; edges are normalized to that orientation.
    """

    vertices: tuple
    edges: tuple
    pin: Mapping
    interaction: Mapping
    thermostats: tuple = ()
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vertices = tuple(self.vertices)
        if len(set(vertices)) != len(vertices):
            raise ValueError("duplicate vertex ids")
        index = {v: k for k, v in enumerate(vertices)}
        edges = []
        interaction = {}
        raw_interaction = dict(self.interaction)
        for e in self.edges:
            a, b = e
            if a not in index or b not in index:
                raise ValueError(f"edge {e} references unknown vertex")
            if a == b:
                raise ValueError(f"self-loop at vertex {a!r}")
            key = (a, b) if index[a] < index[b] else (b, a)
            if key in interaction:
                raise ValueError(f"duplicate edge {key}")
            pot = raw_interaction.get(e, raw_interaction.get(key))
            if pot is None:
                pot = raw_interaction.get((key[1], key[0]))
            if pot is None:
                raise ValueError(f"edge {key} has no interaction potential")
            edges.append(key)
            interaction[key] = pot
        pin = dict(self.pin)
        missing = [v for v in vertices if v not in pin]
        if missing:
            raise ValueError(f"vertices without pinning potential: {missing}")
        thermostats = tuple(self.thermostats)
        names = [t.name for t in thermostats]
        if len(set(names)) != len(names):
            raise ValueError("thermostat names must be unique")
        for t in thermostats:
            if t.vertex not in index:
                raise ValueError(f"thermostat {t.name!r} on unknown vertex {t.vertex!r}")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "interaction", interaction)
        object.__setattr__(self, "pin", pin)
        object.__setattr__(self, "thermostats", thermostats)
        object.__setattr__(self, "index", index)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def coupled(self) -> frozenset:
        return frozenset(t.vertex for t in self.thermostats)

    def neighbors(self, v) -> set:
        out = set()
        for a, b in self.edges:
            if a == v:
                out.add(b)
            elif b == v:
                out.add(a)
        return out

    def vertex_K(self, K_by_thermostat: Mapping[str, float]) -> dict:
        """Sum per-thermostat constants onto their vertices."""
        out: dict = {}
        for t in self.thermostats:
            out[t.vertex] = out.get(t.vertex, 0.0) + float(K_by_thermostat[t.name])
        return out


@dataclass
class AssumptionReport:
    """Outcome of the assumption checks.  ``None`` means inconclusive."""

    a1_ok: bool
    a3_ok: bool | None
    a5_ok: bool
    a6_ok: bool | None
    diagnostics: dict
    lambda_closure: frozenset
    coercivity_samples: list

    def to_dict(self) -> dict:
        return {
            "a1_ok": self.a1_ok,
            "a3_ok": self.a3_ok,
            "a5_ok": self.a5_ok,
            "a6_ok": self.a6_ok,
            "diagnostics": dict(self.diagnostics),
            "lambda_closure": sorted(map(str, self.lambda_closure)),
            "coercivity_samples": [list(s) for s in self.coercivity_samples],
        }


def controllability_closure(net: NetworkSpec, start=None) -> frozenset:
    """Grow the coupled set by unique outside neighbours until nothing changes.

    Every pass adds, for each vertex of the current set that has exactly
    one neighbour outside it, that neighbour.  The operation is a monotone
    closure, so the result does not depend on the visiting order.
    """
    current = set(net.coupled if start is None else start)
    adjacency = {v: net.neighbors(v) for v in net.vertices}
    while True:
        added = set()
        for j in current:
            outside = adjacency[j] - current
            if len(outside) == 1:
                added |= outside
        if not added:
            return frozenset(current)
        current |= added


class _Field:
    """Vectorized view of the network potentials, ordered like ``net.vertices``."""

    def __init__(self, net: NetworkSpec, K: Mapping | None = None):
        self.n = net.n
        pins = [net.pin[v].coeffs for v in net.vertices]
        self.pin = _pad(pins)
        self.ei = np.array([net.index[a] for a, _ in net.edges], dtype=int)
        self.ej = np.array([net.index[b] for _, b in net.edges], dtype=int)
        self.edge = _pad([net.interaction[e].coeffs for e in net.edges]) if net.edges else np.zeros((0, 1))
        self.K = np.zeros(self.n)
        for v, k in (K or {}).items():
            self.K[net.index[v]] += float(k)
        self.pin1, self.pin2 = _deriv(self.pin), _deriv(_deriv(self.pin))
        self.edge1, self.edge2 = _deriv(self.edge), _deriv(_deriv(self.edge))

    def network_energy(self, q: np.ndarray) -> float:
        x = q[self.ei] - q[self.ej]
        return float(_horner(self.pin, q).sum() + _horner(self.edge, x).sum())

    def network_force(self, q: np.ndarray) -> np.ndarray:
        """``-dV_net/dq``: pin restoring force plus edge forces."""
        f = -_horner(self.pin1, q)
        if len(self.ei):
            d = _horner(self.edge1, q[self.ei] - q[self.ej])
            f -= np.bincount(self.ei, d, minlength=self.n)
            f += np.bincount(self.ej, d, minlength=self.n)
        return f

    def veff(self, q: np.ndarray) -> float:
        return self.network_energy(q) - 0.5 * float(np.dot(self.K, q * q))

    def grad(self, q: np.ndarray) -> np.ndarray:
        return -self.network_force(q) - self.K * q

    def hess(self, q: np.ndarray) -> np.ndarray:
        h = np.diag(_horner(self.pin2, q) - self.K)
        if len(self.ei):
            d2 = _horner(self.edge2, q[self.ei] - q[self.ej])
            np.add.at(h, (self.ei, self.ei), d2)
            np.add.at(h, (self.ej, self.ej), d2)
            np.add.at(h, (self.ei, self.ej), -d2)
            np.add.at(h, (self.ej, self.ei), -d2)
        return h


def _pad(rows) -> np.ndarray:
    width = max((len(r) for r in rows), default=1)
    out = np.zeros((len(rows), width))
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out


def _deriv(c: np.ndarray) -> np.ndarray:
    if c.shape[1] == 1:
        return np.zeros_like(c)
    return c[:, 1:] * np.arange(1, c.shape[1])


def _horner(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=float) + c[:, -1]
    for k in range(c.shape[1] - 2, -1, -1):
        out = out * x + c[:, k]
    return out


def effective_potential(net: NetworkSpec, K: Mapping, q) -> float:
    """Network potential energy minus ``K_m q_m**2 / 2`` on coupled vertices.

    Each undirected edge is counted once.
    """
    return _Field(net, K).veff(_vec(net, q))


def grad_effective_potential(net: NetworkSpec, K: Mapping, q) -> np.ndarray:
    return _Field(net, K).grad(_vec(net, q))


def hess_effective_potential(net: NetworkSpec, K: Mapping, q) -> np.ndarray:
    return _Field(net, K).hess(_vec(net, q))


def _vec(net: NetworkSpec, q) -> np.ndarray:
    if isinstance(q, Mapping):
        q = [q[v] for v in net.vertices]
    q = np.asarray(q, dtype=float)
    if q.shape != (net.n,):
        raise ValueError(f"expected {net.n} coordinates, got shape {q.shape}")
    return q


def validate_assumptions(
    net: NetworkSpec,
    K: Mapping,
    radii: Sequence[float] = (2.0, 4.0, 8.0, 16.0, 32.0),
    directions: int = 256,
    box: float = 5.0,
    eig_tol: float = 1e-6,
    seed: int = 0,
) -> AssumptionReport:
    """Check the structural assumptions on the network.

    A1 is exact for polynomial potentials.  A3 (coercivity of ``|V_eff|``)
    and A6 (isolated critical points) are sampling heuristics: they return
    True when the samples support the claim and None otherwise, never False.
    """
    from .analysis import find_critical_points

    diag = {}
    flat = [e for e in net.edges if net.interaction[e].second_derivative_vanishes()]
    a1_ok = not flat
    diag["a1"] = "all edge potentials have non-trivial second derivative" if a1_ok else (
        f"edge potentials with V'' = 0 identically: {flat}"
    )

    closure = controllability_closure(net)
    a5_ok = closure == frozenset(net.vertices)
    missing = [v for v in net.vertices if v not in closure]
    diag["a5"] = "closure covers every vertex" if a5_ok else f"closure misses {missing}"

    fld = _Field(net, K)
    dirs = _sphere_directions(net.n, directions, seed)
    samples = []
    for r in radii:
        vals = np.array([abs(fld.veff(r * d)) for d in dirs])
        samples.append((float(r), float(vals.min())))
    mins = [m for _, m in samples]
    growing = all(b > a for a, b in zip(mins, mins[1:])) and mins[-1] > 10.0 * max(mins[0], 1.0)
    a3_ok = True if growing else None
    diag["a3"] = (
        "min |V_eff| on sampled spheres grows with the radius (heuristic)" if growing
        else "sampled minima do not grow clearly; inconclusive"
    )

    cs = find_critical_points(net, K, box=box, seed=seed)
    degenerate = [k for k, pt in enumerate(cs.points) if pt.hessian_min_abs_eigenvalue <= eig_tol]
    if cs.points and not degenerate:
        a6_ok = True
        diag["a6"] = f"{len(cs.points)} non-degenerate critical points in the search box (heuristic)"
    else:
        a6_ok = None
        diag["a6"] = (
            f"degenerate critical points {degenerate}; inconclusive" if degenerate
            else "no critical points found; inconclusive"
        )
    return AssumptionReport(a1_ok, a3_ok, a5_ok, a6_ok, diag, closure, samples)


def _sphere_directions(n: int, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    axes = np.vstack([np.eye(n), -np.eye(n)])
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.vstack([axes, d])
