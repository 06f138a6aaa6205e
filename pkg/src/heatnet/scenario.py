"""Scenario files: a YAML document describing one network experiment.

Schema (every key not listed is rejected)::

    name: str
    seed: int                          # optional, default 0
    negative_fixture: bool             # optional, marks presets expected to fail A5
    network:
      vertices: [id, ...]
      pins: {id: potential, ...}
      edges: [{between: [id, id], <potential>}, ...]
    thermostats:
      - name: str
        vertex: id
        coupling: {kind: gauss|rational, a, sigma | p}
        init: {kind: zero|gauss_packet|dressed, b, c, s, q_ref}
    grid: {nu_max, count}
    integrator: {dt, horizon, sample_every, scheme, max_drift}
    initial: {q: [...], p: [...]}
    analysis: {eps_fraction, tail_fraction, truncation, box, n_starts,
               kernel_tau_max, backward}
    output_dir: str                    # optional

A potential is ``{polynomial: [c0, c1, ...]}`` (ascending coefficients)
or ``{harmonic: k}`` for ``k x**2 / 2``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .dynamics import IntegratorConfig, SCHEMES
from .network import NetworkSpec, PotentialSpec, Thermostat, controllability_closure
from .thermostat import BathInitSpec, CouplingSpec, SpectralGrid, recurrence_horizon

log = logging.getLogger(__name__)

PRESETS = ("single", "chain1_2baths", "chain3", "chain3_lambda2", "chain5", "star4", "tree7")


class ScenarioError(ValueError):
    """Invalid scenario file; the message names the file and line when known."""


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    line: int = 0
    lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ScenarioError(f"line {k_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


@dataclass(frozen=True)
class AnalysisOptions:
    eps_fraction: float = 0.1
    tail_fraction: float = 0.25
    truncation: float | None = None
    box: float = 5.0
    n_starts: int | None = None
    kernel_tau_max: float = 12.0
    backward: bool = False


@dataclass
class Scenario:
    name: str
    net: NetworkSpec
    bath_inits: dict
    grid: SpectralGrid
    integrator: IntegratorConfig
    q0: np.ndarray
    p0: np.ndarray
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    seed: int = 0
    negative_fixture: bool = False
    output_dir: str | None = None
    warnings: list = field(default_factory=list)
    raw: dict = field(default_factory=dict, repr=False)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form of the parsed document."""
        blob = json.dumps(_plain(self.raw), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def two_bath(self) -> bool:
        ts = self.net.thermostats
        return self.net.n == 1 and len(ts) == 2 and ts[0].coupling == ts[1].coupling


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


class _Ctx:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node, msg, key=None):
        line = None
        if isinstance(node, _Map):
            line = node.lines.get(key, node.line) if key is not None else node.line
        where = f"{self.source}:{line}" if line else self.source
        raise ScenarioError(f"{where}: {msg}")

    def mapping(self, node, where, allowed, required=()):
        if not isinstance(node, dict):
            self.fail(None, f"{where} must be a mapping")
        for k in node:
            if k not in allowed:
                self.fail(node, f"unknown key {k!r} in {where}", k)
        for k in required:
            if k not in node:
                self.fail(node, f"missing key {k!r} in {where}")
        return node

    def number(self, node, key, where, default=None, integer=False):
        if key not in node:
            if default is None:
                self.fail(node, f"missing key {key!r} in {where}")
            return default
        v = node[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(node, f"{where}.{key} must be a number", key)
        if integer:
            if int(v) != v:
                self.fail(node, f"{where}.{key} must be an integer", key)
            return int(v)
        return float(v)


def _potential(ctx: _Ctx, node, where) -> PotentialSpec:
    kinds = [k for k in ("polynomial", "harmonic") if k in node]
    if len(kinds) != 1:
        ctx.fail(node, f"{where} needs exactly one of 'polynomial' or 'harmonic'")
    if kinds[0] == "harmonic":
        return PotentialSpec.harmonic(ctx.number(node, "harmonic", where))
    coeffs = node["polynomial"]
    if not isinstance(coeffs, list) or not coeffs or not all(
        isinstance(c, (int, float)) and not isinstance(c, bool) for c in coeffs
    ):
        ctx.fail(node, f"{where}.polynomial must be a non-empty list of numbers", "polynomial")
    return PotentialSpec.polynomial(coeffs)


def _build(doc, source: str) -> Scenario:
    ctx = _Ctx(source)
    top = ctx.mapping(
        doc, "scenario",
        {"name", "seed", "negative_fixture", "network", "thermostats", "grid", "integrator", "initial",
         "analysis", "output_dir"},
        ("name", "network", "thermostats", "grid", "integrator", "initial"),
    )
    name = top["name"]
    if not isinstance(name, str) or not name:
        ctx.fail(top, "name must be a non-empty string", "name")

    nw = ctx.mapping(top["network"], "network", {"vertices", "pins", "edges"}, ("vertices", "pins"))
    vertices = nw["vertices"]
    if not isinstance(vertices, list) or not vertices:
        ctx.fail(nw, "network.vertices must be a non-empty list", "vertices")
    pins_node = ctx.mapping(nw["pins"], "network.pins", set(vertices))
    pins = {v: _potential(ctx, ctx.mapping(p, f"pin of {v!r}", {"polynomial", "harmonic"}), f"pin of {v!r}")
            for v, p in pins_node.items()}
    edges, inter = [], {}
    for k, e in enumerate(nw.get("edges") or []):
        where = f"network.edges[{k}]"
        ctx.mapping(e, where, {"between", "polynomial", "harmonic"}, ("between",))
        pair = e["between"]
        if not isinstance(pair, list) or len(pair) != 2:
            ctx.fail(e, f"{where}.between must list two vertices", "between")
        edges.append(tuple(pair))
        inter[tuple(pair)] = _potential(ctx, e, where)

    ts_node = top["thermostats"]
    if not isinstance(ts_node, list):
        ctx.fail(top, "thermostats must be a list", "thermostats")
    thermostats, inits = [], {}
    for k, t in enumerate(ts_node):
        where = f"thermostats[{k}]"
        ctx.mapping(t, where, {"name", "vertex", "coupling", "init"}, ("name", "vertex", "coupling"))
        c = ctx.mapping(t["coupling"], f"{where}.coupling", {"kind", "a", "sigma", "p"}, ("kind",))
        i = ctx.mapping(t.get("init", {"kind": "zero"}), f"{where}.init", {"kind", "b", "c", "s", "q_ref"}, ("kind",))
        try:
            coupling = CouplingSpec(
                c["kind"], ctx.number(c, "a", where, 1.0), ctx.number(c, "sigma", where, 1.0),
                ctx.number(c, "p", where, 2, integer=True),
            )
            init = BathInitSpec(
                i["kind"], ctx.number(i, "b", where, 0.0), ctx.number(i, "c", where, 0.0),
                ctx.number(i, "s", where, 1.0), ctx.number(i, "q_ref", where, 0.0),
            )
        except ValueError as exc:
            ctx.fail(t, f"{where}: {exc}")
        thermostats.append(Thermostat(str(t["name"]), t["vertex"], coupling))
        inits[str(t["name"])] = init
    try:
        net = NetworkSpec(tuple(vertices), tuple(edges), pins, inter, tuple(thermostats))
    except ValueError as exc:
        ctx.fail(nw, f"network: {exc}")

    g = ctx.mapping(top["grid"], "grid", {"nu_max", "count"}, ("nu_max", "count"))
    try:
        grid = SpectralGrid(ctx.number(g, "nu_max", "grid"), ctx.number(g, "count", "grid", integer=True))
    except ValueError as exc:
        ctx.fail(g, f"grid: {exc}")

    it = ctx.mapping(top["integrator"], "integrator", {"dt", "horizon", "sample_every", "scheme", "max_drift"},
                     ("horizon",))
    scheme = it.get("scheme", SCHEMES[0])
    try:
        cfg = IntegratorConfig(
            ctx.number(it, "dt", "integrator", 1e-3), ctx.number(it, "horizon", "integrator"),
            ctx.number(it, "sample_every", "integrator", 100, integer=True), scheme,
            ctx.number(it, "max_drift", "integrator", 1e-4),
        )
    except ValueError as exc:
        ctx.fail(it, f"integrator: {exc}")
    limit = 0.5 * recurrence_horizon(grid)
    if cfg.horizon > limit * (1 + 1e-12):
        ctx.fail(it, f"recurrence guard violated: horizon {cfg.horizon:g} > half recurrence time {limit:g}",
                 "horizon")

    ini = ctx.mapping(top["initial"], "initial", {"q", "p"}, ("q",))
    q0 = _vector(ctx, ini, "q", net.n)
    p0 = _vector(ctx, ini, "p", net.n) if "p" in ini else np.zeros(net.n)

    an = ctx.mapping(top.get("analysis", {}), "analysis", set(AnalysisOptions.__dataclass_fields__))
    opts = AnalysisOptions(
        eps_fraction=ctx.number(an, "eps_fraction", "analysis", 0.1),
        tail_fraction=ctx.number(an, "tail_fraction", "analysis", 0.25),
        truncation=None if an.get("truncation") is None else ctx.number(an, "truncation", "analysis"),
        box=ctx.number(an, "box", "analysis", 5.0),
        n_starts=None if an.get("n_starts") is None else ctx.number(an, "n_starts", "analysis", integer=True),
        kernel_tau_max=ctx.number(an, "kernel_tau_max", "analysis", 12.0),
        backward=bool(an.get("backward", False)),
    )
    if not 0 < opts.tail_fraction <= 1:
        ctx.fail(an, "analysis.tail_fraction must lie in (0, 1]", "tail_fraction")
    if opts.truncation is not None and not 0 < opts.truncation <= cfg.horizon:
        ctx.fail(an, "analysis.truncation must lie in (0, horizon]", "truncation")

    sc = Scenario(
        name=name, net=net, bath_inits=inits, grid=grid, integrator=cfg, q0=q0, p0=p0, analysis=opts,
        seed=int(ctx.number(top, "seed", "scenario", 0, integer=True)),
        negative_fixture=bool(top.get("negative_fixture", False)),
        output_dir=top.get("output_dir"), raw=doc,
    )
    closure = controllability_closure(net)
    if closure != frozenset(net.vertices):
        missing = sorted(map(str, set(net.vertices) - closure))
        msg = f"{source}: assumption A5 fails, closure misses vertices {missing}"
        sc.warnings.append(msg)
        log.warning(msg)
    return sc


def _vector(ctx: _Ctx, node, key, n) -> np.ndarray:
    v = node[key]
    if not isinstance(v, list) or len(v) != n or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in v
    ):
        ctx.fail(node, f"initial.{key} must list {n} numbers", key)
    return np.array(v, dtype=float)


def parse_text(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark else "?"
        raise ScenarioError(f"{source}:{line}: syntax error: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{source}: syntax error: {exc}") from None
    return _build(doc, source)


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file, or a bundled preset by name."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return load_preset(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario ({exc.strerror})") from None
    return parse_text(text, str(path))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ScenarioError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("heatnet.presets").joinpath(f"{name}.yaml").read_text()


def load_preset(name: str) -> Scenario:
    return parse_text(preset_text(name), f"preset:{name}")
