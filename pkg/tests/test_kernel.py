import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import dawsn

from heatnet.dynamics import CoupledSystem, FullState, IntegratorConfig, simulate
from heatnet.kernel import (
    KernelTailError, MemoryKernel, build_kernel, gauss_kernel_exact, integrate_gle, noise_term,
    theta_decomposition, w_diamond_hat,
)
from heatnet.network import NetworkSpec, PotentialSpec, Thermostat
from heatnet.thermostat import (
    BathInitSpec, BathState, CouplingSpec, build_grid, compute_K, coupling_force, init_bath,
)

SQRT_PI = math.sqrt(math.pi)
GAUSS = CouplingSpec()
RATIONAL = CouplingSpec("rational", 1.0, p=2)


def rational_p2_kernel(tau):
    # -d/dtau of int cos(nu tau) / (1 + nu^2)^4 d nu = pi e^{-tau} (15 + 15 tau + 6 tau^2 + tau^3) / 48
    return math.pi / 48 * np.exp(-tau) * tau * (3 + 3 * tau + tau**2)


def gauss_diamond(nu, sign):
    return SQRT_PI * (1 - 2 * nu * dawsn(nu)) - sign * 1j * math.pi * nu * math.exp(-nu * nu)


@pytest.fixture(scope="module")
def gauss_kernel():
    return build_kernel(GAUSS, 2e-3, 20.0)


def test_gauss_kernel_closed_form(gauss_kernel):
    assert gauss_kernel.w[0] == 0.0
    assert np.abs(gauss_kernel.w - gauss_kernel_exact(gauss_kernel.tau)).max() < 1e-8


def test_gauss_kernel_oracle_formula():
    # independent check of the closed form itself by brute-force quadrature over the real line
    for tau in (0.3, 1.7, 4.0):
        v = integrate.quad(lambda x: math.exp(-x * x) * x * math.sin(x * tau), -np.inf, np.inf)[0]
        assert v == pytest.approx(float(gauss_kernel_exact(tau)), abs=1e-12)


def test_rational_kernel_closed_form():
    k = build_kernel(RATIONAL, 1e-2, 60.0)
    assert np.abs(k.w - rational_p2_kernel(k.tau)).max() < 1e-10


def test_kernel_integral_tends_to_K(gauss_kernel):
    run = gauss_kernel.integral()
    assert abs(run[-1] - SQRT_PI) < 1e-6
    assert gauss_kernel.K == pytest.approx(SQRT_PI, abs=1e-12)


def test_kernel_tail_and_grid_checks():
    with pytest.raises(KernelTailError):
        build_kernel(GAUSS, 1e-2, 3.0)
    with pytest.raises(ValueError, match="multiple"):
        build_kernel(GAUSS, 0.3, 1.0)
    with pytest.raises(ValueError):
        build_kernel(GAUSS, 0.0, 1.0)


def test_kernel_csv(tmp_path):
    k = build_kernel(GAUSS, 0.5, 12.0)
    p = tmp_path / "k.csv"
    k.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "tau,w" and len(rows) == len(k.tau) + 1
    assert float(rows[3].split(",")[1]) == k.w[2]


@pytest.mark.parametrize("nu", [0.0, 0.2, 1.0, 2.5, -1.3, 4.0])
def test_w_diamond_gauss(nu):
    for sign in (1, -1):
        v, err = w_diamond_hat(GAUSS, nu, sign)
        assert abs(v - gauss_diamond(nu, sign)) < 1e-10
        assert err < 1e-8


def test_w_diamond_at_zero_is_K():
    for c in (GAUSS, RATIONAL, CouplingSpec("gauss", 0.6, 1.4)):
        for sign in (1, -1):
            v, _ = w_diamond_hat(c, 0.0, sign)
            assert v.imag == 0.0 and abs(v.real - compute_K(c)) < 1e-8


@pytest.mark.parametrize("nu", [0.4, 1.3, 3.0])
def test_w_diamond_sign_flip_and_cauchy_reference(nu):
    plus, _ = w_diamond_hat(RATIONAL, nu, 1)
    minus, _ = w_diamond_hat(RATIONAL, nu, -1)
    w_hat = lambda x: 2 * math.pi * float(RATIONAL.kappa_sq(x)) / (1j * x)  # noqa: E731
    assert abs((plus - minus) - 0.5 * (w_hat(nu) - w_hat(-nu))) < 1e-12

    # partial fractions with scipy's Cauchy-weight quadrature on each pole
    def pv(c):
        f = lambda x: float(RATIONAL.kappa_sq(x))  # noqa: E731
        body = integrate.quad(f, -60, 60, weight="cauchy", wvar=c, limit=500)[0]
        tails = (integrate.quad(lambda x: f(x) / (x - c), 60, np.inf)[0]
                 + integrate.quad(lambda x: f(x) / (x - c), -np.inf, -60)[0])
        return body + tails

    ref = (pv(nu) - pv(-nu)) / (2 * nu)
    assert abs(plus.real - ref) < 1e-10


def test_w_diamond_rejects_sign():
    with pytest.raises(ValueError):
        w_diamond_hat(GAUSS, 1.0, 0)


def test_noise_term_basics():
    g = build_grid(8, 1024)
    assert not noise_term(GAUSS, BathInitSpec(), g, np.linspace(0, 10, 7)).any()
    b = init_bath(BathInitSpec("gauss_packet", 0.5, 0.4, 1.0), GAUSS, g)
    assert noise_term(GAUSS, b, g, 0.0)[0] == pytest.approx(coupling_force(b, GAUSS, g), rel=1e-14, abs=1e-16)
    late = noise_term(GAUSS, BathInitSpec("gauss_packet", 0.5, 0.4, 1.0), g, np.arange(100.0, 200.0, 0.05))
    assert np.abs(late).max() < 1e-3


def _single(coupling=GAUSS):
    return NetworkSpec(("x",), (), {"x": PotentialSpec.polynomial((0, 0, 0.5, 0, 0.25))}, {},
                       (Thermostat("b", "x", coupling),))


def test_gle_matches_direct_short():
    net = _single()
    g = build_grid(8, 256)
    sys = CoupledSystem(net, g)
    b = init_bath(BathInitSpec("gauss_packet", 0.5, 0.4, 1.0), GAUSS, g)
    init = FullState(np.array([1.2]), np.array([0.3]), {"b": b})
    cfg = IntegratorConfig(dt=2e-3, horizon=10.0, sample_every=5)
    d = simulate(sys, init, cfg)
    gl = integrate_gle(sys, init, cfg, {"b": build_kernel(GAUSS, 2e-3, 12.0)})
    assert np.abs(d.q - gl.q).max() < 1e-5
    assert np.abs(d.bath_energy - gl.bath_energy).max() < 1e-5
    assert np.nanmax(np.abs(gl.energy - gl.energy[0])) < 1e-5
    assert gl.header() == d.header()


def test_gle_with_zero_kernel_is_plain_verlet():
    net = _single()
    g = build_grid(8, 64)
    sys = CoupledSystem(net, g)
    zero = MemoryKernel(np.arange(11) * 1e-3, np.zeros(11), 0.0, 1e-3)
    init = FullState(np.array([1.0]), np.array([0.0]), {"b": BathState(np.zeros(64), np.zeros(64))})
    cfg = IntegratorConfig(dt=1e-3, horizon=5.0, sample_every=100)
    gl = integrate_gle(sys, init, cfg, {"b": zero}, track_bath_energy=False)
    free = NetworkSpec(("x",), (), dict(net.pin), {})
    ref = simulate(CoupledSystem(free, g), FullState(np.array([1.0]), np.array([0.0]), {}), cfg)
    assert np.abs(gl.q - ref.q).max() < 1e-12
    th = theta_decomposition(gl, {"b": 0.0})
    assert not th.theta.any()


def test_gle_requires_matching_step():
    sys = CoupledSystem(_single(), build_grid(8, 64))
    init = FullState(np.array([1.0]), np.array([0.0]), {"b": BathState(np.zeros(64), np.zeros(64))})
    with pytest.raises(ValueError, match="spacing"):
        integrate_gle(sys, init, IntegratorConfig(dt=1e-3, horizon=1.0), {"b": build_kernel(GAUSS, 2e-3, 12.0)})


def test_theta_on_dressed_state_is_grid_offset():
    g = build_grid(8, 1024)
    sys = CoupledSystem(_single(), g)
    qc = math.sqrt(SQRT_PI - 1)
    init = FullState(np.array([qc]), np.zeros(1), {"b": init_bath(BathInitSpec("dressed", q_ref=qc), GAUSS, g)})
    tr = simulate(sys, init, IntegratorConfig(dt=1e-3, horizon=5.0, sample_every=100))
    th = theta_decomposition(tr, sys.K)
    offset = (sys.K_grid[0] - sys.K["b"]) * qc
    assert np.abs(th.theta[:, 0] - offset).max() < 1e-12
    assert th.tail_sup()[0] < 1e-10 and th.offset()[0] == pytest.approx(offset, abs=1e-12)
