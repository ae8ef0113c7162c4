import numpy as np
import pytest
from scipy import integrate

from otlab.errors import FitDegenerate, IncompatibleData
from otlab.measures import Ball, GridDensity, mean_over_ball
from otlab.poisson import (
    BoundaryFlux,
    PolarGrid,
    ball_mass,
    check_gradient_bound,
    compatibility_constant,
    fit_harmonic_jet,
    flux_from_function,
    lemma_potential,
    particle_flux,
    solve_neumann,
    time_integrated_flux,
    uniform_flux,
)
from otlab.transport import map_from_function


def const(n, value=1.0, lower=-1.0, upper=1.0):
    return GridDensity.from_function(lambda x: np.full(x.shape[:-1], value), (n, n), [lower, lower], (upper - lower) / n)


# --- jets ------------------------------------------------------------------------


def disk_samples(n=400, radius=0.5, seed=0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    t = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(t), r * np.sin(t)], -1)


def test_jet_of_linear_function():
    p = disk_samples()
    b, A = fit_harmonic_jet(p, p @ np.array([0.3, -1.2]) + 4.0, 0.5)
    assert np.allclose(b, [0.3, -1.2], atol=1e-13) and np.allclose(A, 0, atol=1e-12)


def test_jet_of_saddle():
    p = disk_samples()
    b, A = fit_harmonic_jet(p, p[:, 0] * p[:, 1], 0.5)
    assert np.allclose(b, 0, atol=1e-13) and np.allclose(A, [[0, 1], [1, 0]], atol=1e-12)


def test_jet_of_cubic_vanishes():
    # r^3 cos(3 t) is orthogonal to the degree <= 2 harmonics on a rotation-symmetric sample
    p = PolarGrid(0.5, 16, 24).nodes(np.zeros(2)).reshape(-1, 2)
    b, A = fit_harmonic_jet(p, np.real((p[:, 0] + 1j * p[:, 1]) ** 3), 0.5)
    assert np.allclose(b, 0, atol=1e-12)
    assert np.allclose(A, 0, atol=1e-12)


def test_jet_fit_degenerate():
    with pytest.raises(FitDegenerate):
        fit_harmonic_jet(np.zeros((3, 2)), np.zeros(3), 0.5)
    line = np.stack([np.linspace(-0.4, 0.4, 50), np.zeros(50)], -1)
    with pytest.raises(FitDegenerate):
        fit_harmonic_jet(line, line[:, 0], 0.5)


# --- Neumann solves ----------------------------------------------------------------


def test_constant_source_radial_solution():
    c, R = 0.7, 0.8
    ball = Ball.centered(R)
    pot = solve_neumann(c, uniform_flux(ball, c * R / 2, 64))
    assert pot.c == pytest.approx(c)
    assert np.allclose(pot.jet_b, 0, atol=1e-12) and np.allclose(pot.jet_A, 0, atol=1e-12)
    exact = c * np.sum(pot.nodes**2, -1) / 4
    vol = pot.polar.volumes()
    exact -= np.sum(exact * vol) / vol.sum()
    assert np.max(np.abs(pot.Phi - exact)) < 1e-3
    assert np.ptp(pot.phi) < 1e-3


def test_one_dimensional_closed_form():
    R, a, c = 0.6, 0.25, 1.5
    ball = Ball([0.1], R)
    flux = BoundaryFlux(ball, np.array([-a + c * R, a + c * R]))
    pot = solve_neumann(c, flux)
    x = pot.nodes[:, 0] - 0.1
    exact = a * x + c * x**2 / 2
    exact -= np.trapezoid(exact, x) / (2 * R)
    assert np.max(np.abs(pot.Phi - exact)) < 1e-12
    assert pot.jet_b == pytest.approx([a], abs=1e-12)


def manufactured_quadratic(n, c=0.6, R=1.0):
    # Phi* = x1^2 - x2^2 + c |x|^2 / 4, so that Lap Phi* = c
    ball = Ball.centered(R)
    flux = flux_from_function(ball, lambda t: 2 * R * np.cos(2 * t) + c * R / 2, n)
    return solve_neumann(c, flux, n_r=n)


def test_manufactured_quadratic_jet():
    pot = manufactured_quadratic(64)
    assert np.allclose(pot.jet_A, np.diag([2.0, -2.0]), atol=1e-6)
    assert np.allclose(pot.jet_b, 0, atol=1e-8)
    assert pot.jet_dict()["A"] == pot.jet_A.tolist()


def smooth_mms():
    def exact(p):
        x, y = p[..., 0], p[..., 1]
        return np.exp(x) * np.cos(y) + (x**2 + y**2) ** 2 / 8

    def g(p):
        return 2 * (p[..., 0] ** 2 + p[..., 1] ** 2)

    def dn(t):
        x, y = np.cos(t), np.sin(t)
        gx = np.exp(x) * np.cos(y) + x * (x * x + y * y) / 2
        gy = -np.exp(x) * np.sin(y) + y * (x * x + y * y) / 2
        return gx * np.cos(t) + gy * np.sin(t)

    return exact, g, dn


def mms_error(n):
    exact, g, dn = smooth_mms()
    pot = solve_neumann(g, flux_from_function(Ball.centered(1.0), dn, n), n_r=n)
    vol = pot.polar.volumes()
    ref = exact(pot.nodes)
    ref -= np.sum(ref * vol) / vol.sum()
    return float(np.max(np.abs(pot.Phi - ref))), pot


def test_manufactured_convergence_order():
    errs = [mms_error(n)[0] for n in (32, 64, 128)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


def test_harmonicity_and_mean_zero():
    _, pot = mms_error(64)
    vol = pot.polar.volumes()
    assert abs(np.sum(pot.Phi * vol)) < 1e-12
    assert pot.laplace_residual < 1e-8


def test_incompatible_data_rejected():
    ball = Ball.centered(1.0)
    with pytest.raises(IncompatibleData):
        solve_neumann(0.0, uniform_flux(ball, 1.0, 32))


# --- gradient bound diagnostic ------------------------------------------------------


def test_gradient_bound_constant_source():
    R, c = 1.0, 2.0
    ball = Ball.centered(R)
    pot = lemma_potential(c, ball, 128)
    ratio, flag = check_gradient_bound(pot, c)
    assert not flag
    assert ratio == pytest.approx(R**2 / 4, rel=2e-2)


def test_gradient_bound_zero_source():
    ball = Ball.centered(1.0)
    pot = lemma_potential(0.0, ball, 32)
    assert check_gradient_bound(pot, 0.0) == (0.0, True)


def test_gradient_bound_stable_under_refinement():
    rng = np.random.default_rng(7)
    k = rng.normal(size=(4, 2)) * 3
    a = rng.uniform(-1, 1, 4)

    def g(p):
        return np.tanh(sum(a[i] * np.sin(p @ k[i]) for i in range(4)))

    ball = Ball.centered(1.0)
    r32 = check_gradient_bound(lemma_potential(g, ball, 32), g)[0]
    r64 = check_gradient_bound(lemma_potential(g, ball, 64), g)[0]
    assert abs(r64 / r32 - 1) < 0.2


# --- boundary flux -------------------------------------------------------------------


def test_identity_flux_is_zero():
    rho = const(64)
    T = map_from_function(rho, lambda x: x)
    flux = time_integrated_flux(T, rho, Ball.centered(0.5))
    assert np.all(flux.values == 0)


def segment_crossing_oracle(v, ball, n_bins, n_fine, rng):
    """Net outward crossings of ``[x, x + v]`` for jittered particles at fine resolution."""
    h = 2.0 / n_fine
    axis = -1 + h * (np.arange(n_fine) + 0.5)
    p = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1).reshape(-1, 2)
    p = p + rng.uniform(-h / 2, h / 2, p.shape)
    inside0 = np.sum(p**2, -1) <= ball.radius**2
    inside1 = np.sum((p + v) ** 2, -1) <= ball.radius**2
    sign = inside0.astype(float) - inside1.astype(float)
    moving = sign != 0
    # crossing point of the segment with the circle
    u, w = p[moving], np.broadcast_to(v, (moving.sum(), 2))
    qa, qb, qc = np.sum(w * w, -1), 2 * np.sum(u * w, -1), np.sum(u * u, -1) - ball.radius**2
    disc = np.sqrt(qb**2 - 4 * qa * qc)
    root = np.where(sign[moving] > 0, (-qb + disc) / (2 * qa), (-qb - disc) / (2 * qa))
    cross = u + root[:, None] * w
    ang = np.mod(np.arctan2(cross[:, 1], cross[:, 0]), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * n_bins).astype(int), n_bins - 1)
    vals = np.bincount(bins, sign[moving] * h * h, minlength=n_bins)
    return vals / (ball.radius * 2 * np.pi / n_bins)


def test_translation_flux_against_crossing_oracle():
    v = np.array([0.03, 0.02])
    ball = Ball.centered(0.5)
    n_bins = 32
    rho = const(64)
    T = map_from_function(rho, lambda x: x + v)
    flux = time_integrated_flux(T, rho, ball, n_bins)
    oracle = segment_crossing_oracle(v, ball, n_bins, 640, np.random.default_rng(0))
    scale = np.linalg.norm(v)
    assert np.max(np.abs(flux.values - oracle)) < 0.05 * scale
    theta = 0.5 * (flux.edges[1:] + flux.edges[:-1])
    pattern = v[0] * np.cos(theta) + v[1] * np.sin(theta)
    assert np.max(np.abs(flux.values - pattern)) < 0.02 * scale
    assert abs(flux.net()) < 1e-12


def test_flux_conserves_mass_under_dilation():
    # T = lam x pushes 1 on [-1,1]^2 to 1/lam^2 on [-lam,lam]^2; pick lam so the ball masses differ by 0.1
    R = 0.5
    lam = 1 / np.sqrt(1 - 0.1 / (np.pi * R**2))
    rho0 = const(64)
    rho1 = const(64, 1 / lam**2, -lam, lam)
    T = map_from_function(rho0, lambda x: lam * x)
    ball = Ball.centered(R)
    net = time_integrated_flux(T, rho0, ball).net()
    expected = ball_mass(rho0, ball) - ball_mass(rho1, ball)
    assert expected == pytest.approx(0.1, rel=1e-10)
    assert abs(net - expected) <= 1e-3 * ball_mass(rho0, ball)


def test_particle_flux_agrees_roughly():
    v = np.array([0.05, 0.0])
    rho = const(64)
    T = map_from_function(rho, lambda x: x + v)
    ball = Ball.centered(0.5)
    a = particle_flux(T, rho, ball, 16, subsamples=8).values
    b = time_integrated_flux(T, rho, ball, 16).values
    assert np.max(np.abs(a - b)) < 0.2 * np.linalg.norm(v)


def test_flux_csv(tmp_path):
    flux = uniform_flux(Ball.centered(1.0), 0.5, 8)
    flux.write_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "bin_angle_start,bin_angle_end,flux_density" and len(lines) == 9


# --- compatibility constant --------------------------------------------------------


def test_compatibility_constant_trivial():
    ball = Ball.centered(0.5)
    assert compatibility_constant(const(32), const(32), ball) == 0.0
    assert compatibility_constant(const(32, 1.2), const(32), ball) == pytest.approx(0.2, rel=1e-12)


def test_compatibility_constant_sinusoidal_pair():
    def f0(x):
        return 1 + 0.05 * np.sin(np.pi * (x[..., 0] + 0.3)) * np.sin(np.pi * x[..., 1] / 2)

    def f1(x):
        return 1 - 0.05 * np.cos(np.pi * x[..., 0]) * np.sin(np.pi * (x[..., 1] + 0.2))

    n = 64
    rho0 = GridDensity.from_function(f0, (n, n), [-1, -1], 2 / n)
    rho1 = GridDensity.from_function(f1, (n, n), [-1, -1], 2 / n)
    ball = Ball.centered(0.8)
    val, _ = integrate.dblquad(
        lambda r, t: (f0(np.array([r * np.cos(t), r * np.sin(t)])) - f1(np.array([r * np.cos(t), r * np.sin(t)]))) * r,
        0, 2 * np.pi, 0, 0.8, epsabs=1e-13,
    )
    continuum = val / ball.volume
    c = compatibility_constant(rho0, rho1, ball)
    assert c == pytest.approx(continuum, abs=1e-10)
    summation = mean_over_ball(rho0.cells - rho1.cells, rho0, ball)
    assert abs(summation - c) < 0.05 * rho0.h
