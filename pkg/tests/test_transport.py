import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from otlab.errors import ConvergenceFailure, MassMismatch, ProblemTooLarge
from otlab.measures import GridDensity
from otlab.transport import (
    TransportPlan,
    cyclical_monotonicity,
    extract_map,
    map_from_function,
    monotone_1d_oracle,
    monotone_tol,
    separable_monotone_map,
    solve_entropic,
    solve_exact,
)


def dirac(point, mass=1.0):
    p = np.atleast_1d(np.asarray(point, dtype=float))
    return GridDensity(np.full((1,) * p.size, mass), p - 0.5, 1.0)


def random_marginal(rng, n, dim=2, lower=-1.0, upper=1.0):
    return GridDensity(rng.uniform(0.2, 1.8, (n,) * dim), [lower] * dim, (upper - lower) / n)


def equalized(rng, n, dim=2):
    a, b = random_marginal(rng, n, dim), random_marginal(rng, n, dim)
    return a, b.scaled(a.total_mass() / b.total_mass())


def test_two_diracs_exact():
    plan = solve_exact(dirac([0.0, 0.0]), dirac([1.0, 0.0]))
    assert plan.cost == pytest.approx(1.0)
    assert list(zip(plan.src, plan.dst, plan.mass)) == [(0, 0, 1.0)]


def test_two_diracs_entropic_cost_tends_to_one():
    for reg in (1.0, 1e-2, 1e-4):
        assert solve_entropic(dirac([0.0, 0.0]), dirac([1.0, 0.0]), reg).cost == pytest.approx(1.0, abs=1e-9)


def test_translation_plan_is_shift():
    n, shift = 8, 2
    h = 1.0 / n
    rho0 = GridDensity(np.ones((n, n)), [0, 0], h)
    rho1 = GridDensity(np.ones((n, n)), [shift * h, 0], h)
    plan = solve_exact(rho0, rho1)
    assert np.array_equal(plan.src, plan.dst)
    assert plan.cost == pytest.approx(rho0.total_mass() * (shift * h) ** 2, rel=1e-12)
    T = extract_map(plan)
    assert np.allclose(T.displacement(), [shift * h, 0.0], atol=1e-14)
    assert np.all(T.spread == 0)


def brute_force_unit_assignment(x, y):
    best = np.inf
    for perm in itertools.permutations(range(len(y))):
        best = min(best, float(np.sum((x - y[list(perm)]) ** 2)))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_exact_matches_brute_force_permutations(seed):
    # unit masses on six random cells of two 4x4 grids: the LP optimum is a permutation
    rng = np.random.default_rng(seed)
    src_cells = rng.choice(16, 6, replace=False)
    dst_cells = rng.choice(16, 6, replace=False)
    a = np.zeros(16)
    b = np.zeros(16)
    a[src_cells] = 1.0
    b[dst_cells] = 1.0
    rho0 = GridDensity(a.reshape(4, 4), [0, 0], 1.0)
    rho1 = GridDensity(b.reshape(4, 4), [0.3, -0.7], 1.0)
    x = rho0.centers().reshape(-1, 2)[np.sort(src_cells)]
    y = rho1.centers().reshape(-1, 2)[np.sort(dst_cells)]
    assert solve_exact(rho0, rho1).cost == pytest.approx(brute_force_unit_assignment(x, y), rel=1e-12, abs=1e-12)


def test_exact_matches_hungarian_on_full_grid():
    rng = np.random.default_rng(11)
    rho0 = GridDensity(np.ones((4, 4)), [0, 0], 1.0)
    rho1 = GridDensity(np.ones((4, 4)), rng.uniform(-1, 1, 2), 1.0)
    x, y = rho0.centers().reshape(-1, 2), rho1.centers().reshape(-1, 2)
    c = ((x[:, None] - y[None]) ** 2).sum(-1)
    r, s = linear_sum_assignment(c)
    assert solve_exact(rho0, rho1).cost == pytest.approx(c[r, s].sum(), rel=1e-12)


def test_entropic_close_to_exact_8x8():
    rng = np.random.default_rng(0)
    rho0, rho1 = equalized(rng, 8)
    exact = solve_exact(rho0, rho1)
    ent = solve_entropic(rho0, rho1, 1e-3 * rho0.diameter**2)
    assert ent.cost >= exact.cost * (1 - 1e-9)
    assert ent.cost == pytest.approx(exact.cost, rel=0.02)


def test_identical_marginals_cost_vanishes_with_reg():
    rng = np.random.default_rng(1)
    rho = random_marginal(rng, 16)
    costs = [solve_entropic(rho, rho, reg).cost for reg in (1e-2, 1e-3, 1e-4)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] < 1e-4 * rho.total_mass()


def test_entropic_marginals_and_pushforward():
    rng = np.random.default_rng(2)
    rho0, rho1 = equalized(rng, 12)
    plan = solve_entropic(rho0, rho1, 4e-3, tol=1e-8)
    assert plan.marginal_defect() < 1e-7
    phi = rng.uniform(-1, 1, rho1.shape)
    assert plan.pushforward(phi) == pytest.approx(np.sum(rho1.masses() * phi), abs=1e-7 * rho0.total_mass())


def test_exact_pushforward_and_swap_symmetry():
    rng = np.random.default_rng(3)
    rho0, rho1 = equalized(rng, 8)
    plan = solve_exact(rho0, rho1)
    phi = rng.uniform(-1, 1, rho1.shape)
    assert plan.pushforward(phi) == pytest.approx(np.sum(rho1.masses() * phi), abs=1e-8 * rho0.total_mass())
    back = solve_exact(rho1.scaled(rho0.total_mass() / rho1.total_mass()), rho0)
    assert back.cost == pytest.approx(plan.cost, rel=1e-9)


def test_exact_map_is_cyclically_monotone():
    rng = np.random.default_rng(4)
    rho0, rho1 = equalized(rng, 10)
    T = extract_map(solve_exact(rho0, rho1))
    assert cyclical_monotonicity(T) >= -monotone_tol(rho0)


def test_size_cap_and_mass_mismatch():
    big = GridDensity(np.ones((65, 65)), [0, 0], 1.0)
    with pytest.raises(ProblemTooLarge):
        solve_exact(big, big)
    a = GridDensity(np.ones((4, 4)), [0, 0], 1.0)
    with pytest.raises(MassMismatch):
        solve_exact(a, a.scaled(1.01))
    with pytest.raises(MassMismatch):
        solve_entropic(a, a.scaled(1.01), 0.1)


def test_entropic_nonconvergence_carries_defect():
    rng = np.random.default_rng(5)
    rho0, rho1 = equalized(rng, 8)
    with pytest.raises(ConvergenceFailure) as info:
        solve_entropic(rho0, rho1, 1e-4, max_iter=2, tol=1e-14, scaling_steps=1)
    assert info.value.defect > 1e-14


def test_bijection_plan_extracts_exactly():
    rho = GridDensity(np.ones((3, 3)), [0, 0], 1.0)
    perm = np.array([4, 0, 8, 2, 6, 1, 3, 7, 5])
    plan = TransportPlan(rho, rho, np.arange(9), perm, np.ones(9), 0.0)
    T = extract_map(plan)
    assert np.array_equal(T.values.reshape(-1, 2), rho.centers().reshape(-1, 2)[perm])


def test_zero_mass_cells_skipped():
    rho0 = GridDensity(np.array([[1.0, 0.0], [1.0, 1.0]]), [0, 0], 1.0)
    rho1 = GridDensity(np.array([[1.0, 1.0], [0.0, 1.0]]), [0, 0], 1.0)
    T = extract_map(solve_exact(rho0, rho1))
    assert T.skipped == 1 and not T.defined()[0, 1]


# --- 1-d oracle ------------------------------------------------------------------------


def line(values, lower=0.0, upper=1.0):
    values = np.asarray(values, dtype=float)
    return GridDensity(values, [lower], (upper - lower) / values.size)


def test_monotone_oracle_identity_and_translation():
    rho = line(np.linspace(0.5, 1.5, 32))
    assert np.allclose(monotone_1d_oracle(rho, rho).values[:, 0], rho.axes()[0], atol=1e-14)
    moved = GridDensity(rho.cells, [0.25], rho.h)
    assert np.allclose(monotone_1d_oracle(rho, moved).values[:, 0], rho.axes()[0] + 0.25, atol=1e-14)


def test_monotone_oracle_dilation():
    rho0 = line(np.ones(32), 0.0, 1.0)
    rho1 = line(np.full(32, 0.5), 0.0, 2.0)
    assert np.allclose(monotone_1d_oracle(rho0, rho1).values[:, 0], 2 * rho0.axes()[0], atol=1e-13)


def test_exact_1d_matches_oracle_within_h():
    rng = np.random.default_rng(6)
    rho0 = line(rng.uniform(0.2, 2.0, 64), -1, 1)
    rho1 = line(rng.uniform(0.2, 2.0, 64), -1, 1)
    rho1 = rho1.scaled(rho0.total_mass() / rho1.total_mass())
    T = extract_map(solve_exact(rho0, rho1)).values[:, 0]
    oracle = monotone_1d_oracle(rho0, rho1).values[:, 0]
    assert np.max(np.abs(T - oracle)) <= rho0.h


def test_entropic_1d_close_to_oracle():
    rho0 = line(1 + 0.5 * np.sin(np.linspace(0, 3, 128)), -1, 1)
    rho1 = line(1 - 0.3 * np.cos(np.linspace(0, 2, 128)), -1, 1)
    rho1 = rho1.scaled(rho0.total_mass() / rho1.total_mass())
    oracle = monotone_1d_oracle(rho0, rho1).values[:, 0]
    for reg in (4e-3, 1e-3):
        T = extract_map(solve_entropic(rho0, rho1, reg)).values[:, 0]
        interior = slice(16, -16)
        assert np.max(np.abs(T - oracle)[interior]) <= 3 * np.sqrt(reg) + rho0.h


def test_separable_map_agrees_with_exact_solver():
    prof0 = np.array([1.0, 1.9, 0.1, 1.0, 1.4, 0.6])
    prof1 = np.array([0.1, 1.9, 1.0, 1.0, 1.0, 1.0])
    rho0 = GridDensity(np.repeat(prof0[:, None], 5, 1), [0, 0], 1.0)
    rho1 = GridDensity(np.repeat(prof1[:, None], 5, 1), [0, 0], 1.0)
    sep = separable_monotone_map(rho0, rho1)
    ex = extract_map(solve_exact(rho0, rho1))
    assert np.allclose(sep.values[..., 1], ex.values[..., 1], atol=1e-9)
    assert np.max(np.abs(sep.values[..., 0] - ex.values[..., 0])) <= rho0.h


def test_map_from_function_and_csv_exports(tmp_path):
    rho = GridDensity(np.ones((2, 2)), [0, 0], 0.5)
    T = map_from_function(rho, lambda x: x + 0.125)
    T.write_csv(tmp_path / "map.csv")
    lines = (tmp_path / "map.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,Tx1,Tx2" and lines[1] == "0.25,0.25,0.375,0.375"
    solve_exact(rho, rho).write_csv(tmp_path / "plan.csv")
    assert (tmp_path / "plan.csv").read_text().splitlines()[0] == "src_index,dst_index,mass"
