import numpy as np
import pytest

from otlab.errors import EmptyRestriction, InputError, MassMismatch
from otlab.measures import (
    Ball,
    GridDensity,
    ball_volume,
    data_term,
    equalize_masses,
    mean_over_ball,
    read_csv_grid,
    read_pgm,
    restrict,
    sphere_area,
    write_csv_grid,
)


def unit_square(n, value=1.0):
    return GridDensity(np.full((n, n), value), [-1.0, -1.0], 2.0 / n)


def test_ball_volume_and_area():
    assert ball_volume(2, 1.0) == pytest.approx(np.pi)
    assert ball_volume(1, 0.5) == pytest.approx(1.0)
    assert sphere_area(2, 2.0) == pytest.approx(4 * np.pi)
    assert sphere_area(1) == 2


def test_ball_rejects_nonpositive_radius():
    with pytest.raises(InputError):
        Ball([0.0, 0.0], 0.0)


def test_negative_cells_rejected():
    with pytest.raises(InputError):
        GridDensity(np.array([[1.0, -0.1], [1.0, 1.0]]), [0, 0], 0.5)


@pytest.mark.parametrize("n", [64, 128])
def test_restrict_uniform_mass_is_ball_volume(n):
    rho = restrict(unit_square(n), Ball.centered(1.0))
    assert abs(rho.total_mass() - np.pi) < 4 * (2.0 / n)


def test_restrict_disjoint_ball():
    with pytest.raises(EmptyRestriction):
        restrict(unit_square(16), Ball([5.0, 5.0], 0.5))


def test_restrict_checkerboard_against_direct_sum():
    n = 128
    i, j = np.indices((n, n))
    rho = GridDensity(2.0 * ((i + j) % 2), [-1.0, -1.0], 2.0 / n)
    ball = Ball.centered(0.5)
    x = rho.centers()
    direct = sum(rho.cells[a, b] * rho.h**2 for a in range(n) for b in range(n) if x[a, b] @ x[a, b] <= 0.25)
    assert restrict(rho, ball).total_mass() == pytest.approx(direct, rel=1e-12)
    assert abs(direct - np.pi / 4) < 4 * rho.h


def test_data_term_examples():
    ball = Ball.centered(0.5)
    one = unit_square(32)
    assert data_term(one, one, ball) == 0.0
    assert data_term(unit_square(32, 1.2), one, ball) == pytest.approx(0.04)


def test_data_term_sin_pattern_direct_scan():
    n = 32
    rho0 = GridDensity.from_function(lambda x: 1 + 0.1 * np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]), (n, n), [-1, -1], 2 / n)
    ball = Ball([0.2, -0.1], 0.6)
    x = rho0.centers()
    best = 0.0
    for a in range(n):
        for b in range(n):
            if np.sum((x[a, b] - ball.center) ** 2) <= 0.36:
                best = max(best, (1 - rho0.cells[a, b]) ** 2)
    assert data_term(rho0, unit_square(n), ball) == pytest.approx(best, rel=1e-14)


def test_mean_over_ball_moments():
    rho = unit_square(128)
    ball = Ball.centered(1.0)
    x = rho.centers()
    assert mean_over_ball(np.full(rho.shape, 3.5), rho, ball) == pytest.approx(3.5)
    assert abs(mean_over_ball(x[..., 0], rho, ball)) < 1e-12
    assert abs(mean_over_ball((x**2).sum(-1), rho, ball) - 0.5) < 2 * rho.h


def test_equalize_masses():
    a, b = unit_square(8), unit_square(8, 1 + 1e-10)
    b2, factor = equalize_masses(a, b)
    assert b2.total_mass() == pytest.approx(a.total_mass(), rel=1e-15)
    assert factor == pytest.approx(1 / (1 + 1e-10))
    with pytest.raises(MassMismatch):
        equalize_masses(a, unit_square(8, 1.01))


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    rho = GridDensity(rng.uniform(0.5, 1.5, (5, 7)), [0.25, -1.0], 0.125)
    write_csv_grid(rho, tmp_path / "g.csv")
    back = read_csv_grid(tmp_path / "g.csv")
    assert np.array_equal(back.cells, rho.cells)
    assert np.array_equal(back.origin, rho.origin) and back.h == rho.h


def test_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("3,2,2,2,0,0,0,1\n1,1\n")
    with pytest.raises(InputError):
        read_csv_grid(tmp_path / "bad.csv")


@pytest.mark.parametrize("maxval,dtype", [(255, np.uint8), (65535, ">u2")])
def test_pgm_affine_rescale(tmp_path, maxval, dtype):
    img = np.array([[0, maxval, 0], [maxval, 0, maxval]], dtype=dtype)
    path = tmp_path / "d.pgm"
    path.write_bytes(f"P5\n# comment\n3 2\n{maxval}\n".encode() + img.tobytes())
    rho = read_pgm(path, value_range=(0.5, 2.0))
    assert rho.shape == (3, 2)
    # top image row becomes the highest y index
    assert rho.cells[1, 1] == 2.0 and rho.cells[0, 1] == 0.5 and rho.cells[0, 0] == 2.0
