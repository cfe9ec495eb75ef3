import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from torusmfg import measures
from torusmfg.errors import DegenerateDensityError, DensityFormatError, GridError
from torusmfg.grid import TorusGrid

from conftest import random_positive_density

TWO_PI = 2 * np.pi

# Frozen from adaptive quadrature of the closed-form integrand (see test below).
ENTROPY_RAISED_COSINE = -1.5310252460
FISHER_EPS_01_K1 = 1 - math.sqrt(1 - 0.04)
FISHER_EPS_01_K2 = 4 * (1 - math.sqrt(1 - 0.04))


def _quad_entropy(density):
    val, _ = integrate.quad(lambda x: density(x) * math.log(density(x)), 0, TWO_PI, limit=400,
                            epsabs=1e-13, epsrel=1e-12)
    return val


def test_uniform_entropy_and_fisher(grid1):
    m = measures.uniform_density(grid1)
    assert measures.entropy(grid1, m) == pytest.approx(-math.log(TWO_PI), abs=1e-13)
    assert abs(measures.fisher_information(grid1, m)) < 1e-14


def test_raised_cosine_entropy_quadrature():
    delta = 1e-6

    def dens(x):
        return (1 - delta) * (1 + math.cos(x)) / TWO_PI + delta / TWO_PI

    assert _quad_entropy(dens) == pytest.approx(ENTROPY_RAISED_COSINE, abs=1e-9)
    g = TorusGrid(1, 1024)
    x = g.coords
    m = (1 - delta) * (1 + np.cos(x)) / TWO_PI + delta / TWO_PI
    assert measures.entropy(g, m) == pytest.approx(ENTROPY_RAISED_COSINE, abs=1e-4)


def test_m_eps_entropy_matches_quadrature(grid1):
    oracle = _quad_entropy(lambda x: (1 + 0.2 * math.cos(x)) / TWO_PI)
    value = measures.entropy(grid1, measures.m_eps_family(grid1, 0.1, 1))
    assert value == pytest.approx(oracle, abs=1e-12)
    assert value > -TWO_PI


def test_fisher_closed_forms(grid1):
    # independent brute quadrature of sin^2/(1 + a cos) cross-checks the closed form
    brute, _ = integrate.quad(lambda t: 0.04 * math.sin(t) ** 2 / (1 + 0.2 * math.cos(t)) / TWO_PI, 0, TWO_PI)
    assert brute == pytest.approx(FISHER_EPS_01_K1, abs=1e-13)
    assert measures.fisher_information(grid1, measures.m_eps_family(grid1, 0.1, 1)) == pytest.approx(
        FISHER_EPS_01_K1, abs=1e-9
    )
    assert measures.fisher_information(grid1, measures.m_eps_family(grid1, 0.1, 2)) == pytest.approx(
        FISHER_EPS_01_K2, abs=1e-8
    )


def test_fisher_of_raised_cosine_endpoint():
    g = TorusGrid(1, 4096)
    delta = 1e-8
    m = (1 - delta) * (1 + np.cos(g.coords)) / TWO_PI + delta / TWO_PI
    assert measures.fisher_information(g, m) == pytest.approx(1.0, abs=1e-3)


def test_degenerate_density_rejected(grid1):
    m = np.zeros(grid1.shape)
    m[:64] = 1.0
    m = measures.normalize(grid1, m)
    with pytest.raises(DegenerateDensityError):
        measures.entropy(grid1, m)
    with pytest.raises(DegenerateDensityError):
        measures.fisher_information(grid1, m)


def test_positive_part_clamps_sparse_zeros(grid1):
    m = measures.uniform_density(grid1).copy()
    m[5] = 0.0
    out = measures.positive_part(grid1, m)
    assert out.min() == pytest.approx(measures.POSITIVITY_FLOOR / grid1.integrate(np.maximum(m, 1e-12)))
    assert grid1.integrate(out) == pytest.approx(1.0, abs=1e-14)


def test_validate_density(grid1):
    m = measures.uniform_density(grid1)
    assert measures.validate_density(grid1, m) is not None
    with pytest.raises(DegenerateDensityError, match="mass"):
        measures.validate_density(grid1, 2 * m)
    bad = m.copy()
    bad[0] = -1e-3
    with pytest.raises(DegenerateDensityError, match="negative"):
        measures.validate_density(grid1, bad)


def test_fourier_moment_examples(grid1):
    x = grid1.coords
    for k in (1, 2, 7):
        mom = measures.fourier_moment(grid1, measures.uniform_density(grid1), k)
        assert abs(mom.a) < 1e-15 and abs(mom.b) < 1e-15 and mom.q < 1e-28
    mom = measures.fourier_moment(grid1, measures.m_eps_family(grid1, 0.2, 1), 1)
    assert (mom.a, mom.b, mom.q) == pytest.approx((0.2, 0.0, 0.04), abs=1e-14)
    mom = measures.fourier_moment(grid1, (1 + 0.4 * np.sin(2 * x)) / TWO_PI, 2)
    assert (mom.a, mom.b, mom.q) == pytest.approx((0.0, 0.2, 0.04), abs=1e-14)
    with pytest.raises(GridError):
        measures.fourier_moment(grid1, measures.uniform_density(grid1), 0)


def test_fourier_moment_matches_direct_quadrature(rng, grid2):
    m = random_positive_density(rng, grid2)
    x, y = grid2.nodes
    for k in [(1, 0), (0, 2), (1, -1), (-2, 1)]:
        mom = measures.fourier_moment(grid2, m, k)
        phase = k[0] * x + k[1] * y
        assert mom.a == pytest.approx(grid2.integrate(m * np.cos(phase)), abs=1e-13)
        assert mom.b == pytest.approx(grid2.integrate(m * np.sin(phase)), abs=1e-13)
        neg = measures.fourier_moment(grid2, m, tuple(-v for v in k))
        assert neg.q == pytest.approx(mom.q, abs=1e-15)
        assert mom.q <= 1


def test_m_eps_family_examples(grid1):
    m = measures.m_eps_family(grid1, 0.1, 1)
    assert m.min() == pytest.approx(0.8 / TWO_PI, abs=1e-15)
    assert grid1.integrate(m) == pytest.approx(1.0, abs=1e-14)
    for eps in (0.01, 0.1, 0.24):
        assert measures.fourier_moment(grid1, measures.m_eps_family(grid1, eps, 3), 3).q == pytest.approx(
            eps**2, abs=1e-12
        )
    for eps in (0.0, 0.25, -0.1):
        with pytest.raises(ValueError):
            measures.m_eps_family(grid1, eps, 1)


def test_w1_examples():
    g = TorusGrid(1, 256)
    x = g.coords
    m1 = (1 + np.cos(x)) / TWO_PI
    uni = measures.uniform_density(g)
    assert measures.wasserstein1_circle(g, m1, m1) == 0.0
    assert measures.wasserstein1_circle(g, m1, uni) == pytest.approx(2 / np.pi, abs=1e-6)
    # brute minimisation over c of the integral of |sin(x)/(2 pi) - c|
    cs = np.linspace(-0.05, 0.05, 2001)
    brute = min(integrate.quad(lambda t: abs(math.sin(t) / TWO_PI - c), 0, TWO_PI, points=[np.pi])[0] for c in cs)
    assert brute == pytest.approx(2 / np.pi, abs=1e-8)


@pytest.mark.parametrize("s", [1, 3, 10])
def test_w1_shift_transport_bound(rng, s):
    g = TorusGrid(1, 128)
    m = random_positive_density(rng, g, degree=8)
    assert measures.wasserstein1_circle(g, m, g.shift(m, s)) <= s * g.h + 1e-12


def test_w1_rejects_two_dimensions(grid2):
    m = measures.uniform_density(grid2)
    with pytest.raises(GridError):
        measures.wasserstein1_circle(grid2, m, m)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_w1_is_a_metric(seed):
    g = TorusGrid(1, 64)
    rng = np.random.default_rng(seed)
    a, b, c = (random_positive_density(rng, g, degree=5) for _ in range(3))
    ab = measures.wasserstein1_circle(g, a, b)
    assert ab == measures.wasserstein1_circle(g, b, a)
    assert ab >= 0
    assert ab <= measures.wasserstein1_circle(g, a, c) + measures.wasserstein1_circle(g, c, b) + 1e-10


def test_bounded_lipschitz_examples():
    g = TorusGrid(1, 64)
    m1 = (1 + np.cos(g.coords)) / TWO_PI
    uni = measures.uniform_density(g)
    assert measures.bounded_lipschitz_distance(g, m1, m1) == pytest.approx(0.0, abs=1e-12)
    d = measures.bounded_lipschitz_distance(g, m1, uni)
    assert 0 < d <= 2 / np.pi + 1e-12
    assert d <= measures.wasserstein1_circle(g, m1, uni) + 1e-9
    assert d <= 2


def test_bounded_lipschitz_size_guard():
    g = TorusGrid(2, 128)
    m = measures.uniform_density(g)
    with pytest.raises(GridError, match="wasserstein1_circle"):
        measures.bounded_lipschitz_distance(g, m, m)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bounded_lipschitz_below_w1(seed):
    g = TorusGrid(1, 32)
    rng = np.random.default_rng(seed)
    a, b = (random_positive_density(rng, g, degree=4) for _ in range(2))
    assert measures.bounded_lipschitz_distance(g, a, b) <= measures.wasserstein1_circle(g, a, b) + 1e-9


def test_bounded_lipschitz_two_dimensional(grid2, rng):
    a, b = (random_positive_density(rng, TorusGrid(2, 16), degree=3) for _ in range(2))
    d = measures.bounded_lipschitz_distance(TorusGrid(2, 16), a, b)
    assert 0 < d <= 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fisher_dominates_mode_moments(seed):
    g = TorusGrid(1, 64)
    m = random_positive_density(np.random.default_rng(seed), g, degree=8)
    fisher = measures.fisher_information(g, m)
    for k in range(1, g.n // 4 + 1):
        assert fisher >= 2 * k * k * measures.fourier_moment(g, m, k).q - 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dim=st.sampled_from([1, 2]))
def test_entropy_lower_bound(seed, dim):
    g = TorusGrid(dim, 32)
    m = random_positive_density(np.random.default_rng(seed), g, degree=6)
    assert measures.entropy(g, m) >= -g.volume


@pytest.mark.parametrize("eps", [0.05, 0.02, 0.01])
def test_fisher_ratio_tends_to_one(eps):
    g = TorusGrid(1, 256)
    ratio = measures.fisher_information(g, measures.m_eps_family(g, eps, 1)) / (2 * eps**2)
    assert 1 <= ratio <= 1 + 3 * eps**2


def test_density_csv_roundtrip(tmp_path, rng):
    for g in (TorusGrid(1, 16), TorusGrid(2, 8)):
        m = random_positive_density(rng, g, degree=2)
        path = tmp_path / f"m{g.dim}.csv"
        measures.write_density_csv(path, g, m)
        g2, m2 = measures.read_density_csv(path)
        assert g2 == g and np.array_equal(m, m2)


def test_density_csv_errors_carry_line_numbers(tmp_path):
    g = TorusGrid(1, 8)
    path = tmp_path / "m.csv"
    measures.write_density_csv(path, g, measures.uniform_density(g))
    lines = path.read_text().splitlines()
    lines[4] = lines[4].rsplit(",", 1)[0] + ",-1"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DensityFormatError, match=r":5:"):
        measures.read_density_csv(path)
    path.write_text("a,b,c\n")
    with pytest.raises(DensityFormatError, match="header"):
        measures.read_density_csv(path)
