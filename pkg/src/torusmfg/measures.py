"""Probability densities on the torus and functionals of measures.

Densities are nodal arrays ``m`` with ``m >= 0`` and ``integrate(m) == 1``.
Entropy and Fisher information need strictly positive densities; values at
or below :data:`POSITIVITY_FLOOR` are clamped (and the density
renormalised) as long as they occupy at most 1% of the nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DegenerateDensityError, DensityFormatError, GridError
from .grid import TorusGrid

POSITIVITY_FLOOR = 1e-12
_MAX_FLOOR_FRACTION = 0.01
_W1_FINE_POINTS = 4096
_BL_MAX_NODES = 4096


@dataclass(frozen=True)
class FourierMoment:
    k: tuple
    a: float
    b: float

    @property
    def q(self):
        return self.a**2 + self.b**2


# -- construction and validation ---------------------------------------------


def uniform_density(grid: TorusGrid) -> np.ndarray:
    return np.full(grid.shape, 1.0 / grid.volume)


def normalize(grid: TorusGrid, m) -> np.ndarray:
    """Rescale ``m`` (batched over leading axes) to unit mass."""
    m = np.asarray(m, dtype=float)
    mass = grid.integrate(m)
    return m / np.expand_dims(mass, tuple(range(-grid.dim, 0)))


def validate_density(grid: TorusGrid, m, mass_tol=1e-6, name="density") -> np.ndarray:
    """Reject negative or wrongly normalised densities instead of repairing them."""
    m = grid.check(m, name)
    if np.any(m < 0):
        raise DegenerateDensityError(f"{name} has negative values (min {m.min():.3e})")
    err = np.max(np.abs(grid.integrate(m) - 1.0))
    if err > mass_tol:
        raise DegenerateDensityError(f"{name} has mass error {err:.3e} > {mass_tol:.1e}")
    return m


def positive_part(grid: TorusGrid, m) -> np.ndarray:
    """Clamp at the positivity floor and renormalise.

    Raises
    ------
    DegenerateDensityError
        If more than 1% of the nodes of any density sit at or below the floor.
    """
    m = grid.check(m, "density")
    low = m <= POSITIVITY_FLOOR
    frac = low.mean(axis=tuple(range(-grid.dim, 0)))
    if np.any(frac > _MAX_FLOOR_FRACTION):
        raise DegenerateDensityError(
            f"density is at or below the positivity floor on {100 * np.max(frac):.1f}% of nodes"
        )
    if not low.any():
        return normalize(grid, m)
    return normalize(grid, np.maximum(m, POSITIVITY_FLOOR))


def m_eps_family(grid: TorusGrid, eps, k=1) -> np.ndarray:
    """Nodal values of ``(1 + 2 eps cos(k.x)) / (2 pi)^d`` for ``eps`` in (0, 1/4)."""
    if not 0.0 < eps < 0.25:
        raise ValueError(f"eps must lie in (0, 1/4), got {eps}")
    k = _wavevector(grid, k)
    return (1.0 + 2.0 * eps * np.cos(_phase(grid, k))) / grid.volume


def von_mises(grid: TorusGrid, beta, center=0.0) -> np.ndarray:
    """``exp(beta * sum_j cos(x_j - center)) / Z``."""
    expo = sum(np.cos(x - center) for x in grid.nodes)
    w = np.exp(beta * (expo - grid.dim))
    return normalize(grid, w)


def two_bump(grid: TorusGrid, beta=3.0, weight=0.6) -> np.ndarray:
    """Mixture of two antipodal von Mises bumps with unequal weights."""
    return weight * von_mises(grid, beta, 0.0) + (1.0 - weight) * von_mises(grid, beta, np.pi)


# -- functionals ----------------------------------------------------------------


def entropy(grid: TorusGrid, m):
    """``integral of m log m``; batched over leading axes."""
    m = positive_part(grid, m)
    return grid.integrate(m * np.log(m))


def fisher_information(grid: TorusGrid, m):
    """``integral of |grad m|^2 / m``; batched over leading axes."""
    m = positive_part(grid, m)
    return grid.integrate(grid.grad_norm2(m) / m)


def _wavevector(grid: TorusGrid, k) -> tuple:
    k = tuple(int(v) for v in np.atleast_1d(k))
    if len(k) != grid.dim:
        raise GridError(f"wavevector {k} does not match dimension {grid.dim}")
    if not any(k):
        raise GridError("wavevector k must be non-zero")
    if max(abs(v) for v in k) >= grid.n // 2:
        raise GridError(f"wavevector {k} is not resolved below the Nyquist mode of N={grid.n}")
    return k


def _phase(grid: TorusGrid, k):
    return sum(kj * x for kj, x in zip(k, grid.nodes))


def moment_ab(grid: TorusGrid, m, k):
    """``(a_k, b_k)`` of ``m`` read off the discrete Fourier transform."""
    k = _wavevector(grid, k)
    sign = 1.0
    if k[-1] < 0:
        k, sign = tuple(-v for v in k), -1.0
    idx = tuple(v % grid.n for v in k[:-1]) + (k[-1],)
    coef = grid.fft(np.asarray(m, dtype=float))[(Ellipsis,) + idx] * grid.cell_volume
    return coef.real, -sign * coef.imag


def fourier_moment(grid: TorusGrid, m, k) -> FourierMoment:
    """Cosine and sine moments ``a_k, b_k`` and ``q_k = a_k^2 + b_k^2``."""
    a, b = moment_ab(grid, m, k)
    return FourierMoment(_wavevector(grid, k), a, b)


# -- metrics --------------------------------------------------------------------


def _abs_integral_linear(v, dx):
    """Exact integral of ``|v|`` for the periodic piecewise-linear interpolant."""
    a = v
    b = np.roll(v, -1, axis=-1)
    aa, bb = np.abs(a), np.abs(b)
    total = aa + bb
    crossing = a * b < 0
    safe = np.where(total > 0, total, 1.0)
    seg = np.where(crossing, (a**2 + b**2) / (2.0 * safe), 0.5 * total)
    return dx * seg.sum(axis=-1)


def wasserstein1_circle(grid: TorusGrid, m1, m2, upsample=None):
    """Wasserstein-1 distance on the circle.

    Computes ``min_c integral |F1 - F2 - c|`` where ``F1 - F2`` is the
    antiderivative of the trigonometric interpolant of ``m1 - m2``.  The
    difference of cumulative functions is refined to ``upsample * N`` nodes
    (by default at least 4096) and integrated exactly as a piecewise-linear
    function; the optimal ``c`` is the median of the refined values.
    Batched over leading axes.
    """
    if grid.dim != 1:
        raise GridError("wasserstein1_circle is only defined for d = 1")
    diff = normalize(grid, grid.check(m1)) - normalize(grid, grid.check(m2))
    dhat = np.fft.rfft(diff, axis=-1)
    k = grid.wavenumbers[0]
    inv = np.zeros_like(dhat)
    nz = (k > 0) & (k < grid.n // 2)
    inv[..., nz] = dhat[..., nz] / (1j * k[nz])
    cumulative = np.fft.irfft(inv, n=grid.n, axis=-1)
    if upsample is None:
        upsample = max(1, math.ceil(_W1_FINE_POINTS / grid.n))
    fine = grid.refine(cumulative, upsample)
    c = np.median(fine, axis=-1, keepdims=True)
    return _abs_integral_linear(fine - c, grid.h / upsample)


def _adjacent_pairs(grid: TorusGrid):
    idx = np.arange(grid.n**grid.dim).reshape(grid.shape)
    left, right = [], []
    for axis in range(grid.dim):
        left.append(idx.ravel())
        right.append(np.roll(idx, -1, axis=axis).ravel())
    return np.concatenate(left), np.concatenate(right)


def bounded_lipschitz_distance(grid: TorusGrid, m1, m2) -> float:
    """Bounded-Lipschitz distance by linear programming over grid functions.

    Maximises ``sum f_j (m1_j - m2_j) h^d`` subject to ``|f_j| <= s`` and
    ``|f_j - f_j'| <= (1 - s) h`` for grid-adjacent nodes, ``0 <= s <= 1``.
    Only practical for ``N^d <= 4096``.
    """
    n_nodes = grid.n**grid.dim
    if n_nodes > _BL_MAX_NODES:
        raise GridError(
            f"bounded_lipschitz_distance is limited to N^d <= {_BL_MAX_NODES} nodes "
            f"(got {n_nodes}); use wasserstein1_circle for large 1-D grids"
        )
    w = (grid.check(m1) - grid.check(m2)).ravel() * grid.cell_volume
    left, right = _adjacent_pairs(grid)
    n_pairs = left.size
    eye = sp.identity(n_nodes, format="csr")
    rows = np.r_[np.arange(n_pairs), np.arange(n_pairs)]
    diff = sp.csr_matrix(
        (np.r_[np.ones(n_pairs), -np.ones(n_pairs)], (rows, np.r_[left, right])),
        shape=(n_pairs, n_nodes),
    )
    ones_nodes = np.ones((n_nodes, 1))
    h_pairs = np.full((n_pairs, 1), grid.h)
    a_ub = sp.vstack(
        [
            sp.hstack([eye, -ones_nodes]),
            sp.hstack([-eye, -ones_nodes]),
            sp.hstack([diff, h_pairs]),
            sp.hstack([-diff, h_pairs]),
        ],
        format="csr",
    )
    b_ub = np.r_[np.zeros(2 * n_nodes), np.full(2 * n_pairs, grid.h)]
    cost = np.r_[-w, 0.0]
    bounds = [(None, None)] * n_nodes + [(0.0, 1.0)]
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"bounded-Lipschitz LP failed: {res.message}")
    return max(0.0, -res.fun)


# -- CSV I/O ------------------------------------------------------------------


def _csv_header(dim):
    if dim == 1:
        return ["index", "x", "m"]
    return [f"i{j}" for j in range(dim)] + [f"x{j}" for j in range(dim)] + ["m"]


def write_density_csv(path, grid: TorusGrid, m) -> None:
    m = grid.check(m)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(grid.dim))
        for idx in np.ndindex(*grid.shape):
            xs = [f"{grid.coords[i]:.17g}" for i in idx]
            writer.writerow([*idx, *xs, f"{m[idx]:.17g}"])


def read_density_csv(path):
    """Read a density CSV; returns ``(grid, m)``.

    The header is ``index,x,m`` in 1-D and ``i0,i1,x0,x1,m`` in 2-D.  Rows
    may come in any order but every node must appear exactly once.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DensityFormatError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    dim = {3: 1, 5: 2}.get(len(header))
    if dim is None or header != _csv_header(dim):
        raise DensityFormatError(f"{path}:1: unexpected header {header}")
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if r and any(c.strip() for c in r)]
    n = round(len(body) ** (1.0 / dim))
    if n**dim != len(body):
        raise DensityFormatError(f"{path}: {len(body)} rows is not N^{dim}")
    try:
        grid = TorusGrid(dim, n)
    except GridError as exc:
        raise DensityFormatError(f"{path}: {exc}") from None
    m = np.full(grid.shape, np.nan)
    for line, row in body:
        if len(row) != len(header):
            raise DensityFormatError(f"{path}:{line}: expected {len(header)} columns")
        try:
            idx = tuple(int(c) for c in row[:dim])
            xs = [float(c) for c in row[dim : 2 * dim]]
            val = float(row[-1])
        except ValueError:
            raise DensityFormatError(f"{path}:{line}: non-numeric entry") from None
        if any(not 0 <= i < n for i in idx):
            raise DensityFormatError(f"{path}:{line}: index {idx} out of range")
        if any(abs(x - grid.coords[i]) > 1e-9 for x, i in zip(xs, idx)):
            raise DensityFormatError(f"{path}:{line}: coordinates do not match node {idx}")
        if not np.isfinite(val) or val < 0:
            raise DensityFormatError(f"{path}:{line}: density value {row[-1]!r} is not finite and >= 0")
        if not np.isnan(m[idx]):
            raise DensityFormatError(f"{path}:{line}: duplicate node {idx}")
        m[idx] = val
    return grid, m
