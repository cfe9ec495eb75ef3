"""Stationary equilibria: discounted HJB plus Gibbs density, by damped Picard.

A stationary equilibrium ``(u, m)`` solves

    rho u - nu Lap u + 1/2 |grad u|^2 = f(x, m),
    m = exp(-u / nu) / Z.

:func:`solve_stationary_mfg` runs a damped fixed-point iteration from
several seed densities and returns the distinct solutions it finds (two
solutions that differ by a circular shift count once).
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from . import measures
from .coupling import FourierKernel, ModelParams, interaction_cost, linear_derivative_free_energy
from .errors import ConvergenceError
from .grid import TorusGrid

log = logging.getLogger(__name__)

MIN_DAMPING = 1.0 / 64.0
DEDUP_TOL = 1e-6


class AndersonMixer:
    """Type-II Anderson acceleration for a fixed-point map ``x -> g(x)``."""

    def __init__(self, depth=5, reg=1e-12):
        self.depth = depth
        self.reg = reg
        self._dx = deque(maxlen=depth)
        self._dr = deque(maxlen=depth)
        self._prev = None

    def step(self, x, gx):
        """Return the next iterate given ``x`` and ``g(x)`` (flat arrays)."""
        r = gx - x
        if self.depth == 0:
            return gx
        if self._prev is not None:
            x_old, g_old, r_old = self._prev
            self._dx.append(gx - g_old)
            self._dr.append(r - r_old)
        self._prev = (x, gx, r)
        if not self._dr:
            return gx
        dr = np.stack(self._dr, axis=1)
        dg = np.stack(self._dx, axis=1)
        gram = dr.T @ dr
        gram += self.reg * np.trace(gram) * np.eye(gram.shape[0])
        try:
            gamma = np.linalg.solve(gram, dr.T @ r)
        except np.linalg.LinAlgError:
            self.reset()
            return gx
        return gx - dg @ gamma

    def reset(self):
        self._dx.clear()
        self._dr.clear()
        self._prev = None


def hjb_residual(grid, u, f, params):
    """Sup norm of ``rho u - nu Lap u + 1/2 |grad u|^2 - f``."""
    res = params.rho * u - params.nu * grid.laplacian(u) + 0.5 * grid.grad_norm2(u) - f
    return float(np.max(np.abs(res)))


def _roundoff_floor(grid, u, f, params):
    # residual attainable in double precision: the spectral Laplacian amplifies
    # rounding by the largest |k|^2
    scale = (params.rho + params.nu * grid.k_squared.max()) * np.max(np.abs(u)) + np.max(np.abs(f))
    return 16.0 * np.finfo(float).eps * scale


def solve_stationary_hjb(grid: TorusGrid, f, params: ModelParams, u_init=None, max_iter=500,
                         tol=1e-12, anderson_depth=5):
    """Solve ``rho u - nu Lap u + 1/2 |grad u|^2 = f``.

    Iterates ``u <- (rho - nu Lap)^{-1} (f - 1/2 |grad u|^2)`` in Fourier
    space with Anderson acceleration.

    The tolerance is raised to the double-precision noise floor of the
    residual when ``tol`` is below it.

    Raises
    ------
    ConvergenceError
        If the sup-norm residual is still above ``tol`` after ``max_iter``
        iterations.
    """
    f = grid.check(f, "cost field")
    resolvent = 1.0 / (params.rho + params.nu * grid.k_squared)
    u = np.zeros(grid.shape) if u_init is None else grid.check(u_init, "u_init").copy()
    mixer = AndersonMixer(anderson_depth)
    residual = np.inf
    for it in range(1, max_iter + 1):
        gu = grid.ifft(grid.fft(f - 0.5 * grid.grad_norm2(u)) * resolvent)
        residual = hjb_residual(grid, u, f, params)
        if residual <= max(tol, _roundoff_floor(grid, u, f, params)):
            return u
        u = mixer.step(u.ravel(), gu.ravel()).reshape(grid.shape)
        if not np.all(np.isfinite(u)):
            break
    residual = hjb_residual(grid, u, f, params) if np.all(np.isfinite(u)) else np.inf
    if residual <= max(tol, _roundoff_floor(grid, u, f, params)):
        return u
    raise ConvergenceError(
        f"stationary HJB did not reach {tol:.1e} in {max_iter} iterations (residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


def gibbs_density(grid: TorusGrid, u, nu):
    """``exp(-u/nu) / Z``, computed after shifting ``u`` by its minimum."""
    u = grid.check(u, "u")
    w = np.exp(-(u - u.min()) / nu)
    return measures.normalize(grid, w)


class StationarityResidual(NamedTuple):
    r_hjb: float
    r_fp: float
    r_const: float


def stationarity_residual(grid, u, m, kernel, params) -> StationarityResidual:
    """Sup-norm residuals of both stationary equations and the oscillation of
    the linear derivative of the free energy."""
    f = interaction_cost(grid, kernel, m)
    r_hjb = hjb_residual(grid, u, f, params)
    flux = grid.gradient(u) * m
    r_fp = float(np.max(np.abs(params.nu * grid.laplacian(m) + grid.divergence(flux))))
    dphi = linear_derivative_free_energy(grid, kernel, params, m)
    return StationarityResidual(r_hjb, r_fp, float(dphi.max() - dphi.min()))


def default_seeds(grid: TorusGrid):
    """Seed library: uniform, an m_eps density, von Mises bumps and a two-bump mixture."""
    k = (1,) + (0,) * (grid.dim - 1)
    seeds = [
        ("uniform", measures.uniform_density(grid)),
        ("m_eps(0.2)", measures.m_eps_family(grid, 0.2, k)),
    ]
    for beta in (1.0, 2.0, 4.0):
        seeds.append((f"von_mises({beta:g})", measures.von_mises(grid, beta)))
    seeds.append(("two_bump", measures.two_bump(grid)))
    return seeds


@dataclass
class StationaryConfig:
    damping: float = 0.5
    tol_fixed_point: float = 1e-10
    tol_pde: float = 1e-9
    max_outer: int = 5000
    max_hjb_inner: int = 500
    hjb_tol: float = 1e-12
    anderson_depth: int = 5
    outer_anderson_depth: int = 5
    seeds: list = None  # [(name, density)], defaults to default_seeds(grid)

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        for name in ("tol_fixed_point", "tol_pde", "hjb_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class StationarySolution:
    seed: str
    u: np.ndarray
    m: np.ndarray
    residual_hjb: float
    residual_fp: float
    residual_const: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)
    message: str = ""


def _density_distance(grid, m1, m2):
    if grid.dim == 1:
        return float(measures.wasserstein1_circle(grid, m1, m2))
    return float(grid.integrate(np.abs(m1 - m2)))


def distance_modulo_shift(grid, m1, m2):
    """Smallest distance between ``m1`` and translates of ``m2``.

    The best grid shift comes from the circular cross-correlation and is
    then refined over sub-cell translations of the trigonometric
    interpolant.  W1 in one dimension, the L1 distance in two.
    """
    corr = grid.ifft(np.conj(grid.fft(m1)) * grid.fft(m2))
    idx = np.unravel_index(np.argmax(corr), grid.shape)
    base = np.array([-(i if i <= grid.n // 2 else i - grid.n) * grid.h for i in idx])

    def dist(delta):
        return _density_distance(grid, m1, grid.translate(m2, base + delta))

    if grid.dim == 1:
        res = optimize.minimize_scalar(lambda d: dist(np.array([d])), bounds=(-grid.h, grid.h),
                                       method="bounded", options={"xatol": 1e-10})
        return float(min(res.fun, dist(np.zeros(1))))
    res = optimize.minimize(dist, np.zeros(2), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "initial_simplex": 0.5 * grid.h * np.array([[0, 0], [1, 0], [0, 1]])})
    return float(min(res.fun, dist(np.zeros(2))))


def solve_from_seed(grid, kernel, params, config: StationaryConfig, seed_name, m0):
    """Damped Picard iteration from one seed density."""
    m = measures.positive_part(grid, measures.validate_density(grid, m0, name=seed_name))
    delta = config.damping
    u = None
    history = []
    last_step, rising = np.inf, 0
    res = StationarityResidual(np.inf, np.inf, np.inf)
    mixer = AndersonMixer(config.outer_anderson_depth)
    for it in range(1, config.max_outer + 1):
        f = interaction_cost(grid, kernel, m)
        try:
            u = solve_stationary_hjb(grid, f, params, u_init=u, max_iter=config.max_hjb_inner,
                                     tol=config.hjb_tol, anderson_depth=config.anderson_depth)
        except ConvergenceError as exc:
            return StationarySolution(seed_name, u if u is not None else np.zeros(grid.shape), m,
                                      exc.residual, np.inf, np.inf, it, False, history, str(exc))
        g = gibbs_density(grid, u, params.nu)
        # (u, g) solves the Gibbs equation exactly; its HJB residual is the fixed-point error
        res = stationarity_residual(grid, u, g, kernel, params)
        damped = (1.0 - delta) * m + delta * g
        m_next = mixer.step(m.ravel(), damped.ravel()).reshape(grid.shape)
        m_next = measures.normalize(grid, np.maximum(m_next, measures.POSITIVITY_FLOOR))
        step = _density_distance(grid, m_next, m)
        history.append((it, step, res.r_hjb, res.r_fp, res.r_const))
        if step <= config.tol_fixed_point and res.r_hjb <= config.tol_pde and res.r_fp <= config.tol_pde:
            return StationarySolution(seed_name, u, g, res.r_hjb, res.r_fp, res.r_const, it, True, history)
        rising = rising + 1 if step > last_step else 0
        last_step = step
        if rising >= 3 and delta > MIN_DAMPING:
            delta = max(delta / 2.0, MIN_DAMPING)
            rising = 0
            mixer.reset()
            log.debug("seed %s: damping reduced to %g at iteration %d", seed_name, delta, it)
        m = m_next
    return StationarySolution(seed_name, u, g, res.r_hjb, res.r_fp, res.r_const, config.max_outer,
                              False, history, "maximum number of outer iterations reached")


def deduplicate(grid, solutions, tol=DEDUP_TOL):
    """Drop converged solutions within ``tol`` of an earlier one up to circular shift."""
    kept = []
    for sol in solutions:
        if sol.converged and any(
            k.converged and distance_modulo_shift(grid, k.m, sol.m) < tol for k in kept
        ):
            continue
        kept.append(sol)
    return kept


def _solve_task(args):
    return solve_from_seed(*args)


def solve_stationary_mfg(grid: TorusGrid, kernel: FourierKernel, params: ModelParams,
                         config: StationaryConfig = None, jobs=1):
    """Multi-start search for stationary equilibria.

    Returns one :class:`StationarySolution` per distinct converged solution,
    followed by any seeds that failed to converge (``converged=False``).
    """
    config = config or StationaryConfig()
    seeds = config.seeds if config.seeds is not None else default_seeds(grid)
    tasks = [(grid, kernel, params, config, name, m0) for name, m0 in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_task, tasks))
    else:
        results = [_solve_task(t) for t in tasks]
    for sol in results:
        if not sol.converged:
            log.warning("seed %s did not converge: %s", sol.seed, sol.message)
    converged = deduplicate(grid, [s for s in results if s.converged])
    return converged + [s for s in results if not s.converged]
