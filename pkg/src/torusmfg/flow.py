"""Time-dependent discounted MFG on a truncated horizon.

Backward HJB and forward Fokker-Planck marches use IMEX steps in Fourier
space: the stiff linear parts (discount and diffusion) are implicit, the
Hamiltonian and the transport flux are explicit.  Two schemes are
available, first-order Euler and the second-order BDF2 variant (default).  The coupled
system is solved by damped Picard iteration on the density flow.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import measures
from .coupling import FourierKernel, ModelParams, interaction_cost
from .errors import BlowUpError, ConfigError, DegenerateDensityError
from .grid import TorusGrid, write_field
from .stationary import StationaryConfig, solve_from_seed

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e6
CLIP_RECORD_LIMIT = 1e-8
CLIP_ERROR_LIMIT = 1e-6
INITIAL_SMOOTHING = 1e-4
MASS_TOL = 1e-6
TERMINAL_MODES = ("stationary", "zero")
SCHEMES = ("bdf2", "euler")


@dataclass(frozen=True)
class TimeMesh:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be > 0, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ConfigError(f"steps must be an integer >= 2, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def from_dt(cls, horizon, dt):
        return cls(horizon, int(round(horizon / dt)))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


def gradient_bound(kernel: FourierKernel, params: ModelParams) -> float:
    """A-priori bound ``(1/rho) sup |grad f| <= 2 sum |c_k| |k| / rho`` on ``|grad u|``."""
    total = sum(abs(c) * np.sqrt(sum(v * v for v in k)) for k, c in kernel.modes.items())
    return 2.0 * total / params.rho


def dt_cap(grid: TorusGrid, kernel: FourierKernel, params: ModelParams) -> float:
    """Largest admissible step: ``min(0.5/rho, 0.25 h / (1 + grad bound))``."""
    return min(0.5 / params.rho, 0.25 * grid.h / (1.0 + gradient_bound(kernel, params)))


def check_mesh(grid, kernel, params, mesh: TimeMesh):
    cap = dt_cap(grid, kernel, params)
    if mesh.dt > cap * (1 + 1e-12):
        raise ConfigError(f"dt = {mesh.dt:.3e} exceeds the stability cap {cap:.3e} for N={grid.n}")


@dataclass
class PicardOptions:
    damping: float = 0.5
    tol: float = 1e-12
    max_iter: int = 300

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ConfigError("Picard tolerance must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")


@dataclass
class FlowTrajectory:
    """Density and value flows on a time mesh.

    ``densities`` and ``values`` have shape ``(steps + 1,) + grid.shape``.
    ``step_history`` lists the Picard step size (sup over time of the
    distance between successive flows) per iteration.
    """

    grid: TorusGrid
    mesh: TimeMesh
    densities: np.ndarray
    values: np.ndarray
    converged: bool
    picard_iters: int
    step_history: list = field(default_factory=list)
    max_clipped_mass: float = 0.0

    @property
    def times(self):
        return self.mesh.times


class _Spectral:
    # thin wrappers picking the cheapest transform for the grid dimension
    def __init__(self, grid: TorusGrid):
        self.grid = grid
        n = grid.n
        if grid.dim == 1:
            self.fft = np.fft.rfft
            self.ifft = lambda a: np.fft.irfft(a, n)
        else:
            self.fft = np.fft.rfft2
            self.ifft = lambda a: np.fft.irfft2(a, (n, n))
        self.deriv = grid._derivative_multipliers

    def gradient(self, uh):
        return [self.ifft(d * uh) for d in self.deriv]


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def _hjb_march(grid, cost, params, u_terminal, mesh, scheme="bdf2"):
    """Backward march; returns ``(U, grad U)`` with grad as a list per axis."""
    _check_scheme(scheme)
    sp = _Spectral(grid)
    dt = mesh.dt
    stiff = dt * (params.rho + params.nu * grid.k_squared)
    div1 = 1.0 / (1.0 + stiff)
    div2 = 1.0 / (1.5 + stiff)
    cost_hat = np.fft.rfftn(cost, axes=grid._axes)
    uh_all = np.full((mesh.steps + 1,) + cost_hat.shape[1:], np.nan, dtype=complex)
    uh = sp.fft(u_terminal)
    uh_all[-1] = uh
    ham_prev = None
    for i in range(mesh.steps - 1, -1, -1):
        grads = sp.gradient(uh)
        h2 = grads[0] * grads[0]
        for g in grads[1:]:
            h2 += g * g
        ham = sp.fft(h2)
        if scheme == "euler" or ham_prev is None:
            uh = (uh + dt * (cost_hat[i] - 0.5 * ham)) * div1
        else:
            extrap = 2.0 * ham - ham_prev
            uh = (2.0 * uh_all[i + 1] - 0.5 * uh_all[i + 2] + dt * (cost_hat[i] - 0.5 * extrap)) * div2
        ham_prev = ham
        uh_all[i] = uh
        if i % 256 == 0 and not np.all(np.isfinite(uh)):
            break
    values = np.fft.irfftn(uh_all, s=grid.shape, axes=grid._axes)
    with np.errstate(invalid="ignore"):
        sup = np.nan_to_num(np.abs(values).reshape(len(values), -1).max(axis=1), nan=np.inf)
    if np.any(sup > BLOWUP_LIMIT):
        step = int(np.nonzero(sup > BLOWUP_LIMIT)[0].max())
        raise BlowUpError(f"HJB march blew up at time step {step} (|u| > {BLOWUP_LIMIT:g})", step)
    grads = [np.fft.irfftn(d * uh_all, s=grid.shape, axes=grid._axes) for d in sp.deriv]
    return values, grads


def solve_hjb_backward(grid: TorusGrid, flow, kernel: FourierKernel, params: ModelParams,
                       u_terminal, mesh: TimeMesh, scheme="bdf2"):
    """Value function along a prescribed density flow.

    The discount and diffusion are implicit, the Hamiltonian explicit, and
    the cost is taken at the new time level.  With ``scheme="euler"`` each
    step solves

        (1 + dt (rho + nu |k|^2)) u_i = u_{i+1} + dt (f_i - 1/2 |grad u_{i+1}|^2)

    in Fourier space.  ``scheme="bdf2"`` (default) is the second-order
    variant

        (3/2 + dt (rho + nu |k|^2)) u_i = 2 u_{i+1} - 1/2 u_{i+2}
                                          + dt (f_i - 1/2 H*),

    with ``H* = 2 |grad u_{i+1}|^2 - |grad u_{i+2}|^2`` and one Euler step
    to start.

    Raises
    ------
    BlowUpError
        If ``|u|`` exceeds ``1e6`` anywhere; the error names the step.
    """
    flow = grid.check(flow, "density flow")
    if flow.shape[0] != mesh.steps + 1:
        raise ConfigError(f"flow has {flow.shape[0]} time slices, mesh needs {mesh.steps + 1}")
    u_terminal = grid.check(u_terminal, "terminal value")
    cost = interaction_cost(grid, kernel, flow)
    values, _ = _hjb_march(grid, cost, params, u_terminal, mesh, scheme)
    return values


def _fp_march(grid, grads, m0, params, mesh, scheme="bdf2"):
    _check_scheme(scheme)
    sp = _Spectral(grid)
    dt = mesh.dt
    stiff = dt * params.nu * grid.k_squared
    div1 = 1.0 / (1.0 + stiff)
    div2 = 1.0 / (1.5 + stiff)
    out = np.empty((mesh.steps + 1,) + grid.shape)
    out[0] = m0
    m, m_prev = m0, None
    mh, mh_prev = sp.fft(m0), None
    floor = measures.POSITIVITY_FLOOR
    worst = 0.0
    for i in range(mesh.steps):
        if scheme == "euler" or m_prev is None:
            carrier, level, base, div = m, i, mh, div1
        else:
            carrier, level, base, div = 2.0 * m - m_prev, i + 1, 2.0 * mh - 0.5 * mh_prev, div2
        flux = sp.deriv[0] * sp.fft(carrier * grads[0][level])
        for d, g in zip(sp.deriv[1:], grads[1:]):
            flux += d * sp.fft(carrier * g[level])
        m_prev, mh_prev = m, mh
        mh = (base + dt * flux) * div
        m = sp.ifft(mh)
        if m.min() < floor:
            deficit = floor - m
            clipped = float(grid.cell_volume * deficit[deficit > 0].sum())
            worst = max(worst, clipped)
            if clipped > CLIP_ERROR_LIMIT:
                raise DegenerateDensityError(
                    f"Fokker-Planck step {i + 1} clipped mass {clipped:.2e} > {CLIP_ERROR_LIMIT:g}; "
                    "refine the grid or the time step"
                )
            m = measures.normalize(grid, np.maximum(m, floor))
            mh = sp.fft(m)
        out[i + 1] = m
    if worst > CLIP_RECORD_LIMIT:
        log.warning("Fokker-Planck clipping removed up to %.2e mass in one step", worst)
    return out, worst


def solve_fp_forward(grid: TorusGrid, values, m0, params: ModelParams, mesh: TimeMesh, scheme="bdf2"):
    """Density flow driven by the drift ``-grad u``.

    Diffusion is implicit and the transport flux ``div(m grad u)`` explicit
    in divergence form, so mass is conserved to rounding.  ``scheme="euler"``:

        (1 + dt nu |k|^2) m_{i+1} = m_i + dt div(m_i grad u_i);

    ``scheme="bdf2"`` (default):

        (3/2 + dt nu |k|^2) m_{i+1} = 2 m_i - 1/2 m_{i-1}
                                      + dt div((2 m_i - m_{i-1}) grad u_{i+1}),

    started by one Euler step.  Negative undershoots are clipped at the
    positivity floor and renormalised.

    Raises
    ------
    DegenerateDensityError
        If a single step clips more than ``1e-6`` of mass.
    """
    values = grid.check(values, "value flow")
    if values.shape[0] != mesh.steps + 1:
        raise ConfigError(f"value flow has {values.shape[0]} time slices, mesh needs {mesh.steps + 1}")
    m0 = measures.validate_density(grid, m0, name="m0")
    grads = [grid.partial(values, j) for j in range(grid.dim)]
    densities, _ = _fp_march(grid, grads, m0, params, mesh, scheme)
    return densities


def _flow_distance(grid, a, b):
    if grid.dim == 1:
        return float(np.max(measures.wasserstein1_circle(grid, a, b, upsample=1)))
    return float(np.max(grid.integrate(np.abs(a - b))))


def prepare_initial_density(grid, m0):
    """Validate ``m0`` (mass within 1e-6, no negative nodes) and mollify it."""
    m0 = grid.check(m0, "m0")
    if m0.shape != grid.shape:
        raise DegenerateDensityError(f"m0 must have shape {grid.shape}")
    if np.any(m0 < 0):
        raise DegenerateDensityError("m0 has negative nodes")
    mass = float(grid.integrate(m0))
    if abs(mass - 1.0) > MASS_TOL:
        raise DegenerateDensityError(f"m0 has mass {mass:.9f}, expected 1 within {MASS_TOL:g}")
    smooth = grid.heat_evolve(m0, INITIAL_SMOOTHING)
    return measures.normalize(grid, np.maximum(smooth, measures.POSITIVITY_FLOOR))


def _terminal_value(grid, kernel, params, m_T, mode, stationary_config, previous):
    if mode == "zero":
        return np.zeros(grid.shape)
    sol = solve_from_seed(grid, kernel, params, stationary_config, "terminal", m_T)
    if not sol.converged:
        log.warning("terminal stationary solve did not converge (%s); keeping previous terminal value",
                    sol.message)
        return previous if previous is not None else sol.u
    return sol.u


def solve_mfg(grid: TorusGrid, kernel: FourierKernel, params: ModelParams, m0, mesh: TimeMesh,
              picard: PicardOptions = None, terminal_mode="stationary",
              stationary_config: StationaryConfig = None, scheme="bdf2") -> FlowTrajectory:
    """Damped forward-backward Picard iteration.

    Starting from the heat flow of ``m0``, each iteration computes
    ``u = HJB(mu^n)``, ``mu_raw = FP(u, m0)`` and
    ``mu^{n+1} = (1 - damping) mu^n + damping mu_raw``, stopping when
    ``sup_i dist(mu^{n+1}_i, mu^n_i) <= tol`` (W1 in 1-D, L1 in 2-D).

    The terminal value is the stationary solution seeded at ``mu^n_T``
    (``terminal_mode="stationary"``) or zero.  The returned densities are
    the last ``mu_raw``, so they satisfy the discrete Fokker-Planck
    equation with the returned values exactly.  When ``max_iter`` runs out
    the last iterate is returned with ``converged=False``.
    """
    picard = picard or PicardOptions()
    _check_scheme(scheme)
    if terminal_mode not in TERMINAL_MODES:
        raise ConfigError(f"terminal_mode must be one of {TERMINAL_MODES}, got {terminal_mode!r}")
    check_mesh(grid, kernel, params, mesh)
    stationary_config = stationary_config or StationaryConfig()
    m0 = prepare_initial_density(grid, m0)

    times = mesh.times
    decay = np.exp(-params.nu * np.multiply.outer(times, grid.k_squared))
    flow = np.fft.irfftn(grid.fft(m0) * decay, s=grid.shape, axes=grid._axes)
    flow[0] = m0

    delta = picard.damping
    history = []
    u_T = None
    raw, values, worst = flow, None, 0.0
    converged = False
    it = 0
    for it in range(1, picard.max_iter + 1):
        u_T = _terminal_value(grid, kernel, params, flow[-1], terminal_mode, stationary_config, u_T)
        cost = interaction_cost(grid, kernel, flow)
        values, grads = _hjb_march(grid, cost, params, u_T, mesh, scheme)
        raw, clipped = _fp_march(grid, grads, m0, params, mesh, scheme)
        worst = max(worst, clipped)
        step = delta * _flow_distance(grid, raw, flow)
        history.append(step)
        log.debug("Picard iteration %d: step %.3e", it, step)
        if step <= picard.tol:
            converged = True
            break
        flow *= 1.0 - delta
        flow += delta * raw
    if not converged:
        log.warning("Picard iteration stopped after %d iterations (step %.3e)", it, history[-1])
    return FlowTrajectory(grid, mesh, raw, values, converged, it, history, worst)


def export_trajectory(traj: FlowTrajectory, directory, kernel: FourierKernel = None,
                      params: ModelParams = None, stride=None, max_frames=201):
    """Write ``mesh.json``, strided ``u_%04d.tgf`` / ``m_%04d.tgf`` files and
    ``trajectory.csv`` (one row per time step)."""
    grid = traj.grid
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n_times = traj.mesh.steps + 1
    if stride is None:
        stride = max(1, -(-(n_times - 1) // (max_frames - 1)))
    frames = list(range(0, n_times, stride))
    if frames[-1] != n_times - 1:
        frames.append(n_times - 1)
    for j, i in enumerate(frames):
        write_field(out / f"u_{j:04d}.tgf", grid, traj.values[i])
        write_field(out / f"m_{j:04d}.tgf", grid, traj.densities[i])
    meta = {
        "schema": 1,
        "dim": grid.dim,
        "n": grid.n,
        "horizon": traj.mesh.horizon,
        "steps": traj.mesh.steps,
        "dt": traj.mesh.dt,
        "converged": traj.converged,
        "picard_iters": traj.picard_iters,
        "frames": [{"index": j, "step": i, "t": float(traj.times[i])} for j, i in enumerate(frames)],
    }
    if kernel is not None:
        meta["kernel"] = kernel.to_dict()
    if params is not None:
        meta["params"] = {"rho": params.rho, "nu": params.nu}
    (out / "mesh.json").write_text(json.dumps(meta, indent=2) + "\n")

    m = traj.densities
    k1 = (1,) + (0,) * (grid.dim - 1)
    columns = {
        "t": traj.times,
        "mass": grid.integrate(m),
        "q1": measures.moment_ab(grid, m, k1)[0] ** 2 + measures.moment_ab(grid, m, k1)[1] ** 2,
        "entropy": measures.entropy(grid, m),
        "u_min": traj.values.reshape(n_times, -1).min(axis=1),
        "u_max": traj.values.reshape(n_times, -1).max(axis=1),
    }
    if grid.dim == 1:
        columns["w1_uniform"] = measures.wasserstein1_circle(
            grid, m, measures.uniform_density(grid), upsample=1)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(columns))
        for row in zip(*columns.values()):
            writer.writerow([repr(float(v)) for v in row])
    return out
