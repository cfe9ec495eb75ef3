"""Lyapunov, shift-bound and flattening diagnostics along a trajectory."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import measures
from .coupling import FourierKernel, ModelParams, interaction_cost, kernel_moments, potential_energy
from .errors import DegenerateDensityError, GridError
from .flow import FlowTrajectory

RESIDUAL_FLOOR = 1e-6
SHIFT_SLACK = 1e-6
GRADIENT_SLACK = 1e-6


def _safe_log(m):
    return np.log(np.maximum(m, measures.POSITIVITY_FLOOR))


def q_field(grid, u, m, nu):
    """``q = u + nu log m``."""
    m = grid.check(m, "density")
    if np.any(m <= 0):
        raise DegenerateDensityError("q_field needs a strictly positive density")
    return grid.check(u, "u") + nu * np.log(m)


def q_energy(grid, u, m, nu):
    """``Q = integral |grad q|^2 m``; batched over leading axes."""
    m = grid.check(m, "density")
    u = grid.check(u, "u")
    # the spatial mean of u does not enter Q; removing it keeps a large gauge
    # constant out of the transforms
    u = u - u.mean(axis=tuple(range(-grid.dim, 0)), keepdims=True)
    q = u + nu * _safe_log(m)
    return grid.integrate(grid.grad_norm2(q) * m)


@dataclass(frozen=True)
class DiagnosticsRow:
    t: float
    ent: float
    fisher: float
    pot: float
    phi: float
    qen: float
    lyap: float
    lyap_residual_abs: float
    lyap_residual_rel: float
    advisory: bool = False


CSV_COLUMNS = ("t", "ent", "fisher", "pot", "phi", "qen", "lyap", "lyap_residual_abs", "lyap_residual_rel")


def lyapunov_series(traj: FlowTrajectory, kernel: FourierKernel, params: ModelParams):
    """Per-time arrays ``ent, fisher, pot, phi, qen, lyap`` over the whole mesh."""
    grid = traj.grid
    m, u = traj.densities, traj.values
    ent = measures.entropy(grid, m)
    fisher = measures.fisher_information(grid, m)
    pot = np.broadcast_to(potential_energy(grid, kernel, m), ent.shape)
    phi = params.rho * params.nu * ent + 0.5 * params.nu**2 * fisher + pot
    qen = q_energy(grid, u, m, params.nu)
    lyap = phi - 0.5 * qen
    return {"ent": ent, "fisher": fisher, "pot": pot, "phi": phi, "qen": qen, "lyap": lyap}


def lyapunov_increment(grid, kernel: FourierKernel, params: ModelParams, m_a, m_b, qen_a, qen_b):
    """``L(b) - L(a)`` evaluated without subtracting two O(1) numbers.

    Entropy, Fisher and potential differences are expanded in
    ``delta = m_b - m_a`` (``log1p`` for the entropy), so the rounding error
    scales with ``|delta|`` instead of ``|L|``.  Both densities carry unit
    mass, so the entropy's linear term is taken against a mean-free weight:
    rounding drift in the mass of ``delta`` would otherwise leak in at
    ``O(eps * log m)``.  Batched over leading axes.
    """
    m_a = measures.positive_part(grid, m_a)
    m_b = measures.positive_part(grid, m_b)
    delta = m_b - m_a
    spatial = tuple(range(-grid.dim, 0))
    weight = np.log(m_a)
    weight = weight - weight.mean(axis=spatial, keepdims=True)
    r = delta / m_a
    d_ent = grid.integrate(delta * weight + m_a * ((1.0 + r) * np.log1p(r) - r))
    g_a = grid.gradient(m_a)
    g_d = grid.gradient(delta)
    cross = np.sum(g_d * (2.0 * g_a + g_d), axis=-grid.dim - 1)
    d_fisher = grid.integrate((cross * m_a - np.sum(g_a * g_a, axis=-grid.dim - 1) * delta) / (m_a * m_b))
    mom_a = kernel_moments(grid, kernel, m_a)
    mom_d = kernel_moments(grid, kernel, delta)
    coeffs = np.array([c for _, c in kernel._resolved(grid)])
    d_pot = np.sum(np.sum(mom_d * (2.0 * mom_a + mom_d), axis=-1) * coeffs, axis=-1) if coeffs.size else 0.0
    d_phi = params.rho * params.nu * d_ent + 0.5 * params.nu**2 * d_fisher + d_pot
    return d_phi - 0.5 * (np.asarray(qen_b) - np.asarray(qen_a))


def diagnose(traj: FlowTrajectory, kernel: FourierKernel, params: ModelParams):
    """Rows at interior times with the centred residual ``|dL/dt + rho Q|``.

    The centred difference of ``L`` comes from :func:`lyapunov_increment`.
    The relative residual divides by ``max(rho Q, 1e-6)``.  Rows of an
    unconverged trajectory are marked ``advisory``.
    """
    s = lyapunov_series(traj, kernel, params)
    dt = traj.mesh.dt
    lyap, qen = s["lyap"], s["qen"]
    m = traj.densities
    rate = lyapunov_increment(traj.grid, kernel, params, m[:-2], m[2:], qen[:-2], qen[2:]) / (2.0 * dt)
    res = np.abs(rate + params.rho * qen[1:-1])
    rel = res / np.maximum(params.rho * qen[1:-1], RESIDUAL_FLOOR)
    times = traj.times
    advisory = not traj.converged
    return [
        DiagnosticsRow(float(times[i]), float(s["ent"][i]), float(s["fisher"][i]), float(s["pot"][i]),
                       float(s["phi"][i]), float(qen[i]), float(lyap[i]), float(res[i - 1]),
                       float(rel[i - 1]), advisory)
        for i in range(1, len(times) - 1)
    ]


class LyapunovSummary(NamedTuple):
    max_relative_residual: float
    max_increase: float
    band: tuple


def lyapunov_summary(rows, t_min, t_max) -> LyapunovSummary:
    """Largest relative residual on ``[t_min, t_max]`` and the largest step-to-step
    increase of the Lyapunov functional over all rows."""
    in_band = [r.lyap_residual_rel for r in rows if t_min <= r.t <= t_max]
    lyap = np.array([r.lyap for r in rows])
    increase = float(np.max(np.diff(lyap))) if len(lyap) > 1 else 0.0
    return LyapunovSummary(max(in_band) if in_band else 0.0, increase, (t_min, t_max))


class ShiftBound(NamedTuple):
    s: float
    t: float
    lhs: float
    rhs: float
    passes: bool


def _trapezoid_cumulative(values, dt):
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * (values[1:] + values[:-1])) * dt
    return out


def shift_bound_check(traj: FlowTrajectory, s: int, t: int, qen=None, params: ModelParams = None) -> ShiftBound:
    """``W1(mu_s, mu_t) <= sqrt(t - s) * sqrt(int_s^t Q)`` for time indices ``s <= t``.

    ``qen`` is the per-step ``Q`` series; when omitted it is recomputed and
    ``params`` must be given.
    """
    return shift_bound_lattice(traj, [(s, t)], qen=qen, params=params)[0]


def shift_bound_lattice(traj: FlowTrajectory, pairs, qen=None, params: ModelParams = None):
    grid = traj.grid
    if grid.dim != 1:
        raise GridError("the shift bound uses the circular W1 distance and needs d = 1")
    if qen is None:
        if params is None:
            raise ValueError("pass either the Q series or the model parameters")
        qen = q_energy(grid, traj.values, traj.densities, params.nu)
    cum = _trapezoid_cumulative(np.asarray(qen, dtype=float), traj.mesh.dt)
    times = traj.times
    pairs = [(int(a), int(b)) for a, b in pairs]
    for a, b in pairs:
        if not 0 <= a <= b < len(times):
            raise IndexError(f"need 0 <= s <= t < {len(times)}, got ({a}, {b})")
    s_idx = np.array([a for a, _ in pairs])
    t_idx = np.array([b for _, b in pairs])
    lhs = measures.wasserstein1_circle(grid, traj.densities[s_idx], traj.densities[t_idx])
    span = times[t_idx] - times[s_idx]
    rhs = np.sqrt(span) * np.sqrt(np.maximum(cum[t_idx] - cum[s_idx], 0.0))
    return [
        ShiftBound(float(times[a]), float(times[b]), float(l), float(r), bool(l <= r + SHIFT_SLACK))
        for (a, b), l, r in zip(pairs, np.atleast_1d(lhs), rhs)
    ]


def index_lattice(traj: FlowTrajectory, points=40):
    """``points`` roughly equispaced time indices and all ordered pairs of them."""
    idx = np.unique(np.round(np.linspace(0, traj.mesh.steps, points)).astype(int))
    return [(int(a), int(b)) for j, a in enumerate(idx) for b in idx[j:]]


class FlatteningRow(NamedTuple):
    t: float
    window: float
    sup_w1: float


def flattening_report(traj: FlowTrajectory, windows, stride=None):
    """``sup_{0 <= s <= T_w} W1(mu_t, mu_{t+s})`` for each window ``T_w``.

    ``t`` runs over every ``stride``-th step with ``t + T_w <= T`` and ``s``
    over the same stride (default: about 200 start times).
    """
    grid = traj.grid
    if grid.dim != 1:
        raise GridError("flattening_report uses the circular W1 distance and needs d = 1")
    steps = traj.mesh.steps
    stride = stride or max(1, steps // 200)
    dt = traj.mesh.dt
    rows = []
    for window in np.atleast_1d(windows):
        w = int(round(window / dt))
        if w < 0 or w > steps:
            raise ValueError(f"window {window} is outside [0, T]")
        offsets = np.arange(0, w + 1, stride)
        if offsets[-1] != w:
            offsets = np.append(offsets, w)
        for i in range(0, steps - w + 1, stride):
            dist = measures.wasserstein1_circle(grid, traj.densities[i], traj.densities[i + offsets], upsample=1)
            rows.append(FlatteningRow(float(traj.times[i]), float(window), float(np.max(dist))))
    return rows


class BoundCheck(NamedTuple):
    lhs: float
    rhs: float
    passes: bool


def gradient_bound_check(traj: FlowTrajectory, kernel: FourierKernel, params: ModelParams) -> BoundCheck:
    """``max_t |grad u|_inf <= (1/rho) max_t |grad f(., mu_t)|_inf + 1e-6``."""
    grid = traj.grid
    grad_u = np.sqrt(grid.grad_norm2(traj.values))
    grad_f = np.sqrt(grid.grad_norm2(interaction_cost(grid, kernel, traj.densities)))
    lhs = float(grad_u.max())
    rhs = float(grad_f.max()) / params.rho
    return BoundCheck(lhs, rhs, lhs <= rhs + GRADIENT_SLACK)


def potential_infimum_bound(kernel: FourierKernel) -> float:
    """Lower bound ``c0 - sum (c_k)_-`` for the potential, using ``0 <= q_k <= 1``."""
    return kernel.c0 - sum(max(-c, 0.0) for c in kernel.modes.values())


def lyapunov_lower_bound_check(traj, rows, kernel, params) -> BoundCheck:
    """``min L >= inf F - c - rho nu (2 pi)^d`` with ``c = 1/2 |grad u|^2_inf + nu |Lap u|_inf``
    taken from the observed maxima along the trajectory."""
    grid = traj.grid
    c = 0.5 * float(grid.grad_norm2(traj.values).max()) + params.nu * float(np.abs(grid.laplacian(traj.values)).max())
    rhs = potential_infimum_bound(kernel) - c - params.rho * params.nu * grid.volume
    lhs = min(r.lyap for r in rows)
    return BoundCheck(lhs, rhs, lhs >= rhs)


def write_diagnostics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([repr(getattr(r, name)) for name in CSV_COLUMNS])


def write_shift_bound_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("s", "t", "lhs", "rhs", "pass"))
        for r in records:
            writer.writerow((repr(r.s), repr(r.t), repr(r.lhs), repr(r.rhs), int(r.passes)))

