import json
import math

import numpy as np
import pytest
from scipy import linalg

from torusmfg import measures
from torusmfg.coupling import FourierKernel, ModelParams, interaction_cost
from torusmfg.errors import BlowUpError, ConfigError, DegenerateDensityError
from torusmfg.flow import (
    INITIAL_SMOOTHING,
    PicardOptions,
    TimeMesh,
    check_mesh,
    dt_cap,
    export_trajectory,
    gradient_bound,
    prepare_initial_density,
    solve_fp_forward,
    solve_hjb_backward,
    solve_mfg,
)
from torusmfg.grid import TorusGrid, read_field

UNIT = ModelParams(1.0, 1.0)


def dense_derivatives(n):
    """Periodic sinc differentiation matrices on ``n`` equispaced nodes of [0, 2 pi).

    First derivative with the odd Nyquist term dropped, second derivative
    with the full ``-(n/2)^2`` Nyquist multiplier.
    """
    h = 2 * np.pi / n
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    sign = np.where(diff % 2 == 0, 1.0, -1.0)
    off = diff != 0
    half = np.where(off, diff * h / 2, 1.0)
    d1 = np.where(off, 0.5 * sign / np.tan(half), 0.0)
    d2 = np.where(off, -0.5 * sign / np.sin(half) ** 2, -np.pi**2 / (3 * h**2) - 1.0 / 6.0)
    return d1, d2


def dense_hjb(cost, u_terminal, params, dt, scheme):
    n = cost.shape[-1]
    d1, d2 = dense_derivatives(n)
    eye = np.eye(n)
    lu1 = linalg.lu_factor((1 + dt * params.rho) * eye - dt * params.nu * d2)
    lu2 = linalg.lu_factor((1.5 + dt * params.rho) * eye - dt * params.nu * d2)
    steps = cost.shape[0] - 1
    u = np.empty_like(cost)
    u[-1] = u_terminal
    ham = {}
    for i in range(steps - 1, -1, -1):
        ham[i + 1] = (d1 @ u[i + 1]) ** 2
        if scheme == "euler" or i == steps - 1:
            u[i] = linalg.lu_solve(lu1, u[i + 1] + dt * (cost[i] - 0.5 * ham[i + 1]))
        else:
            extrap = 2 * ham[i + 1] - ham[i + 2]
            u[i] = linalg.lu_solve(lu2, 2 * u[i + 1] - 0.5 * u[i + 2] + dt * (cost[i] - 0.5 * extrap))
    return u


def dense_fp(values, m0, params, dt, scheme):
    n = m0.size
    d1, d2 = dense_derivatives(n)
    eye = np.eye(n)
    lu1 = linalg.lu_factor(eye - dt * params.nu * d2)
    lu2 = linalg.lu_factor(1.5 * eye - dt * params.nu * d2)
    m = np.empty_like(values)
    m[0] = m0
    for i in range(values.shape[0] - 1):
        if scheme == "euler" or i == 0:
            m[i + 1] = linalg.lu_solve(lu1, m[i] + dt * d1 @ (m[i] * (d1 @ values[i])))
        else:
            carrier = 2 * m[i] - m[i - 1]
            rhs = 2 * m[i] - 0.5 * m[i - 1] + dt * d1 @ (carrier * (d1 @ values[i + 1]))
            m[i + 1] = linalg.lu_solve(lu2, rhs)
    return m


def test_dense_matrices_match_spectral_operators():
    g = TorusGrid(1, 32)
    d1, d2 = dense_derivatives(32)
    f = np.exp(np.sin(g.coords)) + np.cos(16 * g.coords)
    assert np.max(np.abs(d1 @ f - g.gradient(f)[0])) < 1e-11
    assert np.max(np.abs(d2 @ f - g.laplacian(f))) < 1e-9


def test_time_mesh():
    mesh = TimeMesh(2.0, 8)
    assert mesh.dt == 0.25 and mesh.times[-1] == 2.0 and len(mesh.times) == 9
    assert TimeMesh.from_dt(20.0, 1e-3).steps == 20000
    for bad in [(0.0, 10), (1.0, 1), (1.0, 2.5)]:
        with pytest.raises(ConfigError):
            TimeMesh(*bad)


def test_stability_cap():
    g = TorusGrid(1, 128)
    ker = FourierKernel.kuramoto(2.0)
    assert gradient_bound(ker, UNIT) == pytest.approx(2.0)
    assert dt_cap(g, ker, UNIT) == pytest.approx(0.25 * g.h / 3.0)
    check_mesh(g, ker, UNIT, TimeMesh.from_dt(20.0, 1e-3))
    with pytest.raises(ConfigError, match="stability cap"):
        check_mesh(g, ker, UNIT, TimeMesh(20.0, 100))


def test_hjb_zero_kernel_zero_terminal():
    g = TorusGrid(1, 32)
    mesh = TimeMesh(1.0, 100)
    flow = np.broadcast_to(measures.m_eps_family(g, 0.2, 1), (101, 32))
    u = solve_hjb_backward(g, flow, FourierKernel(), UNIT, np.zeros(32), mesh)
    assert np.max(np.abs(u)) == 0.0


@pytest.mark.parametrize("scheme", ["bdf2", "euler"])
def test_hjb_constant_fixed_point(scheme):
    g = TorusGrid(1, 32)
    kappa = 2.7
    mesh = TimeMesh(2.0, 200)
    flow = np.broadcast_to(measures.uniform_density(g), (201, 32))
    u = solve_hjb_backward(g, flow, FourierKernel.kuramoto(kappa), UNIT, np.full(32, kappa), mesh, scheme)
    assert np.max(np.abs(u - kappa)) < 1e-12


@pytest.mark.parametrize("scheme", ["bdf2", "euler"])
def test_hjb_matches_dense_implicit_solve(scheme):
    g = TorusGrid(1, 32)
    kappa, eps = 2.0, 0.1
    ker = FourierKernel.kuramoto(kappa)
    mesh = TimeMesh.from_dt(10.0, 0.01)
    check_mesh(g, ker, UNIT, mesh)
    m = measures.m_eps_family(g, eps, 1)
    flow = np.broadcast_to(m, (mesh.steps + 1, 32))
    u = solve_hjb_backward(g, flow, ker, UNIT, np.zeros(32), mesh, scheme)
    cost = np.broadcast_to(kappa * (1 - eps * np.cos(g.coords)), flow.shape)
    ref = dense_hjb(cost, np.zeros(32), UNIT, mesh.dt, scheme)
    assert np.max(np.abs(u - ref)) <= 1e-8


def test_hjb_blowup_names_step():
    g = TorusGrid(1, 16)
    mesh = TimeMesh(1.0, 10)
    flow = np.broadcast_to(measures.uniform_density(g), (11, 16))
    with pytest.raises(BlowUpError) as info:
        solve_hjb_backward(g, flow, FourierKernel(), UNIT, np.full(16, 1e7), mesh)
    assert info.value.step == 10


@pytest.mark.parametrize("scheme", ["bdf2", "euler"])
def test_fp_matches_dense_implicit_solve(scheme):
    g = TorusGrid(1, 32)
    mesh = TimeMesh(0.5, 100)
    values = np.broadcast_to(np.cos(g.coords), (101, 32))
    m0 = measures.von_mises(g, 1.5, 0.4)
    m = solve_fp_forward(g, values, m0, UNIT, mesh, scheme)
    ref = dense_fp(np.asarray(values), m0, UNIT, mesh.dt, scheme)
    assert np.max(np.abs(m - ref)) <= 1e-8
    assert np.max(np.abs(g.integrate(m) - 1)) <= 1e-12


def test_fp_constant_value_is_heat_flow():
    g = TorusGrid(1, 64)
    mesh = TimeMesh(1.0, 4000)
    m0 = measures.m_eps_family(g, 0.2, 1)
    m = solve_fp_forward(g, np.full((4001, 64), 3.0), m0, ModelParams(1.0, 0.7), mesh)
    exact = np.stack([g.heat_evolve(m0, 0.7 * t) for t in mesh.times])
    assert np.max(np.abs(m - exact)) <= 1e-8


def test_fp_uniform_stays_uniform():
    g = TorusGrid(2, 16)
    mesh = TimeMesh(1.0, 50)
    m = solve_fp_forward(g, np.zeros((51, 16, 16)), measures.uniform_density(g), UNIT, mesh)
    assert np.max(np.abs(m - 1 / (2 * np.pi) ** 2)) < 1e-15


def test_fp_rejects_heavy_clipping():
    g = TorusGrid(1, 32)
    mesh = TimeMesh(1.0, 10)
    values = np.broadcast_to(40 * np.cos(3 * g.coords), (11, 32))
    with pytest.raises(DegenerateDensityError, match="clipped"):
        solve_fp_forward(g, values, measures.von_mises(g, 4.0), ModelParams(1.0, 0.01), mesh)


def test_initial_density_validation():
    g = TorusGrid(1, 32)
    m = measures.uniform_density(g)
    with pytest.raises(DegenerateDensityError):
        prepare_initial_density(g, 1.01 * m)
    bad = m.copy()
    bad[0] = -1e-9
    with pytest.raises(DegenerateDensityError):
        prepare_initial_density(g, bad)
    m0 = measures.von_mises(g, 2.0)
    assert np.max(np.abs(prepare_initial_density(g, m0) - g.heat_evolve(m0, INITIAL_SMOOTHING))) < 1e-15


def test_mfg_from_uniform_stays_uniform():
    g = TorusGrid(1, 64)
    ker = FourierKernel(0.3, {(1,): -1.0, (2,): 0.5})
    traj = solve_mfg(g, ker, UNIT, measures.uniform_density(g), TimeMesh.from_dt(4.0, 4e-3))
    assert traj.converged
    w1 = measures.wasserstein1_circle(g, traj.densities, measures.uniform_density(g))
    assert np.max(w1) <= 1e-10
    assert np.max(np.ptp(traj.values, axis=1)) < 1e-12


def test_mfg_zero_kernel_is_heat_flow():
    g = TorusGrid(1, 128)
    mesh = TimeMesh(2.0, 2000)
    m0 = measures.m_eps_family(g, 0.2, 1)
    traj = solve_mfg(g, FourierKernel(), UNIT, m0, mesh, terminal_mode="zero")
    assert traj.converged
    # the solver mollifies m0 by a heat step of length INITIAL_SMOOTHING
    exact = np.stack([g.heat_evolve(m0, t + INITIAL_SMOOTHING) for t in mesh.times])
    assert np.max(np.abs(traj.densities - exact)) <= 1e-7


def test_mfg_two_dimensional_runs():
    g = TorusGrid(2, 16)
    ker = FourierKernel.kuramoto(2.0, dim=2)
    mesh = TimeMesh(2.0, 200)
    traj = solve_mfg(g, ker, UNIT, measures.von_mises(g, 1.0), mesh, terminal_mode="zero")
    assert traj.converged
    assert np.max(np.abs(g.integrate(traj.densities) - 1)) <= 1e-10


def test_mfg_unconverged_returns_history():
    g = TorusGrid(1, 64)
    traj = solve_mfg(g, FourierKernel.kuramoto(2.0), UNIT, measures.von_mises(g, 2.0), TimeMesh.from_dt(4.0, 4e-3),
                     picard=PicardOptions(max_iter=2))
    assert not traj.converged and traj.picard_iters == 2 and len(traj.step_history) == 2


def test_mfg_rejects_bad_options():
    g = TorusGrid(1, 32)
    m0 = measures.uniform_density(g)
    with pytest.raises(ConfigError):
        solve_mfg(g, FourierKernel(), UNIT, m0, TimeMesh(1.0, 100), terminal_mode="free")
    with pytest.raises(ConfigError):
        solve_mfg(g, FourierKernel(), UNIT, m0, TimeMesh(1.0, 100), scheme="rk4")
    with pytest.raises(ConfigError):
        PicardOptions(damping=1.5)


def test_terminal_truncation_insensitivity():
    g = TorusGrid(1, 64)
    ker = FourierKernel.kuramoto(2.0)
    horizon = 10.0
    mesh = TimeMesh.from_dt(horizon, 5e-3)
    m0 = measures.von_mises(g, 2.0)
    a = solve_mfg(g, ker, UNIT, m0, mesh, terminal_mode="stationary")
    b = solve_mfg(g, ker, UNIT, m0, mesh, terminal_mode="zero")
    half = mesh.times <= horizon / 2
    change = np.max(measures.wasserstein1_circle(g, a.densities[half], b.densities[half]))
    assert change <= 10 * math.exp(-UNIT.rho * horizon / 2)


def test_flow_mass_and_gradient_bound():
    g = TorusGrid(1, 64)
    ker = FourierKernel(0.0, {(1,): -1.5, (2,): 0.6})
    traj = solve_mfg(g, ker, UNIT, measures.two_bump(g), TimeMesh.from_dt(5.0, 2.5e-3))
    assert traj.converged
    assert np.max(np.abs(g.integrate(traj.densities) - 1)) <= 1e-10
    grad_u = np.max(np.abs(g.gradient(traj.values)))
    grad_f = np.max(np.abs(g.gradient(interaction_cost(g, ker, traj.densities))))
    assert grad_u <= grad_f / UNIT.rho + 1e-6


def test_export_trajectory(tmp_path):
    g = TorusGrid(1, 32)
    ker = FourierKernel.kuramoto(2.0)
    traj = solve_mfg(g, ker, UNIT, measures.von_mises(g, 1.0), TimeMesh(1.0, 100), terminal_mode="zero")
    out = export_trajectory(traj, tmp_path / "traj", kernel=ker, params=UNIT, max_frames=11)
    meta = json.loads((out / "mesh.json").read_text())
    assert meta["schema"] == 1 and len(meta["frames"]) == 11
    assert meta["kernel"] == ker.to_dict()
    g2, m_last = read_field(out / "m_0010.tgf")
    assert g2 == g and np.array_equal(m_last, traj.densities[-1])
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,mass,q1,entropy,u_min,u_max,w1_uniform"
    assert len(lines) == 102
