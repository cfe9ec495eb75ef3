"""Even Fourier interaction kernels and the functionals built on them.

A kernel ``psi(x) = c0 + 1/2 sum_{k != 0} c_k cos(k.x)`` with
``c_k = c_{-k}`` is stored by one representative per pair ``{k, -k}``
(first non-zero component positive).  It induces

* the potential ``F(mu) = c0 + sum_k c_k q_k(mu)`` (sum over stored k),
* the cost ``f(x, mu) = 2 (psi * mu)(x)``,
* the free energy ``Phi = rho nu Ent + nu^2/2 I + F``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import measures
from .errors import GridError, KernelError
from .grid import TorusGrid

HEAT_FD_STEP = 1e-5


def canonical_wavevector(k) -> tuple:
    k = tuple(int(v) for v in np.atleast_1d(k))
    if not any(k):
        raise KernelError("kernel modes must have k != 0")
    first = next(v for v in k if v != 0)
    return k if first > 0 else tuple(-v for v in k)


@dataclass(frozen=True)
class ModelParams:
    rho: float
    nu: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"discount rho must be > 0, got {self.rho}")
        if not self.nu > 0:
            raise ValueError(f"diffusivity nu must be > 0, got {self.nu}")


@dataclass(frozen=True)
class FourierKernel:
    """Finitely supported even cosine kernel.

    Parameters
    ----------
    c0 : float
        Constant coefficient.
    modes : dict
        Map from wavevector (tuple of ints) to ``c_k``.  Keys are
        canonicalised; giving both ``k`` and ``-k`` is an error.
    """

    c0: float = 0.0
    modes: dict = field(default_factory=dict)

    def __post_init__(self):
        canon = {}
        dims = set()
        for k, c in dict(self.modes).items():
            ck = canonical_wavevector(k)
            if ck in canon:
                raise KernelError(f"mode {ck} given twice (as k and -k)")
            if not np.isfinite(c):
                raise KernelError(f"coefficient of mode {ck} is not finite")
            canon[ck] = float(c)
            dims.add(len(ck))
        if len(dims) > 1:
            raise KernelError(f"modes mix dimensions {sorted(dims)}")
        object.__setattr__(self, "modes", canon)
        object.__setattr__(self, "c0", float(self.c0))

    @property
    def dim(self):
        return len(next(iter(self.modes))) if self.modes else None

    @classmethod
    def kuramoto(cls, kappa, dim=1):
        """``psi = kappa sin^2(x/2) = kappa/2 - kappa/2 cos x`` (first axis in 2-D)."""
        if not kappa > 0:
            raise KernelError(f"Kuramoto coupling needs kappa > 0, got {kappa}")
        k = (1,) + (0,) * (dim - 1)
        return cls(kappa / 2.0, {k: -kappa / 2.0})

    @classmethod
    def single_mode(cls, gamma, k):
        return cls(0.0, {canonical_wavevector(k): gamma})

    def to_dict(self):
        return {
            "c0": self.c0,
            "modes": [{"k": list(k), "c": c} for k, c in sorted(self.modes.items())],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            c0 = float(data.get("c0", 0.0))
            modes = {}
            for entry in data.get("modes", []):
                k = canonical_wavevector(entry["k"])
                if k in modes:
                    raise KernelError(f"mode {k} listed twice")
                modes[k] = float(entry["c"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, KernelError):
                raise
            raise KernelError(f"malformed kernel description: {exc}") from None
        return cls(c0, modes)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def values(self, grid: TorusGrid):
        """Nodal values of ``psi``."""
        out = np.full(grid.shape, self.c0)
        for k, c in self._resolved(grid):
            out = out + c * np.cos(sum(kj * x for kj, x in zip(k, grid.nodes)))
        return out

    def _resolved(self, grid):
        if self.modes and self.dim != grid.dim:
            raise KernelError(f"kernel dimension {self.dim} does not match grid dimension {grid.dim}")
        for k, c in self.modes.items():
            if max(abs(v) for v in k) >= grid.n // 2:
                raise KernelError(f"kernel mode {k} is at or above the Nyquist mode of N={grid.n}")
            yield k, c


def _mode_table(grid, kernel, m):
    """``[(k, c_k, a_k, b_k), ...]`` for the stored modes of ``kernel``."""
    out = []
    for k, c in kernel._resolved(grid):
        a, b = measures.moment_ab(grid, m, k)
        out.append((k, c, a, b))
    return out


def kernel_moments(grid: TorusGrid, kernel: FourierKernel, m):
    """Moments ``(a_k, b_k)`` of ``m`` for each stored mode, shape ``batch + (modes, 2)``."""
    m = grid.check(m, "density")
    batch = m.shape[: m.ndim - grid.dim]
    table = _mode_table(grid, kernel, m)
    if not table:
        return np.zeros(batch + (0, 2))
    return np.stack([np.stack([np.asarray(a), np.asarray(b)], axis=-1) for _, _, a, b in table], axis=-2)


def cost_from_moments(grid: TorusGrid, kernel: FourierKernel, moments):
    """Interaction cost from a moment table produced by :func:`kernel_moments`."""
    moments = np.asarray(moments, dtype=float)
    batch = moments.shape[:-2]
    f = np.full(batch + grid.shape, 2.0 * kernel.c0)
    expand = (Ellipsis,) + (None,) * grid.dim
    for j, (k, c) in enumerate(kernel._resolved(grid)):
        phase = sum(kj * x for kj, x in zip(k, grid.nodes))
        a = moments[..., j, 0][expand]
        b = moments[..., j, 1][expand]
        f = f + 2.0 * c * (a * np.cos(phase) + b * np.sin(phase))
    return f


def interaction_cost(grid: TorusGrid, kernel: FourierKernel, m):
    """``f(x, mu) = 2 c0 + 2 sum_k c_k (a_k cos(k.x) + b_k sin(k.x))``; batched."""
    return cost_from_moments(grid, kernel, kernel_moments(grid, kernel, m))


def potential_energy(grid: TorusGrid, kernel: FourierKernel, m):
    """``F(mu) = c0 + sum_k c_k q_k(mu)``; batched."""
    total = kernel.c0
    for _, c, a, b in _mode_table(grid, kernel, grid.check(m, "density")):
        total = total + c * (a**2 + b**2)
    return total


def free_energy(grid, kernel, params: ModelParams, m):
    """``rho nu Ent + nu^2/2 I + F``; batched."""
    ent = measures.entropy(grid, m)
    fisher = measures.fisher_information(grid, m)
    pot = potential_energy(grid, kernel, m)
    return params.rho * params.nu * ent + 0.5 * params.nu**2 * fisher + pot


def linear_derivative_free_energy(grid, kernel, params: ModelParams, m):
    """Nodal field ``nu rho log m - nu^2 Lap log m - nu^2/2 |grad log m|^2 + f``.

    It is constant exactly when ``m`` is a stationary equilibrium.
    """
    m = measures.positive_part(grid, m)
    logm = np.log(m)
    nu, rho = params.nu, params.rho
    return (
        nu * rho * logm
        - nu**2 * grid.laplacian(logm)
        - 0.5 * nu**2 * grid.grad_norm2(logm)
        + interaction_cost(grid, kernel, m)
    )


def is_lasry_lions_monotone(kernel: FourierKernel) -> bool:
    return all(c >= 0 for c in kernel.modes.values())


def lambda_upper_bound(kernel: FourierKernel) -> float:
    """``sum_k (c_k)_-`` over stored modes.

    An upper bound for the supremum of ``-sum c_k |k|^2 q_k / I`` over
    non-uniform densities (each mode obeys ``I >= 2|k|^2 q_k``); equal to
    it for kernels with a single mode pair.
    """
    return float(sum(max(-c, 0.0) for c in kernel.modes.values()))


def critical_coupling(params: ModelParams) -> float:
    """``kappa_c = 2 nu (rho + nu)``."""
    return 2.0 * params.nu * (params.rho + params.nu)


def uniqueness_certified(kernel, params) -> bool:
    """True if the kernel is monotone or ``lambda_upper_bound < kappa_c / 2``."""
    return is_lasry_lions_monotone(kernel) or lambda_upper_bound(kernel) < critical_coupling(params) / 2


def heat_flow_rate(grid, kernel, m):
    """``-sum_{k != 0} c_k |k|^2 q_k(m)`` over both signs of k; batched."""
    total = 0.0
    for k, c, a, b in _mode_table(grid, kernel, grid.check(m, "density")):
        total = total - 2.0 * c * sum(v * v for v in k) * (a**2 + b**2)
    return total


class HeatFlowCriterion(NamedTuple):
    lhs: float
    rhs: float
    passes: bool


def heat_flow_criterion(grid, kernel, params: ModelParams, m) -> HeatFlowCriterion:
    """Necessary condition for stationarity along the heat flow.

    ``lhs`` is the time derivative of ``F`` along the heat flow started at
    ``m`` (at t = 0), ``rhs = nu (rho + nu) I(m)``.  ``passes`` is False
    only when ``m`` cannot be a stationary equilibrium.
    """
    m = measures.positive_part(grid, m)
    lhs = float(heat_flow_rate(grid, kernel, m))
    rhs = float(params.nu * (params.rho + params.nu) * measures.fisher_information(grid, m))
    tol = 1e-9 * (1.0 + abs(rhs))
    return HeatFlowCriterion(lhs, rhs, lhs >= rhs - tol)


class HeatFlowDerivative(NamedTuple):
    analytic: float
    numeric: float


def heat_flow_derivative_check(grid, kernel, m, t, step=HEAT_FD_STEP) -> HeatFlowDerivative:
    """Compare ``d/dt F(heat_evolve(m, t))`` with its Fourier closed form."""
    if t < 0:
        raise GridError(f"t must be >= 0, got {t}")
    m = grid.check(m, "density")
    analytic = float(heat_flow_rate(grid, kernel, grid.heat_evolve(m, t)))
    if t >= step:
        lo, hi = t - step, t + step
    else:
        lo, hi = t, t + 2 * step  # one-sided at the start of the flow
    pot_hi = potential_energy(grid, kernel, grid.heat_evolve(m, hi))
    pot_lo = potential_energy(grid, kernel, grid.heat_evolve(m, lo))
    if t >= step:
        numeric = (pot_hi - pot_lo) / (hi - lo)
    else:
        pot_mid = potential_energy(grid, kernel, grid.heat_evolve(m, t + step))
        numeric = (-3.0 * pot_lo + 4.0 * pot_mid - pot_hi) / (2.0 * step)
    return HeatFlowDerivative(analytic, float(numeric))
