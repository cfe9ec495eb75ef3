"""Independent numerical checks of the functional inequalities behind the solvers.

Every randomized check draws from a seeded ``numpy.random.Generator`` and
writes the offending field to disk when it fails, so a failure can be
replayed exactly.
"""

from __future__ import annotations

import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import measures
from .coupling import FourierKernel, heat_flow_derivative_check
from .errors import DegenerateDensityError, GridError
from .grid import TorusGrid, write_field

LOG_INEQUALITY_TOL = 1e-9
FISHER_BOUND_TOL = 1e-8


@dataclass(frozen=True)
class TrigPolynomial:
    """``const + sum_j (cos_j cos(j x) + sin_j sin(j x))`` on the circle."""

    const: float
    cos: tuple
    sin: tuple

    @property
    def degree(self):
        return len(self.cos)

    def values(self, grid: TorusGrid):
        if grid.dim != 1:
            raise GridError("trigonometric polynomials live on the circle (d = 1)")
        x = grid.coords
        out = np.full(grid.n, self.const)
        for j, (a, b) in enumerate(zip(self.cos, self.sin), start=1):
            out += a * np.cos(j * x) + b * np.sin(j * x)
        return out

    def margin(self, grid: TorusGrid):
        return float(self.values(grid).min())


def random_positive_trig(rng, grid: TorusGrid, max_degree=8, margin=0.05, degree=None) -> TrigPolynomial:
    """Random polynomial with coefficients of size ``2^-j`` at degree ``j``.

    The constant is 1.05 times the depth of the most negative nodal value
    plus ``margin``, so the nodal minimum is at least ``margin``.
    """
    if degree is None:
        degree = int(rng.integers(1, max_degree + 1))
    scale = 2.0 ** -np.arange(1, degree + 1)
    cos = rng.standard_normal(degree) * scale
    sin = rng.standard_normal(degree) * scale
    bare = TrigPolynomial(0.0, tuple(cos), tuple(sin)).values(grid)
    const = 1.05 * max(-bare.min(), 0.0) + margin
    return TrigPolynomial(float(const), tuple(cos), tuple(sin))


def random_density(rng, grid: TorusGrid, max_degree=8, margin=0.05, degree=None):
    poly = random_positive_trig(rng, grid, max_degree, margin, degree)
    return measures.normalize(grid, poly.values(grid))


class InequalityCheck(NamedTuple):
    lhs: float
    rhs: float
    passes: bool


def torus_log_inequality_check(grid: TorusGrid, g) -> InequalityCheck:
    """``int |(log g)'|^2 g <= int |(log g)''|^2 g`` for a positive field on the circle."""
    if grid.dim != 1:
        raise GridError("the log inequality check is one-dimensional")
    g = grid.check(g, "g")
    if np.any(g <= 0):
        raise DegenerateDensityError("g must be strictly positive")
    logg = np.log(g)
    d1 = grid.partial(logg, 0)
    d2 = grid.laplacian(logg)
    lhs = float(grid.integrate(d1**2 * g))
    rhs = float(grid.integrate(d2**2 * g))
    return InequalityCheck(lhs, rhs, lhs <= rhs + LOG_INEQUALITY_TOL * (1.0 + rhs))


class FisherModeBound(NamedTuple):
    ratio: float
    passes: bool


def fisher_mode_bound_check(grid: TorusGrid, m, k) -> FisherModeBound:
    """``ratio = 2 |k|^2 q_k(m) / I(m)``, which never exceeds one."""
    m = measures.positive_part(grid, m)
    fisher = float(measures.fisher_information(grid, m))
    if fisher <= 0:
        raise DegenerateDensityError("the Fisher bound needs a non-uniform density")
    mom = measures.fourier_moment(grid, m, k)
    ratio = 2.0 * sum(v * v for v in mom.k) * mom.q / fisher
    return FisherModeBound(float(ratio), ratio <= 1.0 + FISHER_BOUND_TOL)


def sharpness_ratio(eps):
    """Closed-form ratio for ``m_eps``: ``2 eps^2 / (1 - sqrt(1 - 4 eps^2))``."""
    eps = np.asarray(eps, dtype=float)
    return 2.0 * eps**2 / (1.0 - np.sqrt(1.0 - 4.0 * eps**2))


class SharpnessRow(NamedTuple):
    eps: float
    ratio: float
    closed_form: float


def sharpness_sweep(grid: TorusGrid, k, eps_list):
    """Fisher-bound ratio of ``m_eps(k)`` for each ``eps``, numeric and closed form."""
    rows = []
    for eps in eps_list:
        m = measures.m_eps_family(grid, eps, k)
        rows.append(SharpnessRow(float(eps), fisher_mode_bound_check(grid, m, k).ratio,
                                 float(sharpness_ratio(eps))))
    return rows


class DeBruijnCheck(NamedTuple):
    entropy_rate: float
    fisher: float
    fisher_rate: float
    relative_error: float
    fisher_decay_ok: bool


def _five_point(fn, t, step):
    return (fn(t - 2 * step) - 8 * fn(t - step) + 8 * fn(t + step) - fn(t + 2 * step)) / (12 * step)


def de_bruijn_check(grid: TorusGrid, m, t, step=1e-4) -> DeBruijnCheck:
    """Along the heat flow ``m_t``: ``dEnt/dt = -I`` and ``dI/dt <= -2 I``.

    Derivatives are fourth-order central differences of the exact discrete
    semigroup; ``t`` must be at least ``2 step``.
    """
    if t < 2 * step:
        raise GridError(f"t must be >= {2 * step}, got {t}")
    m = grid.check(m, "density")

    def ent(s):
        return float(measures.entropy(grid, grid.heat_evolve(m, s)))

    def fisher(s):
        return float(measures.fisher_information(grid, grid.heat_evolve(m, s)))

    i_t = fisher(t)
    d_ent = _five_point(ent, t, step)
    d_fisher = _five_point(fisher, t, step)
    rel = abs(d_ent + i_t) / max(i_t, np.finfo(float).tiny)
    return DeBruijnCheck(d_ent, i_t, d_fisher, rel, d_fisher <= -2.0 * i_t + 1e-8)


def random_kernel(rng, dim=1, max_mode=4):
    """Kernel with 1 to ``max_mode`` modes and coefficients of either sign."""
    count = int(rng.integers(1, max_mode + 1))
    wavenumbers = rng.choice(np.arange(1, max_mode + 1), size=count, replace=False)
    modes = {}
    for w in wavenumbers:
        k = (int(w),) + tuple(int(v) for v in rng.integers(-2, 3, size=dim - 1))
        modes[k] = float(rng.uniform(-2.0, 2.0))
    return FourierKernel(float(rng.uniform(-1.0, 1.0)), modes)


# -- suite runner ------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    artifacts: list = field(default_factory=list)


class _Case:
    def __init__(self, name, out_dir):
        self.name = name
        self.out_dir = out_dir
        self.artifacts = []

    def save(self, label, grid, values):
        if self.out_dir is None:
            return
        path = Path(self.out_dir) / "failures" / f"{self.name}_{label}.tgf"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_field(path, grid, values)
        self.artifacts.append(str(path))


def _check_log_inequality(rng, case, samples=200):
    grid = TorusGrid(1, 256)
    bad = []
    fixed = {"constant": np.full(grid.n, 2.0), "exp_cos": np.exp(np.cos(grid.coords))}
    for label, g in fixed.items():
        if not torus_log_inequality_check(grid, g).passes:
            bad.append(label)
            case.save(label, grid, g)
    for j in range(samples):
        g = random_positive_trig(rng, grid).values(grid)
        res = torus_log_inequality_check(grid, g)
        if not res.passes:
            bad.append(f"sample{j}")
            case.save(f"sample{j}", grid, g)
    return not bad, f"{samples + len(fixed)} instances, failures: {bad or 'none'}"


def _check_fisher_bound(rng, case, samples=100):
    grid = TorusGrid(1, 128)
    bad = []
    worst = 0.0
    for eps, k in ((0.1, 1), (0.01, 3)):
        r = fisher_mode_bound_check(grid, measures.m_eps_family(grid, eps, k), k)
        worst = max(worst, r.ratio)
        if not r.passes:
            bad.append(f"m_eps({eps},{k})")
    for j in range(samples):
        m = random_density(rng, grid)
        for k in (1, 2, 3):
            r = fisher_mode_bound_check(grid, m, k)
            worst = max(worst, r.ratio)
            if not r.passes:
                bad.append(f"sample{j}_k{k}")
                case.save(f"sample{j}_k{k}", grid, m)
    return not bad, f"max ratio {worst:.10f}, failures: {bad or 'none'}"


def _check_closed_forms(rng, case):
    grid = TorusGrid(1, 128)
    worst_q, worst_i = 0.0, 0.0
    for eps in (0.05, 0.1, 0.2):
        for k in (1, 2, 3):
            m = measures.m_eps_family(grid, eps, k)
            worst_q = max(worst_q, abs(measures.fourier_moment(grid, m, k).q - eps**2))
            exact = k**2 * (1.0 - np.sqrt(1.0 - 4.0 * eps**2))
            worst_i = max(worst_i, abs(float(measures.fisher_information(grid, m)) - exact))
    rows = sharpness_sweep(grid, 1, (0.2, 0.1, 0.05))
    expected = (0.9583, 0.9899, 0.9975)
    sweep_ok = all(abs(r.ratio - e) <= 1e-3 for r, e in zip(rows, expected))
    monotone = all(a.ratio < b.ratio for a, b in zip(rows, rows[1:]))
    ok = worst_q <= 1e-12 and worst_i <= 1e-8 and sweep_ok and monotone
    ratios = ", ".join(f"{r.ratio:.4f}" for r in rows)
    return ok, f"q error {worst_q:.1e}, Fisher error {worst_i:.1e}, ratios {ratios}"


def _check_de_bruijn(rng, case, samples=10):
    grid = TorusGrid(1, 128)
    bad = []
    worst = 0.0
    for j in range(samples):
        m = random_density(rng, grid, max_degree=6)
        t = float(rng.uniform(0.01, 0.5))
        r = de_bruijn_check(grid, m, t)
        worst = max(worst, r.relative_error)
        if r.relative_error > 1e-6 or not r.fisher_decay_ok:
            bad.append(f"sample{j}")
            case.save(f"sample{j}", grid, m)
    return not bad, f"max relative error {worst:.1e}, failures: {bad or 'none'}"


def _check_heat_derivative(rng, case, samples=20):
    grid = TorusGrid(1, 128)
    bad = []
    worst = 0.0
    for j in range(samples):
        kernel = random_kernel(rng)
        m = random_density(rng, grid, degree=6)
        t = float(rng.uniform(0.0, 1.0))
        r = heat_flow_derivative_check(grid, kernel, m, t)
        err = abs(r.analytic - r.numeric) / (1.0 + abs(r.analytic))
        worst = max(worst, err)
        if not err <= 1e-7:
            bad.append(f"sample{j}")
            case.save(f"sample{j}", grid, m)
    return not bad, f"max error / (1 + |analytic|) {worst:.1e}, failures: {bad or 'none'}"


SUITE = {
    "torus_log_inequality": _check_log_inequality,
    "fisher_mode_bound": _check_fisher_bound,
    "closed_forms_and_sharpness": _check_closed_forms,
    "de_bruijn_and_fisher_decay": _check_de_bruijn,
    "heat_flow_derivative": _check_heat_derivative,
}


def run_suite(seed=42, out_dir=None):
    """Run every check with its own generator derived from ``seed``."""
    results = []
    streams = np.random.SeedSequence(seed).spawn(len(SUITE))
    for (name, fn), stream in zip(SUITE.items(), streams):
        case = _Case(name, out_dir)
        start = time.perf_counter()
        try:
            passed, detail = fn(np.random.default_rng(stream), case)
        except Exception as exc:  # a crash is reported as a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start, case.artifacts))
    return results


def write_junit(path, results, suite_name="torusmfg.verify"):
    failures = sum(not r.passed for r in results)
    root = ET.Element("testsuite", name=suite_name, tests=str(len(results)), failures=str(failures),
                      errors="0", time=f"{sum(r.seconds for r in results):.3f}")
    for r in results:
        case = ET.SubElement(root, "testcase", classname=suite_name, name=r.name, time=f"{r.seconds:.3f}")
        if not r.passed:
            ET.SubElement(case, "failure", message=r.detail).text = "\n".join(r.artifacts)
        ET.SubElement(case, "system-out").text = r.detail
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def summary_text(results):
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}" for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
