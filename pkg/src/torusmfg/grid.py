"""Uniform periodic grids on the torus (R / 2piZ)^d with Fourier calculus.

Scalar fields are plain ``numpy`` arrays of shape ``(N,) * d``.  Vector
fields carry the component axis just before the spatial axes, i.e. shape
``(d,) + (N,) * d``.  Every operator also accepts extra leading batch axes
(for example a time axis), which lets diagnostics work on whole
trajectories at once.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import GridError

TWO_PI = 2.0 * np.pi

_MAGIC = b"TGF1"
_HEADER = struct.Struct("<4sIQ")  # magic, d, N -> 16 bytes


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``n`` nodes per axis on the ``dim``-torus.

    Parameters
    ----------
    dim : int
        Dimension, 1 or 2.
    n : int
        Points per axis; even and at least 8.
    """

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8 or self.n % 2:
            raise GridError(f"points per axis must be even and >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return TWO_PI / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def volume(self) -> float:
        return TWO_PI**self.dim

    @property
    def _axes(self) -> tuple:
        return tuple(range(-self.dim, 0))

    @cached_property
    def coords(self) -> np.ndarray:
        """1-D node coordinates ``x_j = j h``."""
        return np.arange(self.n) * self.h

    @cached_property
    def nodes(self) -> tuple:
        """Coordinate arrays, one per axis, each of shape ``self.shape``."""
        return tuple(np.meshgrid(*([self.coords] * self.dim), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple:
        """Integer wavenumbers per axis, broadcastable to the rfftn shape."""
        ks = []
        for axis in range(self.dim):
            if axis == self.dim - 1:
                k = np.fft.rfftfreq(self.n, 1.0 / self.n)
            else:
                k = np.fft.fftfreq(self.n, 1.0 / self.n)
            shape = [1] * self.dim
            shape[axis] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    @cached_property
    def _derivative_multipliers(self) -> tuple:
        out = []
        for k in self.wavenumbers:
            mult = 1j * k
            # odd derivative of the Nyquist mode is set to zero
            mult = np.where(np.abs(k) == self.n // 2, 0.0, mult)
            out.append(mult)
        return tuple(out)

    @cached_property
    def k_squared(self) -> np.ndarray:
        """``|k|^2`` on the rfftn layout."""
        total = 0.0
        for k in self.wavenumbers:
            total = total + k**2
        return np.asarray(total, dtype=float)

    # -- transforms ---------------------------------------------------------

    def fft(self, f):
        return np.fft.rfftn(f, axes=self._axes)

    def ifft(self, fhat):
        return np.fft.irfftn(fhat, s=self.shape, axes=self._axes)

    def apply_multiplier(self, f, multiplier):
        """Apply a Fourier multiplier (on the rfftn layout) to ``f``."""
        return self.ifft(self.fft(f) * multiplier)

    def check(self, f, name="field"):
        f = np.asarray(f, dtype=float)
        if f.shape[f.ndim - self.dim :] != self.shape:
            raise GridError(f"{name} has shape {f.shape}, expected trailing {self.shape}")
        if not np.all(np.isfinite(f)):
            raise GridError(f"{name} contains non-finite values")
        return f

    # -- calculus -----------------------------------------------------------

    def gradient(self, f):
        """Spectral gradient; the component axis precedes the spatial axes."""
        f = self.check(f)
        fhat = self.fft(f)
        comps = [self.ifft(fhat * mult) for mult in self._derivative_multipliers]
        return np.stack(comps, axis=f.ndim - self.dim)

    def partial(self, f, axis):
        f = self.check(f)
        return self.apply_multiplier(f, self._derivative_multipliers[axis])

    def laplacian(self, f):
        f = self.check(f)
        return self.apply_multiplier(f, -self.k_squared)

    def divergence(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim < self.dim + 1 or v.shape[v.ndim - self.dim - 1] != self.dim:
            raise GridError(f"vector field needs {self.dim} components before the spatial axes")
        v = self.check(v, "vector field")
        comp_axis = v.ndim - self.dim - 1
        total = 0.0
        for j, mult in enumerate(self._derivative_multipliers):
            total = total + self.fft(np.take(v, j, axis=comp_axis)) * mult
        return self.ifft(total)

    def grad_norm2(self, f):
        """``|grad f|^2`` at the nodes."""
        g = self.gradient(f)
        return np.sum(g**2, axis=g.ndim - self.dim - 1)

    def integrate(self, f):
        """Periodic trapezoid rule ``h^d * sum f``; batched over leading axes."""
        f = self.check(f)
        return self.cell_volume * f.sum(axis=self._axes)

    def heat_evolve(self, f, t):
        """Exact heat semigroup ``exp(t Laplacian) f``."""
        if t < 0:
            raise GridError(f"heat_evolve needs t >= 0, got {t}")
        f = self.check(f)
        if t == 0:
            return f.copy()
        return self.apply_multiplier(f, np.exp(-self.k_squared * t))

    def shift(self, f, steps):
        """Circular shift by ``steps`` nodes (an int, or one int per axis)."""
        steps = np.broadcast_to(np.atleast_1d(steps), (self.dim,))
        return np.roll(f, tuple(int(s) for s in steps), axis=self._axes)

    def translate(self, f, offset):
        """Trigonometric interpolant of ``f`` translated by ``offset`` (radians, one per axis)."""
        offset = np.broadcast_to(np.asarray(offset, dtype=float), (self.dim,))
        phase = sum(k * o for k, o in zip(self.wavenumbers, offset))
        fhat = self.fft(self.check(f))
        # keep the Nyquist coefficient real so the result stays a real field
        nyq = sum(np.abs(k) == self.n // 2 for k in self.wavenumbers) > 0
        return self.ifft(np.where(nyq, fhat * np.cos(phase), fhat * np.exp(-1j * phase)))

    def refine(self, f, factor):
        """Trigonometric interpolation of a 1-D field onto ``factor * n`` nodes."""
        if self.dim != 1:
            raise GridError("refine is only implemented for d = 1")
        f = np.asarray(f, dtype=float)
        if factor == 1:
            return f
        fhat = np.fft.rfft(f, axis=-1)
        fhat[..., -1] *= 0.5  # split the Nyquist mode symmetrically
        m = self.n * factor
        padded = np.zeros(f.shape[:-1] + (m // 2 + 1,), dtype=complex)
        padded[..., : fhat.shape[-1]] = fhat
        return np.fft.irfft(padded, n=m, axis=-1) * factor


def write_field(path, grid: TorusGrid, values) -> None:
    """Write a scalar field in the ``TGF1`` binary format.

    The file holds a 16-byte header (magic ``TGF1``, ``d`` as uint32,
    ``N`` as uint64, little endian) followed by ``N**d`` little-endian
    float64 values in row-major order.
    """
    values = grid.check(values)
    if values.shape != grid.shape:
        raise GridError(f"expected a single field of shape {grid.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, grid.dim, grid.n))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_field(path):
    """Read a ``TGF1`` file; returns ``(grid, values)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridError(f"{path}: truncated header")
    magic, dim, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    grid = TorusGrid(dim, n)
    body = raw[_HEADER.size :]
    expected = 8 * n**dim
    if len(body) != expected:
        raise GridError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(float).reshape(grid.shape)
    return grid, values
