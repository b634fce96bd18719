"""Geometry of the unit sphere S^{n-1}.

Uniform sampling, the uniform log-density, the recursive cylinder chart
``(theta, z_2, ..., z_{n-1})`` with its surface-measure factor, and a
low-dimensional quadrature rule used as a brute-force oracle.

Chart convention: for a unit vector ``v`` in R^n (0-based indices),

    z_k   = v[k] / ||v[:k+1]||        k = 2 .. n-1
    theta = atan2(v[1], v[0])          wrapped into [0, 2*pi)

so ``z_{n-1}`` is the outermost coordinate.  The surface measure factors as
``dtheta * prod_k (1 - z_k^2)^((k-2)/2) dz_k``.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np
import torch
from scipy.special import gammaln

TWO_PI = 2.0 * math.pi
POLE_TOL = 1e-12
# floor for 1 - z^2 inside logarithms
MEASURE_FLOOR = 1e-12


class ChartError(ValueError):
    """Raised for points at (or numerically on) a pole of the cylinder chart."""


class CylinderCoords(NamedTuple):
    """Cylinder coordinates; ``theta`` has shape (...,), ``z`` has shape (..., n-2)."""

    theta: torch.Tensor | np.ndarray
    z: torch.Tensor | np.ndarray

    @property
    def dim(self) -> int:
        return self.z.shape[-1] + 2


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def sample_uniform(n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from S^{n-1} by normalizing standard normals.

    Returns shape ``(n,)`` when ``size`` is None, else ``(size, n)``.
    """
    if n < 2:
        raise ValueError(f"sphere dimension must be >= 2, got n={n}")
    shape = (n,) if size is None else (size, n)
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nrm == 0) or not np.all(np.isfinite(v)):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / nrm


def log_uniform_density(n: int) -> float:
    """``-log`` of the surface area of S^{n-1}, i.e. ``-log(2 pi^{n/2} / Gamma(n/2))``."""
    if n < 2:
        raise ValueError(f"sphere dimension must be >= 2, got n={n}")
    return -(math.log(2.0) + 0.5 * n * math.log(math.pi) - float(gammaln(0.5 * n)))


def to_cylinder(v, check_poles: bool = True) -> CylinderCoords:
    """Map unit vector(s) to cylinder coordinates.

    Works on numpy arrays or torch tensors (differentiably); returns the same
    kind.  Raises :class:`ChartError` if some partial norm ``||v[:k+1]||``
    (k >= 1) is below ``POLE_TOL``.
    """
    t, was_np = _as_tensor(v)
    n = t.shape[-1]
    if n < 2:
        raise ValueError("need n >= 2")
    # partial norms ||v[:m]|| for m = 2..n
    partial = torch.sqrt(torch.cumsum(t * t, dim=-1))[..., 1:]
    if check_poles and bool((partial.detach() < POLE_TOL).any()):
        raise ChartError("point lies on a pole of the cylinder chart")
    theta = torch.remainder(torch.atan2(t[..., 1], t[..., 0]), TWO_PI)
    z = t[..., 2:] / partial[..., 1:]
    if was_np:
        return CylinderCoords(theta.numpy(), z.numpy())
    return CylinderCoords(theta, z)


def from_cylinder(c: CylinderCoords, n: int | None = None):
    """Inverse of :func:`to_cylinder`."""
    theta, was_np = _as_tensor(c.theta)
    z, _ = _as_tensor(c.z)
    if n is not None and z.shape[-1] != n - 2:
        raise ValueError(f"expected {n - 2} z-coordinates, got {z.shape[-1]}")
    r = torch.sqrt(torch.clamp((1.0 - z) * (1.0 + z), min=0.0))
    # scale[k] = prod_{j > k} r_j, the radius of the circle/sub-sphere below level k
    ones = torch.ones_like(theta).unsqueeze(-1)
    rev = torch.flip(torch.cat([r, ones], dim=-1), dims=[-1])
    tail = torch.flip(torch.cumprod(rev, dim=-1), dims=[-1])
    base = tail[..., 0]
    head = torch.stack([torch.cos(theta) * base, torch.sin(theta) * base], dim=-1)
    v = torch.cat([head, z * tail[..., 1:]], dim=-1)
    return v.numpy() if was_np else v


def log_cylinder_measure_factor(c: CylinderCoords):
    """``sum_k ((k-2)/2) * log(1 - z_k^2)``; zero for n = 2, 3."""
    z, was_np = _as_tensor(c.z)
    m = z.shape[-1]
    if m == 0:
        out = torch.zeros(z.shape[:-1], dtype=z.dtype)
    else:
        expo = 0.5 * torch.arange(m, dtype=z.dtype)
        out = (expo * torch.log(torch.clamp((1.0 - z) * (1.0 + z), min=MEASURE_FLOOR))).sum(-1)
    return out.numpy() if was_np else out


def quadrature_nodes(n: int, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Points on S^{n-1} and weights summing to 1 for the uniform law (n in {2, 3}).

    n = 2: equispaced (periodic trapezoid) rule in theta.
    n = 3: product grid, periodic trapezoid in theta times Gauss-Legendre in z;
    the uniform measure on S^2 is ``dtheta dz / (4 pi)``.
    """
    if n == 2:
        m = int(resolution)
        theta = TWO_PI * np.arange(m) / m
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return pts, np.full(m, 1.0 / m)
    if n == 3:
        if np.ndim(resolution) == 0:
            m_theta = m_z = int(resolution)
        else:
            m_theta, m_z = (int(r) for r in resolution)
        theta = TWO_PI * np.arange(m_theta) / m_theta
        z, wz = np.polynomial.legendre.leggauss(m_z)
        tt, zz = np.meshgrid(theta, z, indexing="ij")
        c = CylinderCoords(tt.ravel(), zz.ravel()[:, None])
        w = np.repeat(1.0 / m_theta, m_theta)[:, None] * (0.5 * wz)[None, :]
        return from_cylinder(c), w.ravel()
    raise ValueError(f"quadrature only supported for n in {{2, 3}}, got n={n}")


def quadrature_expectation(
    n: int,
    integrand: Callable[[np.ndarray], np.ndarray],
    resolution=1000,
    chunk: int = 1 << 18,
) -> float:
    """Expectation of ``integrand`` under U(S^{n-1}) by deterministic quadrature.

    ``integrand`` is vectorized: it receives an ``(M, n)`` array of unit vectors.
    """
    pts, w = quadrature_nodes(n, resolution)
    total = 0.0
    for i in range(0, len(w), chunk):
        vals = np.asarray(integrand(pts[i:i + chunk]), dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("integrand is not finite on the quadrature grid")
        total += float(np.dot(w[i:i + chunk], vals))
    return total
