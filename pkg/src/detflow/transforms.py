"""Elementwise monotone transforms used inside the sphere flow.

Every transform takes *raw* (unconstrained) parameters as produced by a
conditioner, so that an all-zero raw parameter vector is the identity map.
All functions are batched over leading dimensions and differentiable.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

TWO_PI = 2.0 * math.pi

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
MAX_CENTER_RADIUS = 0.99


class DomainError(ValueError):
    pass


def _derivative_shift() -> float:
    # softplus(shift) + MIN_DERIVATIVE == 1, so raw zeros give unit knot slopes
    return math.log(math.expm1(1.0 - MIN_DERIVATIVE))


def spline_param_count(n_bins: int, circular: bool = False) -> int:
    # widths, heights, knot derivatives (+ rotation offset for the circle)
    return 3 * n_bins + 1


def _knots(raw: torch.Tensor, left: float, right: float, min_size: float):
    k = raw.shape[-1]
    size = min_size + (1.0 - min_size * k) * torch.softmax(raw, dim=-1)
    cum = left + (right - left) * torch.cumsum(size, dim=-1)
    # pin both ends exactly
    edge = torch.full_like(cum[..., :1], left)
    cum = torch.cat([edge, cum[..., :-1], edge + (right - left)], dim=-1)
    return cum, cum[..., 1:] - cum[..., :-1]


def _gather(t: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(t, -1, idx.unsqueeze(-1)).squeeze(-1)


def rq_spline(
    x: torch.Tensor,
    raw_widths: torch.Tensor,
    raw_heights: torch.Tensor,
    raw_derivs: torch.Tensor,
    inverse: bool = False,
    left: float = -1.0,
    right: float = 1.0,
    check_domain: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Monotone rational-quadratic spline mapping ``[left, right]`` onto itself.

    ``raw_widths``/``raw_heights`` have ``K`` trailing entries and ``raw_derivs``
    has ``K + 1`` (one per knot).  Returns ``(y, log dy/dx)``; with
    ``inverse=True`` returns ``(x, log dx/dy)`` for input ``y``.
    """
    if check_domain:
        xd = x.detach()
        tol = 1e-12 * (right - left)
        if bool(((xd < left - tol) | (xd > right + tol)).any()):
            raise DomainError(f"spline input outside [{left}, {right}]")
    x = torch.clamp(x, left, right)

    xk, w = _knots(raw_widths, left, right, MIN_BIN_WIDTH)
    yk, h = _knots(raw_heights, left, right, MIN_BIN_HEIGHT)
    d = MIN_DERIVATIVE + F.softplus(raw_derivs + _derivative_shift())

    knots = yk if inverse else xk
    # bin index: number of interior knots <= x
    idx = torch.searchsorted(knots[..., 1:-1].detach().contiguous(),
                             x.detach().unsqueeze(-1).contiguous(), right=True).squeeze(-1)

    x_lo, w_k = _gather(xk, idx), _gather(w, idx)
    y_lo, h_k = _gather(yk, idx), _gather(h, idx)
    d_lo, d_hi = _gather(d, idx), _gather(d, idx + 1)
    s = h_k / w_k
    slack = d_lo + d_hi - 2.0 * s

    if not inverse:
        xi = (x - x_lo) / w_k
        om = xi * (1.0 - xi)
        denom = s + slack * om
        y = y_lo + h_k * (s * xi * xi + d_lo * om) / denom
        dnum = s * s * (d_hi * xi * xi + 2.0 * s * om + d_lo * (1.0 - xi) ** 2)
        return y, torch.log(dnum) - 2.0 * torch.log(denom)

    dy = x - y_lo
    a = h_k * (s - d_lo) + dy * slack
    b = h_k * d_lo - dy * slack
    c = -s * dy
    disc = torch.clamp(b * b - 4.0 * a * c, min=0.0)
    xi = (2.0 * c) / (-b - torch.sqrt(disc))
    xi = torch.clamp(xi, 0.0, 1.0)
    om = xi * (1.0 - xi)
    denom = s + slack * om
    dnum = s * s * (d_hi * xi * xi + 2.0 * s * om + d_lo * (1.0 - xi) ** 2)
    return x_lo + xi * w_k, -(torch.log(dnum) - 2.0 * torch.log(denom))


def split_spline_params(raw: torch.Tensor, n_bins: int, circular: bool = False):
    k = n_bins
    if circular:
        w, h, d, rot = raw.split([k, k, k, 1], dim=-1)
        d = torch.cat([d, d[..., :1]], dim=-1)  # tie the 0 and 2*pi knot slopes
        return w, h, d, rot.squeeze(-1)
    return raw.split([k, k, k + 1], dim=-1)


def interval_spline(z, raw, n_bins, inverse=False):
    """Spline on [-1, 1] with ``3K + 1`` raw parameters per coordinate."""
    w, h, d = split_spline_params(raw, n_bins)
    return rq_spline(z, w, h, d, inverse=inverse, left=-1.0, right=1.0)


def circular_spline(theta, raw, n_bins, inverse=False):
    """Degree-one circle map: periodic-slope spline on [0, 2 pi) plus a rotation."""
    w, h, d, rot = split_spline_params(raw, n_bins, circular=True)
    if not inverse:
        y, ld = rq_spline(theta, w, h, d, left=0.0, right=TWO_PI, check_domain=False)
        return torch.remainder(y + rot, TWO_PI), ld
    t = torch.remainder(theta - rot, TWO_PI)
    return rq_spline(t, w, h, d, inverse=True, left=0.0, right=TWO_PI, check_domain=False)


# --- Moebius circle maps ---------------------------------------------------

def moebius_param_count(n_centers: int) -> int:
    # 2 per center, 1 mixture logit per center, 1 rotation
    return 3 * n_centers + 1


def squash_centers(raw_xy: torch.Tensor) -> torch.Tensor:
    """Smooth radial squash of R^2 into the disk of radius ``MAX_CENTER_RADIUS``."""
    r2 = (raw_xy * raw_xy).sum(-1, keepdim=True)
    return MAX_CENTER_RADIUS * raw_xy / torch.sqrt(1.0 + r2)


def split_moebius_params(raw: torch.Tensor, n_centers: int):
    c = n_centers
    xy, logits, rot = raw.split([2 * c, c, 1], dim=-1)
    omega = squash_centers(xy.reshape(raw.shape[:-1] + (c, 2)))
    return omega, torch.softmax(logits, dim=-1), rot.squeeze(-1)


def moebius_components(theta: torch.Tensor, omega: torch.Tensor, anchor: bool = True):
    """Per-center angle and derivative of ``zeta -> (zeta - w) / (1 - conj(w) zeta)``.

    ``theta``: (...,), ``omega``: (..., C, 2).  With ``anchor`` the angle map is
    shifted so it fixes 0, and returned as its monotone lift in [0, 2 pi].
    """
    a, b = omega[..., 0], omega[..., 1]
    th = theta.unsqueeze(-1)
    c, s = torch.cos(th), torch.sin(th)
    nr, ni = c - a, s - b
    dr = 1.0 - (a * c + b * s)
    di = -(a * s - b * c)
    ang = torch.atan2(ni * dr - nr * di, nr * dr + ni * di)
    deriv = (1.0 - (a * a + b * b)) / (nr * nr + ni * ni)
    if not anchor:
        return ang, deriv
    ang0 = 2.0 * torch.atan2(-b, 1.0 - a)
    lift = torch.remainder(ang - ang0, TWO_PI)
    # guard the branch at the fixed point 0 == 2 pi against rounding
    lift = torch.where((th < 1e-8) & (lift > math.pi), lift - TWO_PI, lift)
    lift = torch.where((th > TWO_PI - 1e-8) & (lift < math.pi), lift + TWO_PI, lift)
    return lift, deriv


def moebius_mixture(theta: torch.Tensor, raw: torch.Tensor, n_centers: int):
    """Convex combination of anchored Moebius lifts followed by a rotation.

    Returns ``(theta_out in [0, 2 pi), log dtheta_out/dtheta)``.
    """
    omega, rho, rot = split_moebius_params(raw, n_centers)
    lift, deriv = moebius_components(theta, omega)
    out = torch.remainder((rho * lift).sum(-1) + rot, TWO_PI)
    return out, torch.log((rho * deriv).sum(-1))


@torch.no_grad()
def moebius_mixture_inverse(theta_out: torch.Tensor, raw: torch.Tensor, n_centers: int,
                            iters: int = 64):
    """Invert :func:`moebius_mixture` by bisection on the monotone lift.

    Returns ``(theta, log dtheta/dtheta_out)``.
    """
    omega, rho, rot = split_moebius_params(raw, n_centers)
    target = torch.remainder(theta_out - rot, TWO_PI)
    lo = torch.zeros_like(target)
    hi = torch.full_like(target, TWO_PI)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = (rho * moebius_components(mid, omega)[0]).sum(-1)
        below = val < target
        lo = torch.where(below, mid, lo)
        hi = torch.where(below, hi, mid)
    theta = 0.5 * (lo + hi)
    # two Newton polishes; bisection already brackets to ~1e-18
    for _ in range(2):
        lift, deriv = moebius_components(theta, omega)
        g = (rho * deriv).sum(-1)
        theta = torch.clamp(theta - ((rho * lift).sum(-1) - target) / g, 0.0, TWO_PI)
    _, deriv = moebius_components(theta, omega)
    return torch.remainder(theta, TWO_PI), -torch.log((rho * deriv).sum(-1))
