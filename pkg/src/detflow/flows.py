"""Normalizing flows on S^{n-1} built in the recursive cylinder chart.

A layer acts on chart coordinates ``(theta, z_2..z_{n-1})``: the angle with a
circle diffeomorphism (Moebius mixture or circular spline), each ``z`` with a
rational-quadratic spline on [-1, 1].  Layer ``l > 0`` works in its own fixed
rotated frame ``R_l`` (i.e. computes ``R_l^T g(R_l s)``), which moves chart
poles and mixes coordinate roles between layers without breaking the
identity-at-init property.

For a layer with chart Jacobian ``J`` the change of surface density is

    log|det J| + log m(c_out) - log m(c_in)

where ``m`` is the cylinder measure factor (see :mod:`detflow.sphere`).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from . import sphere, transforms
from .diffgraph import DTYPE, Conditioner, LayoutBuilder, ParamStore, init_values
from .sphere import CylinderCoords

MAX_RESAMPLE = 8


@dataclass(frozen=True)
class FlowSpec:
    n: int
    n_layers: int = 8
    masking: str = "coupling"  # "coupling" | "autoregressive"
    circle: str = "moebius"  # "moebius" | "spline"
    n_centers: int = 12
    n_bins: int = 16
    hidden: tuple[int, ...] = (64, 64)
    frame_seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("flow dimension must be >= 2")
        if self.masking not in ("coupling", "autoregressive"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if self.circle not in ("moebius", "spline"):
            raise ValueError(f"unknown circle transform {self.circle!r}")
        if self.n_layers < 1 or self.n_bins < 1 or self.n_centers < 1:
            raise ValueError("n_layers, n_bins and n_centers must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditioner"] = {"hidden": list(d.pop("hidden"))}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSpec":
        d = dict(d)
        cond = d.pop("conditioner", None) or {}
        if "hidden" in cond:
            d["hidden"] = tuple(cond["hidden"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FlowSpec":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def dense_spec(n: int, **kw) -> FlowSpec:
    """Coupling architecture used for the dense and convolution experiments."""
    return FlowSpec(n=n, **{"n_layers": 8, "masking": "coupling", "circle": "moebius",
                            "n_centers": 12, "n_bins": 16, **kw})


def cover_spec(n: int = 3, **kw) -> FlowSpec:
    """Autoregressive variant: splines on both the circle and the interval, 32 bins."""
    return FlowSpec(n=n, **{"n_layers": 6, "masking": "autoregressive", "circle": "spline",
                            "n_bins": 32, **kw})


def random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# --- coordinate bookkeeping ------------------------------------------------
# chart coordinate 0 is theta, coordinate i >= 1 is z[..., i - 1]; every
# coordinate group used below is contiguous.

def _z_block(coords: Sequence[int]) -> tuple[int, int]:
    zs = [c - 1 for c in coords if c != 0]
    if not zs:
        return 0, 0
    if zs != list(range(zs[0], zs[-1] + 1)):
        raise ValueError("z coordinates of a group must be contiguous")
    return zs[0], zs[-1] + 1


def _features(theta: torch.Tensor, z: torch.Tensor, coords: Sequence[int]) -> torch.Tensor | None:
    """Conditioner input: (cos, sin) for the angle, raw values for z's."""
    cols = []
    if 0 in coords:
        cols += [torch.cos(theta).unsqueeze(-1), torch.sin(theta).unsqueeze(-1)]
    a, b = _z_block(coords)
    if b > a:
        cols.append(z[..., a:b])
    return torch.cat(cols, dim=-1) if cols else None


def _feature_dim(coords: Sequence[int]) -> int:
    return sum(2 if c == 0 else 1 for c in coords)


class _CoordTransform:
    """Parameter bookkeeping for transforming a group of chart coordinates."""

    def __init__(self, spec: FlowSpec, coords: Sequence[int]):
        self.spec = spec
        self.coords = list(coords)
        self.has_circle = 0 in self.coords
        self.circle_size = 0
        if self.has_circle:
            self.circle_size = (transforms.moebius_param_count(spec.n_centers)
                                if spec.circle == "moebius"
                                else transforms.spline_param_count(spec.n_bins, circular=True))
        self.spline_size = transforms.spline_param_count(spec.n_bins)
        self.z_lo, self.z_hi = _z_block(self.coords)
        self.n_z = self.z_hi - self.z_lo

    @property
    def size(self) -> int:
        return self.circle_size + self.n_z * self.spline_size

    def apply(self, theta, z, raw, inverse: bool):
        """Return ``(theta_out, z_out, summed log-derivative)``."""
        spec = self.spec
        craw, zraw = raw.split([self.circle_size, self.n_z * self.spline_size], dim=-1)
        logd = None
        if self.has_circle:
            if spec.circle == "moebius":
                fn = transforms.moebius_mixture_inverse if inverse else transforms.moebius_mixture
                theta, logd = fn(theta, craw, spec.n_centers)
            else:
                theta, logd = transforms.circular_spline(theta, craw, spec.n_bins, inverse=inverse)
        if self.n_z:
            zraw = zraw.reshape(raw.shape[:-1] + (self.n_z, self.spline_size))
            pre, mid, post = z.split([self.z_lo, self.n_z, z.shape[-1] - self.z_hi], dim=-1)
            zout, ld = transforms.interval_spline(mid, zraw, spec.n_bins, inverse=inverse)
            z = torch.cat([pre, zout, post], dim=-1)
            logd = ld.sum(-1) if logd is None else logd + ld.sum(-1)
        return theta, z, logd


class CouplingLayer:
    """Transforms one half of the chart coordinates conditioned on the other half."""

    def __init__(self, spec: FlowSpec, builder: LayoutBuilder, index: int):
        n = spec.n
        head = [0] + list(range(1, 1 + (n - 2) // 2))
        tail = list(range(1 + (n - 2) // 2, n - 1))
        if not tail:
            cond, trans = [], head
        elif index % 2 == 0:
            cond, trans = head, tail
        else:
            cond, trans = tail, head
        self.cond, self.trans = cond, trans
        self.transform = _CoordTransform(spec, trans)
        self.net = Conditioner(builder, f"layer{index}.net", _feature_dim(cond),
                               self.transform.size, spec.hidden)
        self.conditioners = [self.net]

    def __call__(self, params, theta, z, inverse=False):
        feats = _features(theta, z, self.cond)
        raw = self.net.forward(params, feats, batch_shape=theta.shape)
        return self.transform.apply(theta, z, raw, inverse)


class AutoregressiveLayer:
    """Coordinate ``i`` (chart order theta, z_2, ...) conditioned on coordinates ``< i``."""

    def __init__(self, spec: FlowSpec, builder: LayoutBuilder, index: int):
        self.order = list(range(spec.n - 1))
        self.steps = []
        for pos, c in enumerate(self.order):
            t = _CoordTransform(spec, [c])
            prev = self.order[:pos]
            net = Conditioner(builder, f"layer{index}.ar{pos}", _feature_dim(prev), t.size, spec.hidden)
            self.steps.append((prev, t, net))
        self.conditioners = [s[2] for s in self.steps]

    def __call__(self, params, theta, z, inverse=False):
        logd = torch.zeros(theta.shape, dtype=theta.dtype)
        # forward: all inputs known up front; inverse: fill outputs in order
        src_theta, src_z = theta, z
        out_theta, out_z = theta, z
        for prev, t, net in self.steps:
            ct, cz = (out_theta, out_z) if inverse else (src_theta, src_z)
            raw = net.forward(params, _features(ct, cz, prev), batch_shape=theta.shape)
            nt, nz, ld = t.apply(src_theta, src_z, raw, inverse)
            if t.has_circle:
                out_theta = nt
            else:
                a, b = t.z_lo, t.z_hi
                out_z = torch.cat([out_z[..., :a], nz[..., a:b], out_z[..., b:]], dim=-1)
            logd = logd + ld
        return out_theta, out_z, logd


class SphericalFlow:
    """Stack of sphere-flow layers bound to a :class:`ParamStore`."""

    def __init__(self, spec: FlowSpec, params: ParamStore | None = None):
        self.spec = spec
        builder = LayoutBuilder()
        layer_cls = CouplingLayer if spec.masking == "coupling" else AutoregressiveLayer
        self.layers = [layer_cls(spec, builder, i) for i in range(spec.n_layers)]
        self.layout = builder.segments
        rng = np.random.default_rng(spec.frame_seed)
        self.frames: list[torch.Tensor | None] = [None]
        for _ in range(1, spec.n_layers):
            self.frames.append(torch.from_numpy(random_rotation(spec.n, rng)))
        if params is None:
            params = ParamStore(self.layout)
        self.bind(params)

    @property
    def n(self) -> int:
        return self.spec.n

    def bind(self, params: ParamStore) -> "SphericalFlow":
        if [s.name for s in params.layout] != [s.name for s in self.layout]:
            raise ValueError("parameter layout does not match the flow architecture")
        self.params = params
        return self

    def _identity_layers(self, params: ParamStore) -> list[bool]:
        return [all(c.is_zero_output(params) for c in layer.conditioners) for layer in self.layers]

    def forward(self, s0, params: ParamStore | None = None, check_poles: bool = True):
        """Push ``s0`` (B, n) through the flow: returns ``(s, logdet)``.

        Layers whose conditioners output exactly zero are the identity and are
        skipped when no gradient is being recorded.
        """
        params = self.params if params is None else params
        s = torch.as_tensor(s0, dtype=DTYPE)
        logdet = torch.zeros(s.shape[:-1], dtype=DTYPE)
        skip = self._identity_layers(params) if not params.tracking else [False] * len(self.layers)
        for layer, frame, idle in zip(self.layers, self.frames, skip):
            if idle:
                continue
            u = s if frame is None else s @ frame.T
            c = sphere.to_cylinder(u, check_poles=check_poles)
            theta, z, ld = layer(params, c.theta, c.z)
            c_out = CylinderCoords(theta, z)
            logdet = logdet + ld + sphere.log_cylinder_measure_factor(c_out) \
                - sphere.log_cylinder_measure_factor(c)
            u = sphere.from_cylinder(c_out)
            s = u if frame is None else u @ frame
        return s, logdet

    @torch.no_grad()
    def inverse(self, s, params: ParamStore | None = None):
        """Returns ``(s0, logdet)`` where ``logdet`` is the forward log-Jacobian at ``s0``."""
        params = self.params if params is None else params
        s = torch.as_tensor(s, dtype=DTYPE)
        logdet = torch.zeros(s.shape[:-1], dtype=DTYPE)
        skip = self._identity_layers(params)
        for layer, frame, idle in reversed(list(zip(self.layers, self.frames, skip))):
            if idle:
                continue
            u = s if frame is None else s @ frame.T
            c_out = sphere.to_cylinder(u)
            theta, z, ld_inv = layer(params, c_out.theta, c_out.z, inverse=True)
            c = CylinderCoords(theta, z)
            logdet = logdet - ld_inv + sphere.log_cylinder_measure_factor(c_out) \
                - sphere.log_cylinder_measure_factor(c)
            u = sphere.from_cylinder(c)
            s = u if frame is None else u @ frame
        return s, logdet


def flow_forward(flow: SphericalFlow, s0):
    with torch.no_grad():
        s, logdet = flow.forward(s0)
    return s, logdet


def flow_log_density(flow: SphericalFlow, s) -> torch.Tensor:
    """``log q(s) = log U - logdet(f^{-1}(s))``."""
    _, logdet = flow.inverse(s)
    return sphere.log_uniform_density(flow.n) - logdet


def flow_sample(flow: SphericalFlow, rng: np.random.Generator, size: int):
    """Draw ``size`` points from the flow; returns numpy ``(s, log_q, s0)``.

    Rows that hit a chart pole or produce non-finite values are redrawn.
    """
    s0 = sphere.sample_uniform(flow.n, rng, size)
    s, logdet = _forward_nograd(flow, s0)
    for _ in range(MAX_RESAMPLE):
        bad = ~(np.isfinite(logdet) & np.all(np.isfinite(s), axis=-1))
        if not bad.any():
            break
        s0[bad] = sphere.sample_uniform(flow.n, rng, int(bad.sum()))
        s[bad], logdet[bad] = _forward_nograd(flow, s0[bad])
    else:
        raise sphere.ChartError("flow sampling kept hitting chart poles")
    return s, sphere.log_uniform_density(flow.n) - logdet, s0


def _forward_nograd(flow, s0):
    with torch.no_grad():
        s, logdet = flow.forward(torch.from_numpy(s0), check_poles=False)
    return s.numpy(), logdet.numpy()


def init_params(spec: FlowSpec, seed: int) -> ParamStore:
    """Fresh parameters: fan-in uniform hidden layers, zero output layers (identity flow)."""
    layout = SphericalFlow(spec).layout
    return ParamStore(layout, init_values(layout, seed))


def build_flow(spec: FlowSpec, seed: int = 0) -> SphericalFlow:
    return SphericalFlow(spec, init_params(spec, seed))


def randomize_outputs(flow: SphericalFlow, seed: int, scale: float = 0.5) -> SphericalFlow:
    """Perturb the zero output layers so the flow is a non-trivial diffeomorphism (tests)."""
    rng = np.random.default_rng(seed)
    values = flow.params.values.detach().clone()
    for layer in flow.layers:
        for c in layer.conditioners:
            for name in c.output_names():
                seg = flow.params.segment(name)
                values[seg.offset:seg.offset + seg.size] = torch.from_numpy(
                    rng.normal(0.0, scale, seg.size))
    return SphericalFlow(flow.spec, flow.params.with_values(values))
