"""Flat parameter storage, conditioner networks and reverse-mode gradients.

Reverse-mode differentiation is delegated to torch autograd (float64 CPU);
this module pins down the pieces the rest of the package relies on:

* :class:`ParamStore` -- one flat vector plus an ordered ``(name, offset,
  shape)`` layout.  Sub-networks read their weights as views into it, so a
  gradient of any objective is itself one flat vector (:class:`GradStore`).
* :func:`value_and_grad` -- deterministic value and gradient; non-finite
  intermediates are reported with the name of the offending primitive.
* :class:`Conditioner` -- the 2x64 tanh coupling network.

Checkpoint layout (JSON)::

    {"format": "detflow-checkpoint/1",
     "layout": [[name, offset, [shape...], init], ...],
     "values": [float, ...],          # length == sum of segment sizes
     "step": int,
     "rng_state": {...},              # numpy bit_generator.state
     "flow_spec": {...}, "operator": {...}}   # optional extras
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float64
CHECKPOINT_FORMAT = "detflow-checkpoint/1"


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by {primitive!r} ({where} pass)")
        self.primitive = primitive
        self.where = where


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]
    init: str = "zeros"  # "zeros" | "fan_in"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


class LayoutBuilder:
    def __init__(self):
        self.segments: list[Segment] = []
        self._offset = 0

    def add(self, name: str, shape: Sequence[int], init: str = "zeros") -> str:
        if any(s.name == name for s in self.segments):
            raise ValueError(f"duplicate parameter name {name!r}")
        seg = Segment(name, self._offset, tuple(int(d) for d in shape), init)
        self.segments.append(seg)
        self._offset += seg.size
        return name


class ParamStore:
    """Flat float64 parameter vector with a named layout."""

    def __init__(self, layout: Sequence[Segment], values: torch.Tensor | None = None):
        self.layout = list(layout)
        self._index = {s.name: s for s in self.layout}
        offset = 0
        for s in self.layout:
            if s.offset != offset:
                raise ValueError(f"segment {s.name!r} is not contiguous")
            offset += s.size
        self.size = offset
        if values is None:
            values = torch.zeros(offset, dtype=DTYPE)
        if values.shape != (offset,):
            raise ValueError(f"values have shape {tuple(values.shape)}, layout needs ({offset},)")
        self.values = values
        self._views: dict[str, torch.Tensor] | None = None

    def view(self, name: str) -> torch.Tensor:
        # one split for all segments keeps the backward pass to a single concat
        if self._views is None:
            parts = self.values.split([s.size for s in self.layout])
            self._views = {s.name: t.view(s.shape) for s, t in zip(self.layout, parts)}
        return self._views[name]

    def segment(self, name: str) -> Segment:
        return self._index[name]

    def with_values(self, values: torch.Tensor) -> "ParamStore":
        return ParamStore(self.layout, values)

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.values.detach().clone())

    @property
    def tracking(self) -> bool:
        return self.values.requires_grad and torch.is_grad_enabled()

    def layout_records(self) -> list:
        return [[s.name, s.offset, list(s.shape), s.init] for s in self.layout]

    @staticmethod
    def layout_from_records(records) -> list[Segment]:
        return [Segment(r[0], int(r[1]), tuple(r[2]), r[3] if len(r) > 3 else "zeros")
                for r in records]


class GradStore:
    """Gradient accumulator sharing a :class:`ParamStore` layout."""

    def __init__(self, layout: Sequence[Segment], grads: torch.Tensor | None = None):
        self.layout = list(layout)
        size = sum(s.size for s in self.layout)
        self.grads = torch.zeros(size, dtype=DTYPE) if grads is None else grads

    def zero_(self) -> "GradStore":
        self.grads.zero_()
        return self

    def add_(self, other: "GradStore") -> "GradStore":
        self.grads += other.grads
        return self

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.grads))

    def view(self, name: str) -> torch.Tensor:
        s = next(s for s in self.layout if s.name == name)
        return self.grads[s.offset:s.offset + s.size].view(s.shape)


def init_values(layout: Sequence[Segment], seed: int) -> torch.Tensor:
    """Hidden layers ~ U(+-1/sqrt(fan_in)); everything else zero."""
    rng = np.random.default_rng(seed)
    out = np.zeros(sum(s.size for s in layout))
    for s in layout:
        if s.init == "fan_in":
            bound = 1.0 / math.sqrt(s.shape[0])
            out[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, s.size)
    return torch.from_numpy(out)


# --- reverse mode -----------------------------------------------------------

class _FiniteCheckMode(TorchFunctionMode):
    """Re-execution mode that names the first primitive producing inf/nan."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, torch.Tensor) and out.is_floating_point():
            if not bool(torch.isfinite(out.detach()).all()):
                raise NonFiniteError(getattr(func, "__name__", str(func)))
        return out


_ANOMALY_RE = re.compile(r"Function '(\w+?)(?:Backward\d*)?' returned nan")


def _locate_nonfinite(objective, params: ParamStore, backward: bool) -> NonFiniteError:
    if not backward:
        try:
            with torch.no_grad(), _FiniteCheckMode():
                objective(params.with_values(params.values.detach().clone()))
        except NonFiniteError as err:
            return err
        return NonFiniteError("unknown")
    values = params.values.detach().clone().requires_grad_(True)
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            objective(params.with_values(values)).backward()
    except RuntimeError as err:
        m = _ANOMALY_RE.search(str(err))
        return NonFiniteError(m.group(1).lower() if m else "unknown", "backward")
    return NonFiniteError("unknown", "backward")


def value_and_grad(objective: Callable[[ParamStore], torch.Tensor],
                   params: ParamStore) -> tuple[float, GradStore]:
    """Scalar value of ``objective(params)`` and its gradient w.r.t. ``params.values``."""
    values = params.values.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = objective(params.with_values(values))
        if out.ndim != 0:
            raise ValueError("objective must return a scalar tensor")
        if not bool(torch.isfinite(out.detach())):
            raise _locate_nonfinite(objective, params, backward=False)
        (grad,) = torch.autograd.grad(out, values, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(values)
    if not bool(torch.isfinite(grad).all()):
        raise _locate_nonfinite(objective, params, backward=True)
    return float(out.detach()), GradStore(params.layout, grad.detach())


# --- conditioner --------------------------------------------------------------

class Conditioner:
    """Feed-forward ``in -> 64 -> 64 -> out`` tanh network reading from a ParamStore.

    The last layer is zero-initialized so the network outputs exactly zero raw
    parameters, which every transform interprets as the identity.  A network
    with no inputs returns only its output bias (a free parameter vector).
    """

    def __init__(self, builder: LayoutBuilder, prefix: str, in_dim: int, out_dim: int,
                 hidden: Sequence[int] = (64, 64)):
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights: list[tuple[str, str]] = []
        if in_dim == 0:
            self.weights.append(("", builder.add(f"{prefix}.bias", (out_dim,))))
            return
        dims = [in_dim, *hidden, out_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            w = builder.add(f"{prefix}.W{i}", (a, b), "zeros" if last else "fan_in")
            bias = builder.add(f"{prefix}.b{i}", (b,))
            self.weights.append((w, bias))

    def forward(self, params: ParamStore, x: torch.Tensor | None, batch_shape=()) -> torch.Tensor:
        if self.in_dim == 0:
            bias = params.view(self.weights[0][1])
            return bias.expand(tuple(batch_shape) + (self.out_dim,))
        if x is None or x.shape[-1] != self.in_dim:
            got = None if x is None else x.shape[-1]
            raise ValueError(f"{self.prefix}: expected {self.in_dim} inputs, got {got}")
        h = x
        for i, (w, b) in enumerate(self.weights):
            h = h @ params.view(w) + params.view(b)
            if i < len(self.weights) - 1:
                h = torch.tanh(h)
        return h

    def output_names(self) -> list[str]:
        return [n for n in self.weights[-1] if n]

    def is_zero_output(self, params: ParamStore) -> bool:
        return all(bool((params.view(n) == 0).all()) for n in self.output_names())


def conditioner_forward(c: Conditioner, inputs, params: ParamStore) -> torch.Tensor:
    x = torch.as_tensor(inputs, dtype=DTYPE)
    return c.forward(params, x, batch_shape=x.shape[:-1])


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, step: int = 0, rng_state=None, **extra) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "layout": params.layout_records(),
        "values": params.values.detach().tolist(),
        "step": int(step),
        "rng_state": rng_state,
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a detflow checkpoint")
    layout = ParamStore.layout_from_records(doc["layout"])
    values = torch.tensor(doc["values"], dtype=DTYPE)
    return ParamStore(layout, values), doc
