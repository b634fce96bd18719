"""Matrix-free linear operators, the exact LU determinant oracle, and fixtures.

Estimators only ever call :meth:`LinearOperator.matvec` (numpy) or
:meth:`LinearOperator.matvec_torch` (differentiable, used in training).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


class OperatorError(ValueError):
    pass


class LinearOperator:
    """Square linear map of dimension ``n`` accessed through matrix-vector products."""

    n: int

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Apply to a vector ``(n,)`` or a batch of row vectors ``(B, n)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n or x.ndim not in (1, 2):
            raise OperatorError(f"expected shape (n,) or (B, n) with n={self.n}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise OperatorError("matvec input contains non-finite entries")
        return self._matvec(x)

    def matvec_torch(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n:
            raise OperatorError(f"expected trailing dimension {self.n}, got {tuple(x.shape)}")
        return self._matvec_torch(x)

    def _matvec(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _matvec_torch(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def materialize(self) -> "DenseOperator":
        """Dense matrix whose column j is ``matvec(e_j)``."""
        cols = self.matvec(np.eye(self.n))  # row j = A e_j
        return DenseOperator(cols.T.copy())

    def scaled(self, c: float) -> "LinearOperator":
        return ScaledOperator(self, float(c))


@dataclass(frozen=True, eq=False)
class DenseOperator(LinearOperator):
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise OperatorError(f"dense operator must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise OperatorError("dense operator has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "_t", torch.from_numpy(a.copy()))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def _matvec(self, x):
        return x @ self.entries.T

    def _matvec_torch(self, x):
        return x @ self._t.T

    def materialize(self) -> "DenseOperator":
        return self


class Orientation(str, Enum):
    CORRELATION = "correlation"
    CONVOLUTION = "convolution"


@dataclass(frozen=True, eq=False)
class ConvOperator(LinearOperator):
    """3x3 filter applied to a square image, zero padding, stride 1.

    ``correlation`` computes ``y[i,j] = sum_{a,b} k[a,b] x[i+a-1, j+b-1]``;
    ``convolution`` uses the 180-degree-rotated filter.
    """

    filter: np.ndarray
    image_side: int = 4
    orientation: Orientation = Orientation.CORRELATION

    def __post_init__(self):
        k = np.array(self.filter, dtype=np.float64)
        if k.shape != (3, 3) or not np.all(np.isfinite(k)):
            raise OperatorError("conv filter must be a finite 3x3 array")
        if int(self.image_side) < 1:
            raise OperatorError("image_side must be positive")
        orient = Orientation(self.orientation)
        k.setflags(write=False)
        object.__setattr__(self, "filter", k)
        object.__setattr__(self, "image_side", int(self.image_side))
        object.__setattr__(self, "orientation", orient)
        eff = k if orient is Orientation.CORRELATION else k[::-1, ::-1]
        object.__setattr__(self, "_kernel", np.ascontiguousarray(eff))
        object.__setattr__(self, "_kt", torch.from_numpy(eff.copy()).view(1, 1, 3, 3))

    @property
    def n(self) -> int:
        return self.image_side ** 2

    def _matvec(self, x):
        m = self.image_side
        img = x.reshape(x.shape[:-1] + (m, m))
        pad = np.zeros(x.shape[:-1] + (m + 2, m + 2))
        pad[..., 1:-1, 1:-1] = img
        out = np.zeros_like(img)
        for a in range(3):
            for b in range(3):
                out += self._kernel[a, b] * pad[..., a:a + m, b:b + m]
        return out.reshape(x.shape)

    def _matvec_torch(self, x):
        m = self.image_side
        lead = x.shape[:-1]
        img = x.reshape(-1, 1, m, m)
        out = F.conv2d(img, self._kt, padding=1)
        return out.reshape(lead + (m * m,))

    def flipped(self) -> "ConvOperator":
        other = (Orientation.CONVOLUTION if self.orientation is Orientation.CORRELATION
                 else Orientation.CORRELATION)
        return ConvOperator(self.filter, self.image_side, other)


@dataclass(frozen=True, eq=False)
class ScaledOperator(LinearOperator):
    base: LinearOperator
    c: float

    @property
    def n(self) -> int:
        return self.base.n

    def _matvec(self, x):
        return self.c * self.base._matvec(x)

    def _matvec_torch(self, x):
        return self.c * self.base._matvec_torch(x)


def matvec(op: LinearOperator, x) -> np.ndarray:
    return op.matvec(x)


def materialize(op: LinearOperator) -> DenseOperator:
    return op.materialize()


# --- exact oracle ---------------------------------------------------------

def lu_decompose(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """In-place-style Doolittle LU with partial pivoting.

    Returns ``(lu, perm, n_swaps)`` where ``lu`` packs unit-lower L below the
    diagonal and U on and above it, and ``a[perm] = L @ U``.
    """
    lu = np.array(a, dtype=np.float64)
    n = lu.shape[0]
    perm = np.arange(n)
    swaps = 0
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            swaps += 1
        pivot = lu[k, k]
        if pivot == 0.0:
            continue
        lu[k + 1:, k] /= pivot
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm, swaps


def exact_logabsdet(op) -> tuple[int, float]:
    """``(sign, log|det|)`` via LU; singular matrices give ``(0, -inf)``."""
    a = op.entries if isinstance(op, DenseOperator) else np.asarray(op, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise OperatorError(f"determinant needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise OperatorError("matrix has non-finite entries")
    lu, _, swaps = lu_decompose(a)
    diag = np.diag(lu)
    if np.any(diag == 0.0):
        return 0, -math.inf
    sign = (-1) ** swaps * int(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def oracle_logabsdet(op: LinearOperator) -> float:
    """log|det| of any operator via materialization; raises if singular."""
    sign, logabs = exact_logabsdet(op.materialize())
    if sign == 0:
        raise OperatorError("operator is singular")
    return logabs


# --- fixtures -------------------------------------------------------------

COVER_3X3 = [
    [-0.7056, 0.6741, -0.5454],
    [0.9107, 1.0682, 0.1424],
    [-1.2754, -0.1769, 1.0084],
]

CONV_FILTER = [
    [-0.107, -0.689, -0.027],
    [0.226, 1.393, -0.544],
    [-0.28, -0.467, 0.024],
]

DENSE_10X10 = {
    "A1": [
        [-1.08, -0.6, 0.06, 0.71, -0.81, 0.57, 0.69, 0.51, -0.94, 0.18],
        [-0.55, 1.5, 1.39, -0.18, -0.56, -0.05, 0.98, 1.82, 1.48, 0.01],
        [-0.26, -2.07, -1.12, -0.27, -1.03, 0.97, -1.84, -0.5, -0.47, -1.17],
        [1.01, -1.25, 1.71, 1.24, -0.79, -0.17, -1.05, 0.44, 0.02, 0.04],
        [1.24, -0.31, -0.18, -0.74, -0.43, 0.29, -0.67, 1.43, -1.01, -0.17],
        [-0.49, -1.17, 0.43, 1.4, 1.28, 1.8, -0.45, 1.67, -0.93, -1.72],
        [0.78, 1.19, 0.02, -0.06, 0.72, -1.24, -1.19, -0.71, 1.73, 0.81],
        [0.53, 1.56, -1.09, 0.33, -0.29, -0.47, 1.02, 1.67, -0.17, 0.26],
        [1.16, -0.18, 0.86, 0.94, 0.26, -1.64, -0.38, -0.31, -0.79, 1.31],
        [0.54, 1.39, -0.21, -0.12, 0.14, 0.8, 0.78, 0.85, -1.3, -0.41],
    ],
    "A2": [
        [-1.92, -0.19, 0.34, 0.41, -0.58, -2.08, 0.29, -0.46, -1.37, -0.45],
        [-0.56, 0.71, 0.06, 0.17, 1.44, -1.81, -1.19, 1.02, -2.84, 2.28],
        [1.64, 0.14, -1.86, 0.23, 0.85, 1.33, -0.88, -0.73, -0.53, 2.09],
        [-0.11, -0.43, 0.68, -1.45, 0.08, 0.81, 0.53, 0.41, 0.41, -0.27],
        [-0.05, 0.05, 0.7, -1.09, 1.77, -0.79, -0.35, 1.71, 0.85, 0.8],
        [1.24, -0.22, 0.41, -1.02, -0.64, -0.21, -1.25, 0.71, 0.6, -0.75],
        [0.71, -0.91, -0.11, 0.18, 1.13, -0.48, 1.85, -0.03, 0.29, -1.25],
        [0.52, -1.06, 0.48, -2.26, 1.52, -0.63, 1.26, -1.42, -0.02, -1.66],
        [-1.01, -1.23, 0.42, -0.37, 1.0, -0.04, -0.32, 0.52, -1.91, -1.78],
        [0.89, -0.1, -0.39, -0.52, 0.21, -0.99, 0.48, 0.22, 0.77, -0.19],
    ],
    "A3": [
        [-0.15, -1.65, -0.95, 0.26, 1.35, -0.1, 0.37, 0.45, 0.23, -1.12],
        [0.61, -1.81, -0.68, 0.58, 0.94, 2.36, -0.49, 0.04, 0.86, 0.52],
        [1.91, -1.44, -0.51, 0.96, -2.56, -0.01, -1.13, 0.19, -2.5, 0.68],
        [0.93, -1.3, -0.65, -1.9, -0.09, 0.24, 0.69, 1.28, -0.57, -0.39],
        [0.55, -1.34, -1.37, -1.29, -0.28, -0.67, 0.77, -0.25, 0.85, -2.89],
        [-0.86, 1.95, -1.33, 0.68, 0.27, 0.25, 0.29, -1.29, 2.05, 0.11],
        [0.82, 0.52, -0.71, -0.59, -1.57, -1.05, 0.46, -0.61, 0.63, 2.02],
        [0.76, 0.01, -0.06, -0.43, 1.12, 1.05, -1.35, -0.04, -0.62, -0.35],
        [-2.13, -0.8, 1.12, 1.77, -0.79, -0.1, 1.17, -1.06, -0.37, 0.01],
        [-0.86, 1.44, -0.55, 1.19, 2.52, 0.81, -0.36, -0.61, 1.24, -0.06],
    ],
    "A4": [
        [-0.31, -0.68, -0.22, -0.28, 1.64, -0.41, -0.66, -0.59, 1.57, 0.38],
        [-0.15, 0.6, 1.08, 1.29, -0.12, 1.89, -1.85, -0.11, 1.5, 0.72],
        [0.88, -1.71, 0.69, -1.75, -0.06, 0.9, 0.08, -0.11, -0.21, 1.75],
        [0.31, -1.4, -1.79, 0.17, 0.57, -0.86, 1.64, -1.55, 0.91, -2.06],
        [1.1, -1.19, 0.47, -0.84, 0.37, 0.25, 0.03, -0.23, 1.32, 0.36],
        [0.43, -0.02, -0.04, 1.19, 0.2, -1.13, 1.36, 1.23, -0.01, 2.08],
        [-0.8, 0.48, -1.57, 0.6, -0.19, -0.18, -0.88, -1.53, -0.66, -0.83],
        [1.32, -1.09, 0.71, 1.04, 1.02, -0.09, 1.51, -0.51, -0.73, -0.82],
        [0.21, -2.07, 0.61, 0.29, 1.41, -1.93, -2.06, 0.23, -0.09, 0.24],
        [-1.36, 0.3, 0.15, 1.33, -1.1, -0.72, 0.37, 0.09, -0.56, 2.81],
    ],
    "A5": [
        [0.36, -0.95, 0.12, 0.85, -0.4, -0.1, 0.58, -0.48, 0.79, 0.12],
        [0.11, -0.02, -0.66, -0.98, -0.28, -1.61, -0.82, 1.13, 1.18, 0.33],
        [-0.7, 0.65, -1.5, -0.33, -0.18, -0.6, -0.84, -0.43, -0.42, 1.12],
        [-2.33, -0.49, 0.61, 0.88, -0.85, -0.68, 0.38, 0.53, 0.34, 1.59],
        [0.43, 1.61, -0.14, 1.15, -1.25, 2.28, -0.32, -0.36, -2.1, 0.98],
        [-0.68, -0.54, -0.88, 1.55, 0.7, -1.34, 0.15, -0.27, -0.86, 1.35],
        [-0.83, -0.52, -0.83, -1.98, 1.79, -0.86, 0.05, 1.29, 0.1, 1.17],
        [-1.34, -0.66, 0.12, -0.95, -0.46, 2.15, -0.67, -0.77, 1.87, 1.4],
        [0.54, -0.51, 0.16, 1.38, 1.49, 0.61, 0.22, 0.64, -0.27, -0.47],
        [0.62, -0.24, -0.11, 0.27, -0.48, 0.75, 0.59, 0.41, -0.81, 0.07],
    ],
}

# |det| reference values for the rounded matrices above
REFERENCE_ABS_DET = {"A1": 520.36, "A2": 748.68, "A3": 945.02, "A4": 3000.5, "A5": 252.29}
REFERENCE_CONV_DET = 7.71
REFERENCE_CONV_LOGDET = 2.04

FIXTURE_NAMES = ("A1", "A2", "A3", "A4", "A5", "cover3x3", "conv_filter", "conv16", "identity10")


def load_fixture(name: str) -> LinearOperator:
    """Operators from the embedded fixtures.

    ``conv_filter`` and ``conv16`` both return the 4x4-image convolution
    operator built from the reference 3x3 filter.
    """
    if name in DENSE_10X10:
        return DenseOperator(np.array(DENSE_10X10[name]))
    if name == "cover3x3":
        return DenseOperator(np.array(COVER_3X3))
    if name in ("conv_filter", "conv16"):
        return ConvOperator(np.array(CONV_FILTER), image_side=4)
    if name == "identity10":
        return DenseOperator(np.eye(10))
    raise OperatorError(f"unknown fixture {name!r}; known: {', '.join(FIXTURE_NAMES)}")


def operator_from_dict(d: dict) -> LinearOperator:
    kind = d.get("type")
    if kind == "dense":
        return DenseOperator(np.array(d["entries"], dtype=np.float64))
    if kind == "conv":
        return ConvOperator(np.array(d["filter"], dtype=np.float64), int(d.get("image_side", 4)),
                            Orientation(d.get("orientation", "correlation")))
    raise OperatorError(f"unknown operator type {kind!r}")


def operator_to_dict(op: LinearOperator) -> dict:
    if isinstance(op, DenseOperator):
        return {"type": "dense", "entries": op.entries.tolist()}
    if isinstance(op, ConvOperator):
        return {"type": "conv", "filter": op.filter.tolist(), "image_side": op.image_side,
                "orientation": op.orientation.value}
    raise OperatorError(f"cannot serialize {type(op).__name__}")


def load_operator_file(path) -> LinearOperator:
    with open(Path(path)) as fh:
        return operator_from_dict(json.load(fh))
