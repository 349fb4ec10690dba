"""Rectangular N-D grids and scalar fields sampled on them.

Values are stored as C-ordered (row-major) numpy arrays, so ``field.values.ravel()``
is the flat layout used on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

_BOUND_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned lattice.

    Non-periodic axes hold ``n`` nodes from ``lo`` to ``hi`` inclusive. Periodic
    axes hold ``n`` nodes on ``[lo, hi)``; ``hi`` is identified with ``lo``.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]
    periodic: tuple[bool, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        d = len(self.lo)
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * d)
        else:
            object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i}" for i in range(d)))
        else:
            object.__setattr__(self, "names", tuple(str(v) for v in self.names))
        if not (len(self.hi) == len(self.n) == len(self.periodic) == len(self.names) == d):
            raise ValueError("GridSpec fields must all have one entry per axis")
        if d == 0:
            raise ValueError("GridSpec needs at least one axis")
        for i in range(d):
            if not self.hi[i] > self.lo[i]:
                raise ValueError(f"axis {i} ({self.names[i]}): hi must exceed lo")
            if self.n[i] < 2:
                raise ValueError(f"axis {i} ({self.names[i]}): need at least 2 points")

    @property
    def ndim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (h - l) / (n if p else n - 1)
            for l, h, n, p in zip(self.lo, self.hi, self.n, self.periodic)
        )

    @property
    def strides(self) -> tuple[int, ...]:
        """Element strides of the flat row-major layout."""
        out = [1] * self.ndim
        for i in range(self.ndim - 2, -1, -1):
            out[i] = out[i + 1] * self.n[i + 1]
        return tuple(out)

    def axis(self, i: int) -> np.ndarray:
        return self.lo[i] + self.spacing[i] * np.arange(self.n[i])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(i) for i in range(self.ndim)]

    def coords(self) -> list[np.ndarray]:
        """Per-axis coordinates shaped for broadcasting against the full grid."""
        out = []
        for i in range(self.ndim):
            shape = [1] * self.ndim
            shape[i] = self.n[i]
            out.append(self.axis(i).reshape(shape))
        return out

    def points(self) -> np.ndarray:
        """All nodes as an ``(size, ndim)`` array in flat order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def subspec(self, keep: Sequence[int]) -> "GridSpec":
        return GridSpec(
            tuple(self.lo[i] for i in keep),
            tuple(self.hi[i] for i in keep),
            tuple(self.n[i] for i in keep),
            tuple(self.periodic[i] for i in keep),
            tuple(self.names[i] for i in keep),
        )

    def contains(self, point: Sequence[float]) -> bool:
        for i, x in enumerate(point):
            if self.periodic[i]:
                continue
            if x < self.lo[i] - _BOUND_TOL or x > self.hi[i] + _BOUND_TOL:
                return False
        return True

    def nearest_index(self, i: int, x: float) -> int:
        k = int(round((x - self.lo[i]) / self.spacing[i]))
        if self.periodic[i]:
            return k % self.n[i]
        return min(max(k, 0), self.n[i] - 1)

    def to_json(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "n": list(self.n),
            "periodic": list(self.periodic),
            "names": list(self.names),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(
            tuple(d["lo"]),
            tuple(d["hi"]),
            tuple(d["n"]),
            tuple(d.get("periodic", ())),
            tuple(d.get("names", ())),
        )


class ScalarField:
    """Immutable real-valued field on a :class:`GridSpec`."""

    def __init__(self, spec: GridSpec, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.size != spec.size:
            raise ValueError(f"field has {arr.size} values, grid needs {spec.size}")
        arr = arr.reshape(spec.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        arr.flags.writeable = False
        self.spec = spec
        self.values = arr

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_function(cls, spec: GridSpec, fn) -> "ScalarField":
        """Sample ``fn(*coords)`` where each coord broadcasts against the grid."""
        vals = np.broadcast_to(fn(*spec.coords()), spec.shape)
        return cls(spec, vals)

    def __repr__(self):
        return f"ScalarField(shape={self.spec.shape}, min={self.values.min():.4g}, max={self.values.max():.4g})"


def _locate(spec: GridSpec, points: np.ndarray):
    """Lower cell index and fractional offset along each axis for ``(m, d)`` points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != spec.ndim:
        raise ValueError(f"expected points with {spec.ndim} coordinates")
    idx = np.empty(points.shape, dtype=np.int64)
    frac = np.empty(points.shape)
    for i in range(spec.ndim):
        lo, h, n = spec.lo[i], spec.spacing[i], spec.n[i]
        x = points[:, i]
        if spec.periodic[i]:
            period = spec.hi[i] - lo
            u = np.mod(x - lo, period) / h
            k = np.floor(u).astype(np.int64)
            t = u - k
            k = np.mod(k, n)
        else:
            bad = (x < lo - _BOUND_TOL) | (x > spec.hi[i] + _BOUND_TOL)
            if np.any(bad):
                raise DomainError(
                    f"point outside grid on axis {i} ({spec.names[i]}): "
                    f"{x[bad][0]:.6g} not in [{lo:.6g}, {spec.hi[i]:.6g}]"
                )
            u = np.clip((x - lo) / h, 0.0, n - 1)
            k = np.minimum(np.floor(u).astype(np.int64), n - 2)
            t = u - k
        idx[:, i] = k
        frac[:, i] = t
    return idx, frac


def interpolate_many(field: ScalarField, points) -> np.ndarray:
    """Multilinear interpolation at each row of ``points``."""
    spec = field.spec
    idx, frac = _locate(spec, points)
    flat = field.flat
    strides = spec.strides
    out = np.zeros(idx.shape[0])
    d = spec.ndim
    for corner in range(1 << d):
        w = np.ones(idx.shape[0])
        off = np.zeros(idx.shape[0], dtype=np.int64)
        for i in range(d):
            bit = (corner >> i) & 1
            k = idx[:, i] + bit
            if spec.periodic[i]:
                k = np.mod(k, spec.n[i])
            w = w * (frac[:, i] if bit else 1.0 - frac[:, i])
            off += k * strides[i]
        out += w * flat[off]
    return out


def interpolate(field: ScalarField, point: Sequence[float]) -> float:
    """Multilinear interpolation at a single point.

    Periodic axes wrap; points outside a non-periodic axis raise
    :class:`DomainError`.
    """
    return float(interpolate_many(field, np.asarray(point, dtype=np.float64)[None, :])[0])


def upwind_derivatives(field: ScalarField, index: Sequence[int], axis: int) -> tuple[float, float]:
    """Backward and forward differences of ``field`` at a node along ``axis``.

    At a non-periodic edge the available one-sided difference fills both slots.
    """
    spec = field.spec
    if not 0 <= axis < spec.ndim:
        raise ValueError(f"axis {axis} invalid for a {spec.ndim}-D grid")
    index = tuple(int(k) for k in index)
    if len(index) != spec.ndim or any(not 0 <= k < n for k, n in zip(index, spec.n)):
        raise ValueError(f"index {index} invalid for grid shape {spec.shape}")
    n = spec.n[axis]
    h = spec.spacing[axis]
    k = index[axis]

    def at(j):
        idx = list(index)
        idx[axis] = j
        return field.values[tuple(idx)]

    v = at(k)
    if spec.periodic[axis]:
        return (v - at((k - 1) % n)) / h, (at((k + 1) % n) - v) / h
    if k == 0:
        d = (at(1) - v) / h
        return d, d
    if k == n - 1:
        d = (v - at(n - 2)) / h
        return d, d
    return (v - at(k - 1)) / h, (at(k + 1) - v) / h


def upwind_arrays(values: np.ndarray, spec: GridSpec, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Whole-array version of :func:`upwind_derivatives`."""
    h = spec.spacing[axis]
    if spec.periodic[axis]:
        right = (np.roll(values, -1, axis=axis) - values) / h
        left = (values - np.roll(values, 1, axis=axis)) / h
        return left, right
    diff = np.diff(values, axis=axis) / h
    edge_lo = np.take(diff, [0], axis=axis)
    edge_hi = np.take(diff, [-1], axis=axis)
    left = np.concatenate([edge_lo, diff], axis=axis)
    right = np.concatenate([diff, edge_hi], axis=axis)
    return left, right


def project_min(field: ScalarField, keep_axes: Iterable[int]) -> ScalarField:
    """Minimum over every axis not in ``keep_axes``."""
    spec = field.spec
    keep = sorted(set(int(a) for a in keep_axes))
    if not keep or len(keep) >= spec.ndim or any(not 0 <= a < spec.ndim for a in keep):
        raise ValueError(f"keep_axes must be a nonempty strict subset of 0..{spec.ndim - 1}")
    drop = tuple(a for a in range(spec.ndim) if a not in keep)
    return ScalarField(spec.subspec(keep), field.values.min(axis=drop))


def save_field(field: ScalarField, path) -> None:
    """Write a JSON header line followed by little-endian float64 values."""
    header = json.dumps(field.spec.to_json(), sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(field.flat.astype("<f8").tobytes())


def load_field(path) -> ScalarField:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    spec = GridSpec.from_json(json.loads(raw[:nl].decode("utf-8")))
    values = np.frombuffer(raw[nl + 1:], dtype="<f8")
    return ScalarField(spec, values.astype(np.float64))
