"""Dense 3D voxel grids, exact Euclidean distance transform and raw volume I/O.

Arrays are indexed ``[x, y, z]``. Linear voxel indices use the x-fastest
layout ``x + nx * (y + ny * z)`` (numpy ``order="F"``), which is also the
byte order of the payload files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy import ndimage

from .errors import FormatError

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u16": np.dtype("<u2")}


class VolumeFormatError(FormatError):
    """Malformed header, payload size mismatch or unknown dtype."""


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for n in (self.nx, self.ny, self.nz):
            if int(n) != n or n < 1:
                raise ValueError(f"grid dims must be positive integers, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @classmethod
    def of(cls, dims) -> "GridDims":
        if isinstance(dims, GridDims):
            return dims
        nx, ny, nz = (int(d) for d in dims)
        return cls(nx, ny, nz)


class _Volume:
    dtype_name = ""

    def __init__(self, data: np.ndarray, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        self.data = self._coerce(data)
        self.dims = GridDims(*data.shape)
        self.spacing = tuple(float(s) for s in spacing)

    def _coerce(self, data):
        raise NotImplementedError

    def linear(self) -> np.ndarray:
        """Data flattened in x-fastest order."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.dims == other.dims
            and self.data.tobytes(order="F") == other.data.tobytes(order="F")
        )

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims.shape})"


class ScalarVolume(_Volume):
    """Real-valued grid (centerness scores, probabilities), stored as float32."""

    dtype_name = "f32"

    def _coerce(self, data):
        out = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(out)):
            raise ValueError("scalar volume contains non-finite values")
        return out


class LabelVolume(_Volume):
    """Small-integer class labels, 0 is background."""

    dtype_name = "u8"

    def _coerce(self, data):
        if data.size and (data.min() < 0 or data.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must fit in u16")
        if data.size and data.max() > 255:
            self.dtype_name = "u16"
            return np.ascontiguousarray(data, dtype=np.uint16)
        return np.ascontiguousarray(data, dtype=np.uint8)


class BinaryMask(_Volume):
    dtype_name = "u8"

    def _coerce(self, data):
        return np.ascontiguousarray(data, dtype=bool)

    @property
    def count(self) -> int:
        return int(self.data.sum())


Volume = Union[ScalarVolume, LabelVolume, BinaryMask]


def linear_index(voxels, dims) -> np.ndarray:
    """x-fastest linear index of integer voxel coordinates (shape (n, 3))."""
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    return np.ravel_multi_index(v.T, GridDims.of(dims).shape, order="F")


def voxel_of(index, dims) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(index), GridDims.of(dims).shape, order="F"), axis=-1)


def euclidean_distance_transform(mask: BinaryMask) -> ScalarVolume:
    """Exact Euclidean distance (voxel units) from every voxel to the nearest true voxel.

    The nearest-voxel field comes from scipy's exact feature transform; the
    distance itself is evaluated here as sqrt of an integer squared distance,
    so it is identical to a brute-force nearest-neighbor search.
    """
    if not mask.data.any():
        raise ValueError("no foreground")
    idx = ndimage.distance_transform_edt(~mask.data, return_distances=False, return_indices=True)
    grid = np.indices(mask.data.shape)
    sq = ((idx - grid).astype(np.int64) ** 2).sum(axis=0)
    return ScalarVolume(np.sqrt(sq.astype(np.float64)), spacing=mask.spacing)


def masked_values(vol: ScalarVolume, mask: LabelVolume, label_predicate: Callable = lambda lab: lab > 0):
    """(linear index, value) for voxels whose label satisfies the predicate, ascending index."""
    if vol.dims != mask.dims:
        raise ValueError(f"dims mismatch: {vol.dims.shape} vs {mask.dims.shape}")
    labels = mask.linear()
    keep = np.asarray(label_predicate(labels), dtype=bool)
    idx = np.flatnonzero(keep)
    values = vol.linear()[idx]
    return [(int(i), float(v)) for i, v in zip(idx, values)]


def _payload_path(header: Path) -> Path:
    return header.with_suffix(".raw")


def write_volume(vol: Volume, path) -> Path:
    """Write ``path`` (JSON header) plus a sibling ``.raw`` little-endian payload."""
    path = Path(path)
    kind = {ScalarVolume: "scalar", LabelVolume: "label", BinaryMask: "mask"}[type(vol)]
    header = {
        "dims": list(vol.dims.shape),
        "spacing": list(vol.spacing),
        "dtype": vol.dtype_name,
        "order": "x-fastest",
        "kind": kind,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n")
    payload = vol.linear().astype(_DTYPES[vol.dtype_name], copy=False)
    _payload_path(path).write_bytes(payload.tobytes())
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        dims = GridDims.of(header["dims"])
        dtype_name = header["dtype"]
        order = header.get("order", "x-fastest")
        spacing = header.get("spacing", [1.0, 1.0, 1.0])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed volume header {path}: {exc}") from exc
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype_name!r} in {path}")
    if order != "x-fastest":
        raise VolumeFormatError(f"unsupported order {order!r} in {path}")
    dtype = _DTYPES[dtype_name]
    raw = _payload_path(path).read_bytes()
    if len(raw) != dims.size * dtype.itemsize:
        raise VolumeFormatError(
            f"payload size mismatch in {path}: expected {dims.size * dtype.itemsize} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(dims.shape, order="F")
    kind = header.get("kind", "scalar" if dtype_name == "f32" else "label")
    if kind == "scalar":
        if dtype_name != "f32":
            raise VolumeFormatError(f"scalar volume must be f32, got {dtype_name}")
        return ScalarVolume(data, spacing)
    if kind == "mask":
        return BinaryMask(data != 0, spacing)
    if kind == "label":
        return LabelVolume(data, spacing)
    raise VolumeFormatError(f"unknown volume kind {kind!r} in {path}")
