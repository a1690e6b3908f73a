"""3D grid value types and voxel-level utilities.

Grids are stored as numpy arrays indexed ``[x, y, z]``. The canonical flat
order is x-fastest (Fortran order), the same order NIfTI-1 uses on disk, so
``grid.flat()`` of two equal grids is byte-comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    _dtype = np.float64

    def __post_init__(self):
        arr = np.array(self.data, dtype=self._dtype, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3D, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(arr.shape, spacing)
        self._validate(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    def _validate(self, arr):
        pass

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, dims, flat, spacing=(1.0, 1.0, 1.0), **kw):
        flat = np.asarray(flat)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"flat data has {flat.size} values, dims {tuple(dims)} need {int(np.prod(dims))}")
        return cls(flat.reshape(tuple(dims), order="F"), spacing, **kw)

    def same_geometry(self, other: "_Grid") -> bool:
        return self.dims == other.dims

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing})"


@dataclass(frozen=True, eq=False)
class Volume(_Grid):
    """Dense real-valued grid (images, entropy maps, gradients)."""

    def _validate(self, arr):
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")


@dataclass(frozen=True, eq=False)
class ProbMap(Volume):
    """Volume whose values are foreground probabilities in [0, 1]."""

    def _validate(self, arr):
        super()._validate(arr)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("probability map values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    _dtype = bool

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class LabelMap(_Grid):
    """Integer labels, 0 is background and objects are 1..num_labels."""

    num_labels: int = field(default=0)

    _dtype = np.int32

    def _validate(self, arr):
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        present = np.unique(arr[arr > 0])
        if not np.array_equal(present, np.arange(1, self.num_labels + 1)):
            raise ValueError("labels must be contiguous 1..num_labels")


def _require_same_dims(a: _Grid, b: _Grid):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


def threshold(p: ProbMap, t: float = 0.5) -> BinaryMask:
    """Foreground where ``p > t``; a voxel exactly at ``t`` is background."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    return BinaryMask(p.data > t, p.spacing)


def zscore_normalize(v: Volume, region: BinaryMask | None = None) -> Volume:
    """Standardize intensities to zero mean, unit population std.

    Statistics come from ``region`` when given, otherwise the whole grid; the
    transform is applied to every voxel either way.
    """
    if region is not None:
        _require_same_dims(v, region)
        sample = v.data[region.data]
        if sample.size < 2:
            raise ValueError("region must contain at least two voxels")
    else:
        sample = v.data.ravel()
    mu = sample.mean()
    sigma = sample.std()
    if not sigma > 0:
        raise ValueError("zero variance: cannot z-score normalize")
    return Volume((v.data - mu) / sigma, v.spacing)


def connectivity_structure(connectivity: int) -> np.ndarray:
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank)


def connected_components(m: BinaryMask, connectivity: int = 26) -> LabelMap:
    """Label connected foreground regions.

    Labels are numbered by the x-fastest scan position of each region's first
    voxel.
    """
    structure = connectivity_structure(connectivity)
    # ndimage numbers regions in C-order scan; transposing makes that x-fastest.
    labels, n = ndimage.label(m.data.T, structure=structure)
    return LabelMap(labels.T, m.spacing, num_labels=int(n))


def component_volumes_ml(lm: LabelMap) -> list[tuple[int, float]]:
    if lm.num_labels == 0:
        return []
    counts = np.bincount(lm.data.ravel(), minlength=lm.num_labels + 1)[1:]
    voxel_ml = lm.voxel_volume_mm3 / 1000.0
    return [(i + 1, float(c) * voxel_ml) for i, c in enumerate(counts)]


def mask_volume_ml(m: BinaryMask) -> float:
    return m.count * m.voxel_volume_mm3 / 1000.0
