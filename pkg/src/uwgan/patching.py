"""Slice-based / time-based 4D configurations and cubic patch tiling.

A 4D volume (m, n, q, t) is flattened into a 3D volume (m, n, q*t) in one of
two orders, then cut into s*s*s patches. The third-axis index of the merged
volume is ``frame * q + slice`` for the slice-based mode and
``slice * t + frame`` for the time-based mode.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from uwgan.volume import Volume3D, Volume4D


class ConfigMode(str, enum.Enum):
    SLICE_BASED = "xyz"
    TIME_BASED = "xyt"

    @classmethod
    def parse(cls, value) -> ConfigMode:
        if isinstance(value, cls):
            return value
        aliases = {"slice": cls.SLICE_BASED, "slice-based": cls.SLICE_BASED, "time": cls.TIME_BASED, "time-based": cls.TIME_BASED}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


def merge(vol: Volume4D, mode: ConfigMode) -> Volume3D:
    mode = ConfigMode.parse(mode)
    m, n, q, t = vol.dims
    if mode is ConfigMode.SLICE_BASED:
        merged = vol.data.transpose(0, 1, 3, 2).reshape(m, n, t * q)
    else:
        merged = vol.data.reshape(m, n, q * t)
    return Volume3D(merged)


def unmerge(merged: Volume3D, mode: ConfigMode, source_dims, voxel_size_mm=(1.0, 1.0, 1.0), tr_seconds: float = 1.0) -> Volume4D:
    mode = ConfigMode.parse(mode)
    m, n, q, t = (int(d) for d in source_dims)
    if merged.dims != (m, n, q * t):
        raise ValueError(f"merged dims {merged.dims} do not match source dims {(m, n, q, t)} (need {(m, n, q * t)})")
    if mode is ConfigMode.SLICE_BASED:
        data = merged.data.reshape(m, n, t, q).transpose(0, 1, 3, 2)
    else:
        data = merged.data.reshape(m, n, q, t)
    return Volume4D(data, voxel_size_mm, tr_seconds)


def _count(length: int, size: int, stride: int) -> int:
    return math.ceil(max(length - size, 0) / stride) + 1


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of a patch tiling over a merged (m, n, L) volume.

    ``pad`` is the zero padding appended at the high end of each axis. With
    stride equal to the patch size and m, n divisible by it (the standard
    protocol) only the third axis is padded.
    """

    merged_dims: tuple[int, int, int]
    patch_size: int
    stride: int
    mode: ConfigMode | None = None
    source_dims: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        m, n, _ = self.merged_dims
        if self.patch_size > m or self.patch_size > n:
            raise ValueError(f"patch size {self.patch_size} exceeds in-plane dims {(m, n)}")

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(_count(d, self.patch_size, self.stride) for d in self.merged_dims)

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        return tuple((c - 1) * self.stride + self.patch_size for c in self.counts)

    @property
    def pad(self) -> tuple[int, int, int]:
        return tuple(p - d for p, d in zip(self.padded_dims, self.merged_dims))

    @property
    def pad_z(self) -> int:
        return self.pad[2]

    @property
    def total(self) -> int:
        cx, cy, cz = self.counts
        return cx * cy * cz

    def origin(self, index: int) -> tuple[int, int, int]:
        """Corner of patch ``index`` in the padded volume (row-major over counts)."""
        _, cy, cz = self.counts
        ix, rem = divmod(index, cy * cz)
        iy, iz = divmod(rem, cz)
        return ix * self.stride, iy * self.stride, iz * self.stride


@dataclass(frozen=True)
class PatchSet:
    grid: PatchGrid
    patches: np.ndarray  # (N, s, s, s) float32

    def __post_init__(self):
        s = self.grid.patch_size
        arr = np.asarray(self.patches)
        if arr.ndim != 4 or arr.shape[1:] != (s, s, s):
            raise ValueError(f"patches must have shape (N, {s}, {s}, {s}), got {arr.shape}")
        if arr.shape[0] != self.grid.total:
            raise ValueError(f"grid expects {self.grid.total} patches, got {arr.shape[0]}")

    def __len__(self) -> int:
        return self.patches.shape[0]

    def __getitem__(self, i) -> Volume3D:
        return Volume3D(self.patches[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def replace(self, patches) -> PatchSet:
        """Same grid, new patch values (e.g. network outputs)."""
        return PatchSet(self.grid, np.asarray(patches, dtype=np.float32).reshape(self.patches.shape))


def extract_patches(merged: Volume3D, patch_size: int, stride: int | None = None, *, mode=None, source_dims=None) -> PatchSet:
    stride = patch_size if stride is None else stride
    grid = PatchGrid(merged.dims, int(patch_size), int(stride),
                     ConfigMode.parse(mode) if mode is not None else None,
                     tuple(source_dims) if source_dims is not None else None)
    padded = np.pad(merged.data, [(0, p) for p in grid.pad])
    s = grid.patch_size
    if grid.stride == s:
        cx, cy, cz = grid.counts
        patches = padded.reshape(cx, s, cy, s, cz, s).transpose(0, 2, 4, 1, 3, 5).reshape(-1, s, s, s)
    else:
        windows = sliding_window_view(padded, (s, s, s))[:: grid.stride, :: grid.stride, :: grid.stride]
        patches = windows.reshape(-1, s, s, s)
    return PatchSet(grid, np.ascontiguousarray(patches, dtype=np.float32))


def reassemble(patches: PatchSet) -> Volume3D:
    """Inverse of :func:`extract_patches`; padding is discarded.

    Overlapping tilings are written in patch order, later patches win.
    """
    grid = patches.grid
    s = grid.patch_size
    arr = np.asarray(patches.patches)
    if arr.shape != (grid.total, s, s, s):
        raise ValueError(f"patch array {arr.shape} inconsistent with grid ({grid.total}, {s}, {s}, {s})")
    if grid.stride == s:
        cx, cy, cz = grid.counts
        padded = arr.reshape(cx, cy, cz, s, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(grid.padded_dims)
    else:
        padded = np.zeros(grid.padded_dims, dtype=np.float32)
        for i in range(grid.total):
            x, y, z = grid.origin(i)
            padded[x:x + s, y:y + s, z:z + s] = arr[i]
    m, n, L = grid.merged_dims
    return Volume3D(padded[:m, :n, :L])


def patchify(vol: Volume4D, mode: ConfigMode, patch_size: int, stride: int | None = None) -> PatchSet:
    """merge + extract_patches, recording the mode and source dims on the grid."""
    return extract_patches(merge(vol, mode), patch_size, stride, mode=mode, source_dims=vol.dims)


def unpatchify(patches: PatchSet, voxel_size_mm=(1.0, 1.0, 1.0), tr_seconds: float = 1.0) -> Volume4D:
    grid = patches.grid
    if grid.mode is None or grid.source_dims is None:
        raise ValueError("patch grid carries no mode/source dims; use reassemble + unmerge")
    return unmerge(reassemble(patches), grid.mode, grid.source_dims, voxel_size_mm, tr_seconds)
