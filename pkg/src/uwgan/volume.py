"""Scalar 3D/4D volumes and their on-disk formats.

Two formats are supported:

* NIfTI-1 single file (``.nii`` / ``.nii.gz``), read and written with nibabel.
* A raw little-endian float32 payload (``.raw``) next to a JSON sidecar
  (``.json``) holding ``{"dims": [...], "voxel_mm": [...], "tr_s": ...}``.
  Either file of the pair may be passed as ``path``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Raised for malformed headers or payloads that disagree with them."""


def _frozen_float32(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, order="C", copy=True)
    if not np.isfinite(arr).all():
        raise ValueError("volume contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume4D:
    """An (x, y, z, t) scalar field with voxel geometry.

    ``data`` is stored as a read-only float32 array; ``intensity_max`` is
    recomputed from it on construction.
    """

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tr_seconds: float = 1.0
    intensity_max: float = field(init=False)

    def __post_init__(self):
        arr = _frozen_float32(self.data)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"Volume4D needs 4 positive dims, got shape {arr.shape}")
        voxel = tuple(float(v) for v in self.voxel_size_mm)
        if len(voxel) != 3 or min(voxel) <= 0:
            raise ValueError(f"voxel_size_mm must be 3 positive values, got {self.voxel_size_mm}")
        if not self.tr_seconds > 0:
            raise ValueError(f"tr_seconds must be positive, got {self.tr_seconds}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size_mm", voxel)
        object.__setattr__(self, "tr_seconds", float(self.tr_seconds))
        object.__setattr__(self, "intensity_max", float(arr.max()))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def with_data(self, data) -> Volume4D:
        """New volume with the same geometry and different voxel values."""
        return Volume4D(data, self.voxel_size_mm, self.tr_seconds)


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_float32(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Volume3D needs 3 positive dims, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def _raw_pair(path: Path) -> tuple[Path, Path]:
    return path.with_suffix(".raw"), path.with_suffix(".json")


def _read_raw(path: Path) -> tuple[np.ndarray, tuple, float]:
    payload, sidecar = _raw_pair(path)
    for p in (payload, sidecar):
        if not p.exists():
            raise FileNotFoundError(p)
    try:
        header = json.loads(sidecar.read_text())
        dims = [int(d) for d in header["dims"]]
        voxel = tuple(float(v) for v in header.get("voxel_mm", (1.0, 1.0, 1.0)))
        tr = float(header.get("tr_s", 1.0))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {sidecar}: {exc}") from exc
    if len(dims) not in (3, 4) or min(dims) < 1:
        raise VolumeFormatError(f"header dims must be 3 or 4 positive ints, got {dims}")
    raw = np.fromfile(payload, dtype="<f4")
    expected = int(np.prod(dims))
    if raw.size != expected:
        raise VolumeFormatError(
            f"payload length mismatch: header dims {dims} need {expected} values, file has {raw.size}"
        )
    # payload is x-fastest (Fortran order), like NIfTI
    return raw.reshape(dims, order="F"), voxel, tr


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple, float]:
    import nibabel as nib

    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise VolumeFormatError(f"cannot read NIfTI {path}: {exc}") from exc
    zooms = tuple(float(z) for z in img.header.get_zooms())
    voxel = zooms[:3] if len(zooms) >= 3 else (1.0, 1.0, 1.0)
    tr = zooms[3] if len(zooms) >= 4 and zooms[3] > 0 else 1.0
    return data, voxel, tr


def _read_any(path) -> tuple[np.ndarray, tuple, float]:
    path = Path(path)
    if _is_nifti(path):
        return _read_nifti(path)
    if path.suffix in (".raw", ".json"):
        return _read_raw(path)
    raise VolumeFormatError(f"unrecognised volume extension: {path.name}")


def load_volume(path) -> Volume4D:
    """Load a 4D volume; 3D files load with a single frame."""
    data, voxel, tr = _read_any(path)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    if data.ndim != 4:
        raise VolumeFormatError(f"expected a 3D or 4D image, got {data.ndim}D")
    return Volume4D(data, voxel, tr)


def load_volume3d(path) -> Volume3D:
    data, _, _ = _read_any(path)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeFormatError(f"expected a 3D image, got shape {data.shape}")
    return Volume3D(data)


def save_volume(vol: Volume4D | Volume3D, path) -> None:
    """Write ``vol`` as NIfTI or raw+JSON depending on the extension of ``path``."""
    path = Path(path)
    data = np.asarray(vol.data)
    if not np.isfinite(data).all():
        raise ValueError("refusing to save non-finite data")
    if isinstance(vol, Volume4D):
        voxel, tr = vol.voxel_size_mm, vol.tr_seconds
    else:
        voxel, tr = (1.0, 1.0, 1.0), None
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        img = nib.Nifti1Image(data.astype(np.float32), np.diag([*voxel, 1.0]))
        img.header.set_data_dtype(np.float32)
        img.header.set_zooms((*voxel, tr) if tr is not None else voxel)
        img.header.set_xyzt_units("mm", "sec")
        nib.save(img, str(path))
    elif path.suffix in (".raw", ".json"):
        payload, sidecar = _raw_pair(path)
        header = {"dims": list(data.shape), "voxel_mm": list(voxel)}
        if tr is not None:
            header["tr_s"] = tr
        data.astype("<f4").ravel(order="F").tofile(payload)
        sidecar.write_text(json.dumps(header))
    else:
        raise VolumeFormatError(f"unrecognised volume extension: {path.name}")
