"""NIfTI-1 single-file reader/writer and the volume containers.

Only the subset needed for the segmentation datasets is handled: 3-D
little-endian ``.nii`` / ``.nii.gz`` files with uint8, int16, float32 or
float64 voxels.  The sform rows are the authoritative affine; qform is
ignored.  Voxels are stored x-fastest (Fortran order) as the format demands,
while in memory the grid is indexed ``data[x, y, z]``.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"
INTENT_LABEL = 1002

# NIfTI datatype code -> numpy dtype (little-endian)
DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}


class VolumeFormatError(ValueError):
    """Raised for unreadable or unsupported NIfTI content."""


def _check_geometry(spacing, affine) -> tuple[tuple[float, float, float], np.ndarray]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("affine last row must be [0, 0, 0, 1]")
    return spacing, affine


@dataclass(eq=False)
class Volume:
    """Scalar 3-D image with geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    intensity_units: str = "arbitrary"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3-D, got shape {self.data.shape}")
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.spacing, self.affine = _check_geometry(self.spacing, self.affine)
        if self.intensity_units not in ("HU", "normalized", "arbitrary"):
            raise ValueError(f"unknown intensity units {self.intensity_units!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(eq=False)
class LabelVolume:
    """Integer label map; every voxel in ``[0, num_classes - 1]``."""

    data: np.ndarray
    num_classes: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"LabelVolume data must be 3-D, got shape {data.shape}")
        if data.dtype.kind == "f":
            if not np.array_equal(data, np.round(data)):
                raise ValueError("label data contains non-integer values")
        self.data = data.astype(np.int16)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background included)")
        if data.size and (data.min() < 0 or data.max() > self.num_classes - 1):
            raise ValueError(f"label values must lie in [0, {self.num_classes - 1}], "
                             f"found [{data.min()}, {data.max()}]")
        self.spacing, self.affine = _check_geometry(self.spacing, self.affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _build_header(shape, datatype: int, spacing, affine, intent_code=0, intent_p1=0.0) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 56, intent_p1)
    struct.pack_into("<h", hdr, 68, intent_code)
    struct.pack_into("<hh", hdr, 70, datatype, DTYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyz units: mm
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform unused, sform aligned
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *affine[row])
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_volume(volume: Volume | LabelVolume, path) -> None:
    """Write a NIfTI-1 file; ``.gz`` suffix selects gzip compression."""
    path = Path(path)
    if isinstance(volume, LabelVolume):
        data = volume.data.astype("<i2")
        header = _build_header(volume.shape, 4, volume.spacing, volume.affine,
                               INTENT_LABEL, float(volume.num_classes))
    else:
        data = volume.data.astype("<f4")
        header = _build_header(volume.shape, 16, volume.spacing, volume.affine)
    payload = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    try:
        if path.name.endswith(".gz"):
            # mtime pinned so identical volumes give identical files
            with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw,
                                                                   mode="wb", mtime=0) as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc.strerror}") from exc


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def read_volume(path, kind: str = "auto", num_classes: int | None = None):
    """Read a NIfTI-1 file as a :class:`Volume` or :class:`LabelVolume`.

    ``kind="auto"`` returns a label map when the header carries the label
    intent (as :func:`write_volume` sets it), an image otherwise.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI files are not supported")
        raise VolumeFormatError(f"{path}: corrupt header (sizeof_hdr={sizeof_hdr})")
    if raw[344:348] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[344:348]!r}, expected single-file n+1")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim != 3 and not (ndim > 3 and all(d == 1 for d in dim[4:ndim + 1])):
        raise VolumeFormatError(f"{path}: expected a 3-D volume, header has {ndim} dimensions")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise VolumeFormatError(f"{path}: non-positive extent in {shape}")
    (intent_p1,) = struct.unpack_from("<f", raw, 56)
    (intent_code,) = struct.unpack_from("<h", raw, 68)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)

    dtype = DTYPES[datatype]
    start = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if start < HEADER_SIZE or len(raw) < start + nbytes:
        raise VolumeFormatError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=start)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    if not srow.any():
        affine = np.diag(list(spacing) + [1.0])

    as_label = kind == "label" or (kind == "auto" and intent_code == INTENT_LABEL)
    if kind not in ("auto", "label", "image"):
        raise ValueError(f"kind must be auto, image or label, got {kind!r}")
    if as_label:
        if data.dtype.kind == "f" and not np.array_equal(data, np.round(data)):
            raise VolumeFormatError(f"{path}: non-integer values in a label volume")
        k = num_classes
        if k is None:
            k = int(intent_p1) if intent_code == INTENT_LABEL and intent_p1 >= 2 else \
                max(2, int(data.max()) + 1)
        try:
            return LabelVolume(data.astype(np.int16), k, spacing, affine)
        except ValueError as exc:
            raise VolumeFormatError(f"{path}: {exc}") from exc

    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float64) * (slope or 1.0) + inter
    elif data.dtype.kind != "f":
        data = data.astype(np.float32)
    return Volume(data, spacing, affine)
