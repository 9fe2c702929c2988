"""Label volume container, coordinate transforms and a NIfTI-1 subset reader/writer."""

from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

# datatype code -> numpy dtype (byte order applied at read time)
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    512: np.uint16,
}


class NiftiError(ValueError):
    """Base class for NIfTI parsing/writing failures."""


class MalformedHeaderError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class NonIntegralLabelError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class OrientationError(NiftiError):
    """Affine is not dominated by one voxel axis per world axis."""


class LabelOverflowError(NiftiError):
    pass


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Dense integer label grid with a voxel-to-world (RAS, mm) affine.

    ``data`` is indexed ``[i, j, k]``; ``affine @ (i, j, k, 1)`` gives the
    world position of a voxel center. Arrays are made read-only on
    construction.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype.kind not in "iub":
            raise TypeError(f"label data must be integer typed, got {data.dtype}")
        if data.dtype.kind == "b":
            data = data.astype(np.uint8)
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        affine = np.array(self.affine, dtype=float)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine 3x3 block is singular")
        data = np.array(data, copy=True)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> LabelVolume:
        affine = np.eye(4)
        affine[:3, :3] = np.diag(np.asarray(spacing, dtype=float))
        affine[:3, 3] = origin
        return cls(np.asarray(data), affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def with_data(self, data, affine=None) -> LabelVolume:
        return LabelVolume(np.asarray(data), self.affine if affine is None else affine)

    def mask(self, labels=None) -> LabelVolume:
        """Binary volume of the given labels (all foreground when ``labels`` is None)."""
        if labels is None:
            m = self.data > 0
        else:
            m = np.isin(self.data, np.atleast_1d(labels))
        return self.with_data(m.astype(np.uint8))

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]

    def world_coords(self, indices: np.ndarray) -> np.ndarray:
        """World positions (N, 3) of integer voxel indices (N, 3); no bounds check."""
        idx = np.asarray(indices, dtype=float).reshape(-1, 3)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def foreground_world(self, labels=None) -> np.ndarray:
        m = self.data > 0 if labels is None else np.isin(self.data, np.atleast_1d(labels))
        return self.world_coords(np.argwhere(m))

    def same_grid(self, other: LabelVolume, atol: float = 1e-3) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.allclose(self.affine, other.affine, rtol=1e-6, atol=1e-6)
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


def voxel_to_world(vol: LabelVolume, v) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (3,) or np.any(v < 0) or np.any(v >= np.array(vol.dims)):
        raise IndexError(f"voxel {tuple(v.tolist())} outside dims {vol.dims}")
    return vol.affine[:3, :3] @ v.astype(float) + vol.affine[:3, 3]


def world_to_voxel(vol: LabelVolume, p) -> tuple[int, int, int]:
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("world point must be 3 finite coordinates")
    ijk = np.linalg.solve(vol.affine[:3, :3], p - vol.affine[:3, 3])
    idx = np.floor(ijk + 0.5).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.array(vol.dims)):
        raise IndexError(f"world point {p.tolist()} maps outside dims {vol.dims}")
    return tuple(int(i) for i in idx)


# --- NIfTI-1 -----------------------------------------------------------------


def _quaternion_affine(hdr_bytes: bytes, endian: str, pixdim: np.ndarray) -> np.ndarray:
    b, c, d, qx, qy, qz = struct.unpack_from(endian + "6f", hdr_bytes, 256)
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = (qx, qy, qz)
    return affine


def reorient_ras(data: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Permute/flip voxel axes so world axis ``w`` is dominated by voxel axis ``w`` with positive sign."""
    m = affine[:3, :3]
    dominant = np.argmax(np.abs(m), axis=0)  # world axis dominated by each voxel axis
    if sorted(dominant.tolist()) != [0, 1, 2]:
        raise OrientationError(f"affine is not axis-dominant:\n{m}")
    for col in range(3):
        mags = np.sort(np.abs(m[:, col]))
        if np.isclose(mags[-1], mags[-2]):
            raise OrientationError(f"voxel axis {col} has no dominant world axis")
    perm = np.argsort(dominant)  # voxel axis that feeds world axis 0, 1, 2
    data = np.transpose(data, perm)
    affine = affine.copy()
    affine[:3, :3] = m[:, perm]
    for ax in range(3):
        if affine[ax, ax] < 0:
            n = data.shape[ax]
            affine[:3, 3] = affine[:3, 3] + affine[:3, ax] * (n - 1)
            affine[:3, ax] = -affine[:3, ax]
            data = np.flip(data, axis=ax)
    return np.ascontiguousarray(data), affine


def parse_nifti(raw: bytes) -> LabelVolume:
    """Parse a single-file NIfTI-1 (optionally gzipped) label image."""
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedDataError(f"corrupt gzip stream: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise MalformedHeaderError(f"need {HEADER_SIZE} header bytes, got {len(raw)}")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise MalformedHeaderError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise MalformedHeaderError(f"unsupported magic {magic!r} (only single-file 'n+1')")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] != 3:
        raise DimensionError(f"expected a 3D image (dim[0]=3), got dim[0]={dim[0]}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise DimensionError(f"non-positive dimension in {shape}")
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} not supported")
    pixdim = np.array(struct.unpack_from(endian + "8f", raw, 76), dtype=float)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0]) or DEFAULT_VOX_OFFSET
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)

    if sform_code > 0:
        srows = struct.unpack_from(endian + "12f", raw, 280)
        affine = np.eye(4)
        affine[:3, :] = np.array(srows, dtype=float).reshape(3, 4)
    elif qform_code > 0:
        affine = _quaternion_affine(raw, endian, pixdim)
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])

    dtype = np.dtype(DATATYPES[datatype]).newbyteorder(endian)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise TruncatedDataError(f"data section needs {nbytes} bytes at offset {vox_offset}, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    values = flat.reshape(shape, order="F")

    scaled = slope not in (0.0, 1.0) or (slope != 0.0 and inter != 0.0)
    if scaled:
        values = values.astype(np.float64) * slope + inter
    if values.dtype.kind == "f":
        if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
            raise NonIntegralLabelError("floating point labels must be integral")
        if values.size and values.min() < 0:
            raise NonIntegralLabelError("labels must be non-negative")
        values = values.astype(np.int64)
    elif values.size and values.min() < 0:
        raise NiftiError("labels must be non-negative")

    data, affine = reorient_ras(values.astype(values.dtype.newbyteorder("=")), affine)
    return LabelVolume(data, affine)


def write_nifti(vol: LabelVolume, compress: bool = False) -> bytes:
    """Serialize as NIfTI-1 uint16 with ``sform_code=1``."""
    if vol.data.size and int(vol.data.max()) > np.iinfo(np.uint16).max:
        raise LabelOverflowError(f"label {int(vol.data.max())} does not fit in uint16")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 512, 16)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(DEFAULT_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)
    struct.pack_into("<12f", hdr, 280, *vol.affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    body = vol.data.astype("<u2").tobytes(order="F")
    raw = bytes(hdr) + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + body
    if compress:
        buf = io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as fh:
            fh.write(raw)
        return buf.getvalue()
    return raw


def load(path) -> LabelVolume:
    return parse_nifti(Path(path).read_bytes())


def save(vol: LabelVolume, path) -> None:
    path = Path(path)
    path.write_bytes(write_nifti(vol, compress=path.name.endswith(".gz")))
