"""Minimal single-file NIfTI-1 reader/writer.

Covers exactly what paired CT/CBCT/MRI volumes need: 3D arrays, voxel
spacing, an offset origin, gzip or plain encoding, the common scalar
dtypes, and scl slope/intercept scaling on read. Orientation matrices
beyond the offset are ignored; volumes are treated as axial stacks where
index order (z, y, x) is the acquisition order.

Byte layout follows the fixed 348-byte NIfTI-1 header; the file magic is
"n+1" with voxel data at offset 352.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import VolumeIOError

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# NIfTI datatype codes for plain scalar arrays
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path: str, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: str) -> tuple[np.ndarray, tuple[float, float, float], tuple[float, float, float]]:
    """Read a volume; returns (voxels [D,H,W], spacing (sz,sy,sx), origin (z,y,x))."""
    try:
        with _open(path, "rb") as f:
            header = f.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE:
                raise VolumeIOError(f"{path}: truncated header ({len(header)} bytes)")
            order = "<"
            (sizeof_hdr,) = struct.unpack(order + "i", header[:4])
            if sizeof_hdr != HEADER_SIZE:
                order = ">"
                (sizeof_hdr,) = struct.unpack(order + "i", header[:4])
                if sizeof_hdr != HEADER_SIZE:
                    raise VolumeIOError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
            magic = header[344:348]
            if magic not in (MAGIC_SINGLE, b"ni1\x00"):
                raise VolumeIOError(f"{path}: bad magic {magic!r}")
            dim = struct.unpack(order + "8h", header[40:56])
            ndim = dim[0]
            if not 1 <= ndim <= 7:
                raise VolumeIOError(f"{path}: invalid dim[0]={ndim}")
            if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
                raise VolumeIOError(f"{path}: only scalar 3D volumes supported, dim={dim}")
            nx, ny, nz = (max(dim[i], 1) for i in (1, 2, 3))
            (datatype,) = struct.unpack(order + "h", header[70:72])
            if datatype not in _DTYPES:
                raise VolumeIOError(f"{path}: unsupported datatype code {datatype}")
            pixdim = struct.unpack(order + "8f", header[76:108])
            (vox_offset,) = struct.unpack(order + "f", header[108:112])
            scl_slope, scl_inter = struct.unpack(order + "2f", header[112:120])
            qoffset = struct.unpack(order + "3f", header[268:280])

            offset = int(vox_offset) if vox_offset else DATA_OFFSET
            f.read(offset - HEADER_SIZE)
            dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
            count = nx * ny * nz
            buf = f.read(count * dtype.itemsize)
            if len(buf) < count * dtype.itemsize:
                raise VolumeIOError(f"{path}: truncated voxel data")
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc

    # x varies fastest on disk, so a C-order reshape gives [z, y, x]
    voxels = np.frombuffer(buf, dtype=dtype).reshape(nz, ny, nx).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    origin = (float(qoffset[2]), float(qoffset[1]), float(qoffset[0]))
    return voxels, spacing, origin


def write_nifti(
    path: str,
    voxels: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
    dtype=np.float32,
) -> None:
    """Write voxels [D,H,W] as a single-file NIfTI-1 volume."""
    if voxels.ndim != 3:
        raise VolumeIOError(f"{path}: expected 3D voxels, got shape {voxels.shape}")
    dt = np.dtype(dtype)
    if dt not in _CODES:
        raise VolumeIOError(f"{path}: unsupported dtype {dt}")
    nz, ny, nx = voxels.shape
    sz, sy, sx = spacing
    oz, oy, ox = origin

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _CODES[dt])
    struct.pack_into("<h", header, 72, dt.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl slope/inter
    struct.pack_into("<h", header, 252, 1)  # qform: scaling only
    struct.pack_into("<3f", header, 268, ox, oy, oz)
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, oz)
    header[344:348] = MAGIC_SINGLE

    data = np.ascontiguousarray(voxels, dtype=dt)
    try:
        with _open(path, "wb") as f:
            f.write(bytes(header))
            f.write(b"\x00" * (DATA_OFFSET - HEADER_SIZE))
            f.write(data.tobytes())
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc
