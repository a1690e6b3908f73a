"""Minimal single-file NIfTI-1 (``n+1``) reader and writer.

Only 3D scalar images are handled. Endianness is detected from the header
size field, gzip containers are detected from their magic bytes, and
``scl_slope``/``scl_inter`` scaling is applied on read when the slope is
non-zero.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from maxent_seg.volume import BinaryMask, ProbMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> (numpy base dtype, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}
DTYPE_CODES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}

NIFTI_UNITS_MM = 2


class NiftiError(ValueError):
    pass


@dataclass
class NiftiMeta:
    dims: tuple[int, ...] = ()
    datatype: int = 16
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    endianness: str = "<"
    magic: bytes = MAGIC_SINGLE
    vox_offset: int = VOX_OFFSET
    descrip: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_dtype(cls, name: str = "float32", **kw) -> "NiftiMeta":
        if name not in DTYPE_CODES:
            raise NiftiError(f"unsupported datatype {name!r}")
        return cls(datatype=DTYPE_CODES[name], **kw)


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def read_header(data: bytes) -> NiftiMeta:
    if len(data) < HEADER_SIZE:
        raise NiftiError("truncated header")
    if struct.unpack("<i", data[:4])[0] == HEADER_SIZE:
        e = "<"
    elif struct.unpack(">i", data[:4])[0] == HEADER_SIZE:
        e = ">"
    else:
        raise NiftiError("not a NIfTI-1 file (sizeof_hdr != 348)")
    magic = data[344:348]
    if magic == MAGIC_PAIR:
        raise NiftiError("hdr/img pairs are not supported; convert to single-file .nii")
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"bad magic {magic!r}")
    dim = struct.unpack(e + "8h", data[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise NiftiError(f"invalid dimensions {shape}")
    if ndim > 3 and any(d != 1 for d in shape[3:]):
        raise NiftiError(f"only 3D images are supported, got dims {shape}")
    datatype = struct.unpack(e + "h", data[70:72])[0]
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    pixdim = struct.unpack(e + "8f", data[76:108])
    vox_offset = int(struct.unpack(e + "f", data[108:112])[0])
    slope, inter = struct.unpack(e + "2f", data[112:120])
    descrip = data[148:228].split(b"\x00", 1)[0].decode("latin-1")
    spatial = (shape + (1, 1, 1))[:3]
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return NiftiMeta(
        dims=shape,
        datatype=datatype,
        spacing=spacing,
        scl_slope=float(slope),
        scl_inter=float(inter),
        endianness=e,
        magic=magic,
        vox_offset=vox_offset,
        descrip=descrip,
        extra={"spatial_dims": spatial},
    )


def nifti_read(blob: bytes, kind: str = "volume"):
    """Decode a single-file NIfTI-1 image.

    ``kind`` selects the returned grid type: ``volume``, ``mask`` (non-zero is
    foreground) or ``prob``. Returns ``(grid, meta)``.
    """
    data = _maybe_gunzip(bytes(blob))
    meta = read_header(data)
    base, bitpix = DATATYPES[meta.datatype]
    spatial = meta.extra["spatial_dims"]
    count = int(np.prod(spatial))
    nbytes = count * bitpix // 8
    if meta.vox_offset < VOX_OFFSET:
        raise NiftiError(f"vox_offset {meta.vox_offset} < {VOX_OFFSET}")
    raw = data[meta.vox_offset : meta.vox_offset + nbytes]
    if len(raw) < nbytes:
        raise NiftiError(f"truncated voxel data: expected {nbytes} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype=np.dtype(meta.endianness + base)).astype(np.float64)
    if meta.scl_slope != 0 and not (meta.scl_slope == 1 and meta.scl_inter == 0):
        flat = flat * meta.scl_slope + meta.scl_inter
    arr = flat.reshape(spatial, order="F")
    if kind == "volume":
        grid = Volume(arr, meta.spacing)
    elif kind == "mask":
        grid = BinaryMask(arr != 0, meta.spacing)
    elif kind == "prob":
        grid = ProbMap(arr, meta.spacing)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return grid, meta


def _put(buf: bytearray, offset: int, fmt: str, *values):
    struct.pack_into(fmt, buf, offset, *values)


def nifti_write(v, meta: NiftiMeta | None = None, compress: bool = False) -> bytes:
    """Encode a grid as single-file NIfTI-1, float32 unless ``meta`` says otherwise.

    The sform and qform both encode a plain scaling by the voxel spacing.
    """
    meta = meta or NiftiMeta()
    if meta.datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {meta.datatype}")
    e = meta.endianness
    if e not in "<>":
        raise NiftiError("endianness must be '<' or '>'")
    dims = v.dims
    if any(d > 32767 for d in dims):
        raise NiftiError("dimensions exceed the 16-bit header fields")
    base, bitpix = DATATYPES[meta.datatype]
    dt = np.dtype(e + base)
    values = np.asarray(v.data)
    if values.dtype == bool:
        values = values.astype(np.uint8)
    if dt.kind in "iu":
        info = np.iinfo(dt)
        if values.size and (values.min() < info.min or values.max() > info.max or not np.all(values == np.round(values))):
            raise NiftiError(f"values do not fit datatype {base}")
    sx, sy, sz = v.spacing

    hdr = bytearray(VOX_OFFSET)
    _put(hdr, 0, e + "i", HEADER_SIZE)
    _put(hdr, 39, e + "b", 0)
    _put(hdr, 40, e + "8h", 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    _put(hdr, 70, e + "2h", meta.datatype, bitpix)
    _put(hdr, 76, e + "8f", 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    _put(hdr, 108, e + "f", float(VOX_OFFSET))
    _put(hdr, 112, e + "2f", meta.scl_slope, meta.scl_inter)
    _put(hdr, 123, e + "B", NIFTI_UNITS_MM)
    hdr[148 : 148 + 80] = meta.descrip.encode("latin-1")[:79].ljust(80, b"\x00")
    _put(hdr, 252, e + "2h", 1, 1)  # qform_code, sform_code: scanner anatomical
    _put(hdr, 256, e + "6f", 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    _put(hdr, 280, e + "4f", sx, 0.0, 0.0, 0.0)
    _put(hdr, 296, e + "4f", 0.0, sy, 0.0, 0.0)
    _put(hdr, 312, e + "4f", 0.0, 0.0, sz, 0.0)
    hdr[344:348] = MAGIC_SINGLE
    # bytes 348..351 stay zero: no extensions

    body = values.ravel(order="F").astype(dt).tobytes()
    out = bytes(hdr) + body
    if compress:
        # mtime=0 keeps the container byte-reproducible
        out = gzip.compress(out, mtime=0)
    return out


def read_file(path, kind: str = "volume"):
    with open(path, "rb") as fh:
        return nifti_read(fh.read(), kind)


def write_file(path, v, meta: NiftiMeta | None = None) -> None:
    compress = str(path).endswith(".gz")
    with open(path, "wb") as fh:
        fh.write(nifti_write(v, meta, compress=compress))
