"""GridFile binary format and dataset directories.

Layout (all little-endian)::

    offset  size    field
    0       8       magic  b"HBGRID\\0\\0"
    8       2       uint16 version (currently 1)
    10      1       dtype tag: b"S" scalar image, b"V" vector field, b"L" label map
    11      1       uint8 d (2 or 3)
    12      4*d     uint32 dims, slowest axis first
    12+4d   8*d     float64 voxel spacing
    12+12d  ...     float32 payload, row-major (C order); a vector field stores
                    its d components one after another, each a full grid

A dataset directory holds one ``<name>.grid`` scalar image per subject and
optionally ``<name>_seg.grid`` label maps. Files are read in sorted name order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HBGRID\0\0"
VERSION = 1
TAGS = {b"S": "scalar", b"V": "vector", b"L": "label"}
_KINDS = {v: k for k, v in TAGS.items()}
SEG_SUFFIX = "_seg"


class GridFormatError(ValueError):
    """A file is not a valid GridFile or a dataset is inconsistent."""


@dataclass
class GridFile:
    kind: str  # "scalar", "vector" or "label"
    data: np.ndarray  # (*dims) or (d, *dims)
    spacing: tuple

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise GridFormatError(f"unknown grid kind {self.kind!r}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def d(self):
        return len(self.spacing)

    @property
    def dims(self):
        return tuple(self.data.shape[-self.d:])


def encode(grid: GridFile) -> bytes:
    d = grid.d
    if d not in (2, 3):
        raise GridFormatError("only 2-D and 3-D grids are supported")
    data = np.asarray(grid.data)
    want = (d,) + grid.dims if grid.kind == "vector" else grid.dims
    if data.shape != want or len(grid.dims) != d:
        raise GridFormatError(f"{grid.kind} payload of shape {data.shape} does not match d={d}")
    header = MAGIC + struct.pack("<HcB", VERSION, _KINDS[grid.kind], d)
    header += struct.pack(f"<{d}I", *grid.dims) + struct.pack(f"<{d}d", *grid.spacing)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode(buf: bytes, name="<bytes>") -> GridFile:
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise GridFormatError(f"{name}: bad magic")
    version, tag, d = struct.unpack_from("<HcB", buf, 8)
    if version != VERSION:
        raise GridFormatError(f"{name}: unsupported version {version}")
    if tag not in TAGS:
        raise GridFormatError(f"{name}: unknown dtype tag {tag!r}")
    if d not in (2, 3):
        raise GridFormatError(f"{name}: unsupported dimension {d}")
    off = 12 + 12 * d
    if len(buf) < off:
        raise GridFormatError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{d}I", buf, 12)
    spacing = struct.unpack_from(f"<{d}d", buf, 12 + 4 * d)
    kind = TAGS[tag]
    shape = ((d,) if kind == "vector" else ()) + tuple(dims)
    count = int(np.prod(shape))
    if len(buf) - off != 4 * count:
        raise GridFormatError(
            f"{name}: payload has {len(buf) - off} bytes, expected {4 * count} for shape {shape}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    if kind == "label":
        if not np.array_equal(data, np.rint(data)):
            raise GridFormatError(f"{name}: label map holds non-integer values")
        data = data.astype(np.int64)
    else:
        data = data.astype(np.float64)
    return GridFile(kind, data, spacing)


def write_grid(path, data, kind="scalar", spacing=None):
    data = np.asarray(data)
    if spacing is None:
        d = data.ndim - 1 if kind == "vector" else data.ndim
        spacing = (1.0,) * d
    Path(path).write_bytes(encode(GridFile(kind, data, spacing)))


def read_grid(path) -> GridFile:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


@dataclass
class Dataset:
    names: list
    images: np.ndarray  # (N, *dims)
    labels: np.ndarray | None  # (N, *dims) when every image has a companion
    spacing: tuple

    @property
    def N(self):
        return len(self.names)

    @property
    def dims(self):
        return self.images.shape[1:]


def load_dataset(path) -> Dataset:
    """Read every scalar GridFile in a directory, all-or-nothing.

    Label companions are attached only when every image has one; a partial
    set is an error.
    """
    root = Path(path)
    if not root.is_dir():
        raise GridFormatError(f"{root}: not a directory")
    files = sorted(p for p in root.glob("*.grid") if p.is_file())
    image_files = [p for p in files if not p.stem.endswith(SEG_SUFFIX)]
    if not image_files:
        raise GridFormatError(f"{root}: no images (*.grid) found")
    grids, errors = {}, []
    for p in files:
        try:
            grids[p] = read_grid(p)
        except GridFormatError as exc:
            errors.append(str(exc))
    if errors:
        raise GridFormatError("malformed grid files: " + "; ".join(errors))
    for p in image_files:
        if grids[p].kind != "scalar":
            errors.append(f"{p.name}: expected a scalar image, found {grids[p].kind}")
    ref = grids[image_files[0]]
    bad = [p.name for p in files if grids[p].dims != ref.dims or grids[p].spacing != ref.spacing]
    if bad:
        errors.append(f"inconsistent dims/spacing (reference {image_files[0].name} {ref.dims}): {', '.join(bad)}")
    seg = {p: root / f"{p.stem}{SEG_SUFFIX}.grid" for p in image_files}
    have = [s in grids for s in seg.values()]
    if any(have) and not all(have):
        missing = [p.name for p, s in seg.items() if s not in grids]
        errors.append(f"label maps missing for: {', '.join(missing)}")
    for s in seg.values():
        if s in grids and grids[s].kind != "label":
            errors.append(f"{s.name}: expected a label map, found {grids[s].kind}")
    if errors:
        raise GridFormatError("; ".join(errors))
    images = np.stack([grids[p].data for p in image_files])
    labels = np.stack([grids[seg[p]].data for p in image_files]) if all(have) else None
    return Dataset([p.stem for p in image_files], images, labels, ref.spacing)


def save_dataset(path, images, labels=None, spacing=None, prefix="subject"):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for n, img in enumerate(images):
        p = root / f"{prefix}{n:03d}.grid"
        write_grid(p, img, "scalar", spacing)
        written.append(p)
        if labels is not None:
            q = root / f"{prefix}{n:03d}{SEG_SUFFIX}.grid"
            write_grid(q, labels[n], "label", spacing)
            written.append(q)
    return written
