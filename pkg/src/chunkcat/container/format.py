"""On-disk records and the value types describing them.

All integers are little-endian.  Offsets are absolute byte offsets from the
start of the file; ``UNDEF`` marks an address that has not been allocated.
The byte layout is documented in ``docs/format.md``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import FormatError, SpecError
from .codec import check_level

MAGIC = b"CAF1"
VERSION = 1
UNDEF = 0xFFFFFFFFFFFFFFFF

MAX_CHUNKS = 2**32
COMPACT_LIMIT = 65536

ELEMENT_TYPES = {
    "int32": np.dtype("<i4"),
    "int64": np.dtype("<i8"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}
_TYPE_CODES = {name: i for i, name in enumerate(ELEMENT_TYPES)}
_TYPE_NAMES = {i: name for name, i in _TYPE_CODES.items()}

CONTIGUOUS, CHUNKED, COMPACT = "contiguous", "chunked", "compact"
LAYOUTS = (CONTIGUOUS, CHUNKED, COMPACT)
_LAYOUT_CODES = {name: i for i, name in enumerate(LAYOUTS)}

# magic, version, meta_block_size, root addr, root length, btree k, reserved,
# extent table addr, extent table length
SUPERBLOCK = struct.Struct("<4sIQQQIIQQ")
# magic, version, type, layout, level, rows, cols, chunk rows, chunk cols,
# fill bytes, allocated flag, layout payload a, layout payload b
DSET_HEADER = struct.Struct("<4sBBBBQQQQ8sB7xQQ")
# magic, rank k, record count, root addr, depth, reserved
INDEX_HEADER = struct.Struct("<4sIQQII")
# magic, level, count, reserved
NODE_HEADER = struct.Struct("<4sBxHQ")
NODE_SLOT = struct.Struct("<QQQQ")
GROUP_HEADER = struct.Struct("<4sI")
# name length, kind, header length, header addr
LINK = struct.Struct("<HBxIQ")
EXTENT_HEADER = struct.Struct("<4sI")
EXTENT = struct.Struct("<QQ")

KIND_GROUP, KIND_DATASET = 0, 1


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class FormatConfig:
    meta_block_size: int = 2048
    btree_rank_k: int = 32

    def __post_init__(self):
        if self.meta_block_size < 512 or not _is_pow2(self.meta_block_size):
            raise SpecError(
                f"meta_block_size must be a power of two >= 512, got {self.meta_block_size}"
            )
        if self.btree_rank_k < 1:
            raise SpecError(f"btree_rank_k must be >= 1, got {self.btree_rank_k}")


def chunk_count(dims, chunk_shape) -> int:
    """Number of chunks covering ``dims``; zero when any extent is zero."""
    if any(c <= 0 for c in chunk_shape):
        raise SpecError(f"chunk extents must be positive, got {tuple(chunk_shape)}")
    if any(d == 0 for d in dims):
        return 0
    return math.prod(-(-d // c) for d, c in zip(dims, chunk_shape))


def dtype_of(element_type) -> np.dtype:
    try:
        return ELEMENT_TYPES[element_type]
    except KeyError:
        raise SpecError(f"unsupported element type {element_type!r}") from None


@dataclass(frozen=True)
class DatasetSpec:
    path: str
    element_type: str
    dims: tuple
    layout: str = CHUNKED
    chunk_shape: Optional[tuple] = None
    compression_level: int = 6
    fill_value: float = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.chunk_shape is not None:
            object.__setattr__(self, "chunk_shape", tuple(int(c) for c in self.chunk_shape))

    @property
    def dtype(self) -> np.dtype:
        return dtype_of(self.element_type)

    @property
    def nbytes(self) -> int:
        return self.dims[0] * self.dims[1] * self.dtype.itemsize

    @property
    def row_bytes(self) -> int:
        return self.dims[1] * self.dtype.itemsize

    @property
    def is_1d(self) -> bool:
        return self.dims[1] == 1

    def validate(self) -> None:
        if not self.path.startswith("/") or self.path == "/" or "//" in self.path:
            raise SpecError(f"bad dataset path {self.path!r}")
        dtype_of(self.element_type)
        if len(self.dims) != 2 or any(d < 0 for d in self.dims):
            raise SpecError(f"dims must be a pair of non-negative extents, got {self.dims}")
        if self.layout not in LAYOUTS:
            raise SpecError(f"unknown layout {self.layout!r}")
        check_level(self.compression_level)
        if self.layout == CHUNKED:
            if self.chunk_shape is None or len(self.chunk_shape) != 2:
                raise SpecError("chunked layout requires a 2-extent chunk_shape")
            if chunk_count(self.dims, self.chunk_shape) > MAX_CHUNKS:
                raise SpecError(
                    f"{self.path}: {chunk_count(self.dims, self.chunk_shape)} chunks exceeds 2**32"
                )
        elif self.chunk_shape is not None:
            raise SpecError("chunk_shape is only valid for the chunked layout")
        if self.layout == COMPACT and self.nbytes >= COMPACT_LIMIT:
            raise SpecError(
                f"{self.path}: compact layout needs raw size < {COMPACT_LIMIT} bytes, got {self.nbytes}"
            )

    def fill_bytes(self) -> bytes:
        return np.array(self.fill_value, dtype=self.dtype).tobytes().ljust(8, b"\0")


# -- record codecs -----------------------------------------------------------


@dataclass
class Superblock:
    meta_block_size: int
    btree_rank_k: int
    root_addr: int = UNDEF
    root_length: int = 0
    extent_addr: int = UNDEF
    extent_length: int = 0

    def encode(self) -> bytes:
        return SUPERBLOCK.pack(
            MAGIC, VERSION, self.meta_block_size, self.root_addr, self.root_length,
            self.btree_rank_k, 0, self.extent_addr, self.extent_length,
        )

    @classmethod
    def decode(cls, buf) -> "Superblock":
        if len(buf) < SUPERBLOCK.size:
            raise FormatError("truncated superblock")
        magic, version, mbs, root, rlen, k, _, ext, elen = SUPERBLOCK.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        return cls(mbs, k, root, rlen, ext, elen)


@dataclass
class Link:
    name: str
    kind: int
    addr: int
    length: int


def encode_group(links) -> bytes:
    parts = [GROUP_HEADER.pack(b"GRUP", len(links))]
    for link in sorted(links, key=lambda l: l.name):
        name = link.name.encode()
        parts.append(LINK.pack(len(name), link.kind, link.length, link.addr))
        parts.append(name)
    return b"".join(parts)


def decode_group(buf) -> list:
    magic, count = GROUP_HEADER.unpack_from(buf)
    if magic != b"GRUP":
        raise FormatError(f"bad group header magic {magic!r}")
    pos = GROUP_HEADER.size
    links = []
    for _ in range(count):
        nlen, kind, length, addr = LINK.unpack_from(buf, pos)
        pos += LINK.size
        links.append(Link(bytes(buf[pos:pos + nlen]).decode(), kind, addr, length))
        pos += nlen
    return links


@dataclass
class DatasetHeader:
    spec: DatasetSpec
    allocated: bool = False
    # contiguous: (data addr, data bytes); chunked: (index header addr, unused);
    # compact: (inline bytes, unused)
    payload: tuple = (UNDEF, 0)
    inline: bytes = b""

    @property
    def size(self) -> int:
        return DSET_HEADER.size + len(self.inline)

    def encode(self) -> bytes:
        s = self.spec
        crows, ccols = s.chunk_shape or (0, 0)
        head = DSET_HEADER.pack(
            b"DSET", VERSION, _TYPE_CODES[s.element_type], _LAYOUT_CODES[s.layout],
            s.compression_level, s.dims[0], s.dims[1], crows, ccols, s.fill_bytes(),
            int(self.allocated), self.payload[0], self.payload[1],
        )
        return head + self.inline

    @classmethod
    def decode(cls, buf, path) -> "DatasetHeader":
        if len(buf) < DSET_HEADER.size:
            raise FormatError(f"{path}: truncated dataset header")
        (magic, _, tcode, lcode, level, rows, cols, crows, ccols, fill, alloc,
         pa, pb) = DSET_HEADER.unpack_from(buf)
        if magic != b"DSET" or tcode not in _TYPE_NAMES or lcode >= len(LAYOUTS):
            raise FormatError(f"{path}: corrupt dataset header")
        etype = _TYPE_NAMES[tcode]
        fill_value = np.frombuffer(fill[:ELEMENT_TYPES[etype].itemsize], ELEMENT_TYPES[etype])[0]
        layout = LAYOUTS[lcode]
        spec = DatasetSpec(
            path=path, element_type=etype, dims=(rows, cols), layout=layout,
            chunk_shape=(crows, ccols) if layout == CHUNKED else None,
            compression_level=level, fill_value=fill_value.item(),
        )
        inline = bytes(buf[DSET_HEADER.size:DSET_HEADER.size + pa]) if layout == COMPACT else b""
        return cls(spec, bool(alloc), (pa, pb), inline)


def node_size(rank_k) -> int:
    return NODE_HEADER.size + 2 * rank_k * NODE_SLOT.size


def encode_node(node, rank_k) -> bytes:
    parts = [NODE_HEADER.pack(b"BTND", 0 if node.leaf else 1, len(node.keys), 0)]
    for key, item in zip(node.keys, node.items):
        if node.leaf:
            parts.append(NODE_SLOT.pack(key[0], key[1], item.offset, item.nbytes))
        else:
            parts.append(NODE_SLOT.pack(key[0], key[1], item.addr, 0))
    parts.append(bytes(NODE_SLOT.size * (2 * rank_k - len(node.keys))))
    return b"".join(parts)


def decode_node_header(buf):
    magic, level, count, _ = NODE_HEADER.unpack_from(buf)
    if magic != b"BTND":
        raise FormatError(f"bad chunk index node magic {magic!r}")
    return level == 0, count


def encode_extents(extents) -> bytes:
    return EXTENT_HEADER.pack(b"EXTT", len(extents)) + b"".join(
        EXTENT.pack(off, length) for off, length in extents
    )


def decode_extents(buf) -> list:
    magic, count = EXTENT_HEADER.unpack_from(buf)
    if magic != b"EXTT":
        raise FormatError("bad extent table magic")
    return [EXTENT.unpack_from(buf, EXTENT_HEADER.size + i * EXTENT.size) for i in range(count)]
