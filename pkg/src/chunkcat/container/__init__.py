"""Self-describing chunked-array container files."""

from .btree import ChunkIndex, ChunkRecord, btree_insert, chunk_lookup
from .codec import codec, compress, decompress
from .file import (
    COLLECTIVE, EAGER, IN_MEMORY, LAZY, ON_THE_FLY, SINGLE, Dataset, FileHandle, copy_file,
    create_dataset, create_file, file_stats, open_file, read_region, visit_objects,
    write_region,
)
from .format import (
    CHUNKED, COMPACT, COMPACT_LIMIT, CONTIGUOUS, ELEMENT_TYPES, MAX_CHUNKS, DatasetSpec,
    FormatConfig, chunk_count,
)

__all__ = [
    "CHUNKED", "COLLECTIVE", "COMPACT", "COMPACT_LIMIT", "CONTIGUOUS", "ChunkIndex",
    "ChunkRecord", "Dataset", "DatasetSpec", "EAGER", "ELEMENT_TYPES", "FileHandle",
    "FormatConfig", "IN_MEMORY", "LAZY", "MAX_CHUNKS", "ON_THE_FLY", "SINGLE", "btree_insert",
    "chunk_count", "chunk_lookup", "codec", "compress", "copy_file", "create_dataset",
    "create_file", "decompress", "file_stats", "open_file", "read_region", "visit_objects",
    "write_region",
]
