"""MBR4 binary field files.

Layout (little endian): magic "MBR4", u16 version, u32 N, (N+1)^4 f64 values
in canonical vertex order, u64 seed, u8 provenance code.
"""
from pathlib import Path
from typing import Union

import numpy as np

from membrane.field_sampler import Field, Provenance
from membrane.lattice import Lattice4
from utils.logger import logger

MAGIC = b"MBR4"
FORMAT_VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("N", "<u4")])
SEED = np.dtype("<u8")
PROVENANCE = np.dtype("u1")


def field_to_bytes(field: Field) -> bytes:
    header = np.array([(MAGIC, FORMAT_VERSION, field.N)], dtype=HEADER)
    return b"".join([
        header.tobytes(),
        field.flat.astype("<f8").tobytes(),
        np.array(field.seed, dtype=SEED).tobytes(),
        np.array(field.provenance.code, dtype=PROVENANCE).tobytes(),
    ])


def field_from_bytes(data: bytes) -> Field:
    """
    Decode one MBR4 record

    Raises:
        ValueError: wrong magic, unsupported version or truncated payload
    """
    if len(data) < HEADER.itemsize:
        raise ValueError("MBR4 payload shorter than its header")
    header = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise ValueError(f"Not an MBR4 file (magic {header['magic']!r})")
    if int(header["version"]) != FORMAT_VERSION:
        raise ValueError(f"Unsupported MBR4 version {int(header['version'])}")
    lattice = Lattice4(int(header["N"]))
    offset = HEADER.itemsize
    expected = offset + 8 * lattice.vertex_count + SEED.itemsize + PROVENANCE.itemsize
    if len(data) != expected:
        raise ValueError(f"MBR4 payload has {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", count=lattice.vertex_count, offset=offset)
    offset += 8 * lattice.vertex_count
    seed = int(np.frombuffer(data, dtype=SEED, count=1, offset=offset)[0])
    code = int(np.frombuffer(data, dtype=PROVENANCE, count=1, offset=offset + SEED.itemsize)[0])
    return Field(lattice, values.astype(np.float64), Provenance.from_code(code), seed)


def write_field(field: Field, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(field_to_bytes(field))
    logger.debug(f"Field written: {target} (N={field.N}, {field.provenance.value})")
    return target


def read_field(path: Union[str, Path]) -> Field:
    return field_from_bytes(Path(path).read_bytes())
