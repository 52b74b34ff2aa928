"""Binary checkpoints.

Layout (all integers little-endian)::

    b"QSWN"  u32 version  u32 config_len  config (UTF-8 "key = value" lines)
    repeated:  u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 values
"""

from __future__ import annotations

import struct

import numpy as np

from .config import parse_pairs, to_text, apply_overrides
from .errors import IngestionError
from .model import QSwinConfig, QSwinModel

MAGIC = b"QSWN"
VERSION = 1


def save_checkpoint(model, path):
    cfg_text = to_text(model.cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg_text)))
        fh.write(cfg_text)
        for name, tensor in model.named_parameters():
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    return path


def read_checkpoint(path):
    """Return ``(config_text, {name: float32 array})``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise IngestionError(f"cannot read checkpoint {path}: {err}") from err
    if blob[:4] != MAGIC:
        raise IngestionError(f"{path} is not a checkpoint (bad magic)")
    pos = 4
    try:
        version, cfg_len = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != VERSION:
            raise IngestionError(f"{path}: unsupported checkpoint version {version}")
        cfg_text = blob[pos:pos + cfg_len].decode("utf-8")
        pos += cfg_len
        tensors = {}
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise IngestionError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as err:
        raise IngestionError(f"{path}: truncated checkpoint") from err
    return cfg_text, tensors


def load_checkpoint(path):
    """Rebuild a QSwinModel from a checkpoint written by ``save_checkpoint``."""
    cfg_text, tensors = read_checkpoint(path)
    cfg = apply_overrides(QSwinConfig(), parse_pairs(cfg_text))
    model = QSwinModel(cfg)
    expected = {name for name, _ in model.named_parameters()}
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise IngestionError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    model.load_state_dict(tensors)
    return model
