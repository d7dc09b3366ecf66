"""Binary checkpoints for toy-model parameters (and an optional speaker table).

Layout: 8-byte magic ``PDYNTOY1``, a little-endian uint32 byte count, that
many bytes of UTF-8 JSON metadata, then every declared block as
little-endian float64 in declared order.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..conditioning import EmbeddingTable, FeatureMask
from ..errors import ParseError
from .model import PARAM_NAMES, SpeakerMode, ToyModelParams

MAGIC = b"PDYNTOY1"


def save_checkpoint(path, params: ToyModelParams, table: EmbeddingTable | None = None,
                    extra: dict | None = None) -> None:
    params.check()
    blocks = [(name, getattr(params, name)) for name in PARAM_NAMES]
    table_ids = []
    if table is not None:
        table_ids = table.ids()
        blocks += [(f"spk:{sid}", table[sid]) for sid in table_ids]
    meta = {
        "d_e": params.d_e, "d_s": params.d_s, "hidden": params.hidden,
        "vocab_size": params.token_emb.shape[0], "mode": params.mode.value,
        "mask": params.mask.label(), "table_ids": table_ids,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
        "extra": extra or {},
    }
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ToyModelParams, EmbeddingTable | None, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a toy-model checkpoint")
    try:
        (n,) = struct.unpack_from("<I", data, 8)
        meta = json.loads(data[12:12 + n].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: corrupt metadata") from exc
    offset = 12 + n
    arrays = {}
    for name, shape in meta["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError(f"{path}: truncated block {name}")
        arrays[name] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise ParseError(f"{path}: trailing bytes")
    params = ToyModelParams(*(arrays[k] for k in PARAM_NAMES), d_s=meta["d_s"],
                            mask=FeatureMask.parse(meta["mask"]),
                            mode=SpeakerMode(meta["mode"]))
    params.check()
    table = None
    if meta["table_ids"]:
        table = EmbeddingTable(meta["d_s"], {sid: arrays[f"spk:{sid}"] for sid in meta["table_ids"]})
    return params, table, meta.get("extra", {})
