"""Binary checkpoint container for model weights, masks and metadata.

Layout (all integers little-endian)::

    b"DNTH"  u16 version  u32 record_count
    record*: u32 name_len, name (UTF-8), u8 dtype, u8 rank, u32 dims[rank], payload

dtype 0 is float64, 1 is a bit-packed boolean mask (``np.packbits``,
little bit order), 2 is a UTF-8 JSON blob (rank 1, dims = byte length).
Records are written in a fixed order so equal models give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .prune import MaskSet

MAGIC = b"DNTH"
VERSION = 1
F64, BITS, JSON = 0, 1, 2
META = "__meta__"
MASK_SUFFIX = ".mask"


class CheckpointError(ValueError):
    pass


def _record(name: str, dtype: int, shape: tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BB", dtype, len(shape))
    return head + struct.pack(f"<{len(shape)}I", *shape) + payload


def encode(model: Model, masks: MaskSet | None = None, extra: dict | None = None) -> bytes:
    meta = {"config": model.config.to_dict(), "variant": model.variant,
            "target_sparsity": None if masks is None else masks.target_sparsity}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    records = [_record(META, JSON, (len(blob),), blob)]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        records.append(_record(name, F64, arr.shape, arr.tobytes()))
    if masks is not None:
        for name in sorted(masks.masks):
            m = masks.masks[name]
            bits = np.packbits(m.reshape(-1).astype(np.uint8), bitorder="little")
            records.append(_record(name + MASK_SUFFIX, BITS, m.shape, bits.tobytes()))
    return MAGIC + struct.pack("<HI", VERSION, len(records)) + b"".join(records)


def decode(buf: bytes) -> tuple[Model, MaskSet | None, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        meta, params, masks = None, {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            dtype, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if dtype == F64:
                arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
                params[name] = arr.astype(np.float64)
                pos += 8 * size
            elif dtype == BITS:
                nbytes = (size + 7) // 8
                bits = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos)
                masks[name[: -len(MASK_SUFFIX)]] = (
                    np.unpackbits(bits, count=size, bitorder="little").astype(bool).reshape(shape))
                pos += nbytes
            elif dtype == JSON:
                meta = json.loads(buf[pos:pos + size].decode("utf-8"))
                pos += size
            else:
                raise CheckpointError(f"unknown dtype code {dtype} in record {name!r}")
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last record")
    if meta is None:
        raise CheckpointError("checkpoint has no metadata record")
    model = Model(ModelConfig.from_dict(meta["config"]), meta["variant"], params=params)
    mask_set = MaskSet(masks, meta["target_sparsity"]) if masks else None
    return model, mask_set, meta.get("extra", {})


def save(path, model: Model, masks: MaskSet | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(model, masks, extra))
    tmp.replace(path)


def load(path) -> tuple[Model, MaskSet | None, dict]:
    return decode(Path(path).read_bytes())
