"""Binary checkpoint container: magic "KVQ1", an 8-byte little-endian header
length, a JSON header (config + tensor table + quantization metadata), then a
64-byte-aligned little-endian tensor payload.

A single container carries both fp and quantized models; quant_mode and any
learned parameters (codes, scales, smoothing, clipping) live in the header's
metadata plus named payload tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import DataFormatError
from .model import DecoderBlockWeights, Linear, Model, ModelConfig, PROJECTION_NAMES
from .quantizers import QuantizedTensor, SmoothingParams

MAGIC = b"KVQ1"
ALIGN = 64

_DTYPES = {"f32": np.float32, "i8": np.int8, "u8": np.uint8, "i32": np.int32}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_container(path: str, config: dict, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = {}
    offset = 0  # relative to payload start; resolved after header size is known
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = _DTYPE_NAMES.get(arr.dtype)
        if dt is None:
            raise DataFormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries[name] = {
            "dtype": dt,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        blobs.append(arr.tobytes())
        offset = _align(offset + arr.nbytes)

    header = {"config": config, "meta": meta, "tensors": entries}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload_start = _align(len(MAGIC) + 8 + len(hjson))

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        f.write(b"\0" * (payload_start - len(MAGIC) - 8 - len(hjson)))
        pos = 0
        for name, blob in zip(sorted(tensors), blobs):
            pad = entries[name]["offset"] - pos
            f.write(b"\0" * pad)
            f.write(blob)
            pos = entries[name]["offset"] + len(blob)


def read_container(path: str) -> tuple[dict, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise DataFormatError(f"bad magic at byte 0: {data[:4]!r} != {MAGIC!r}")
    if len(data) < 12:
        raise DataFormatError(f"truncated header: file is only {len(data)} bytes")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if 12 + hlen > len(data):
        raise DataFormatError(f"header length {hlen} exceeds file size at byte 12")
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"malformed JSON header at byte 12: {e}") from e
    payload_start = _align(12 + hlen)
    entries = header.get("tensors", {})

    spans = []
    tensors = {}
    for name, ent in entries.items():
        start = payload_start + ent["offset"]
        end = start + ent["nbytes"]
        if end > len(data):
            raise DataFormatError(
                f"tensor {name!r} extends to byte {end}, past end of file ({len(data)})"
            )
        spans.append((start, end, name))
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise DataFormatError(
                f"tensors {n1!r} and {n2!r} overlap at byte {s2}"
            )
    for name, ent in entries.items():
        start = payload_start + ent["offset"]
        dt = _DTYPES.get(ent["dtype"])
        if dt is None:
            raise DataFormatError(f"tensor {name!r} has unknown dtype {ent['dtype']!r}")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(ent["shape"])) if ent["shape"] else 1,
                            offset=start)
        tensors[name] = arr.reshape(ent["shape"]).copy()
    return header.get("config", {}), header.get("meta", {}), tensors


# -- model <-> container ------------------------------------------------------


def save_model(model: Model, path: str, meta: dict | None = None) -> None:
    cfg = model.config
    tensors: dict[str, np.ndarray] = {
        "embed": model.embed,
        "final_norm": model.final_norm,
        "head.w": model.head.w,
        "head.b": model.head.b,
    }
    quant_meta: dict = {"projections": {}}
    for li, blk in enumerate(model.blocks):
        tensors[f"blocks.{li}.attn_norm"] = blk.attn_norm
        tensors[f"blocks.{li}.mlp_norm"] = blk.mlp_norm
        for name, lin in blk.projections().items():
            base = f"blocks.{li}.{name}"
            tensors[f"{base}.w"] = lin.w
            tensors[f"{base}.b"] = lin.b
            if lin.wq is not None:
                tensors[f"{base}.wq.codes"] = lin.wq.codes
                tensors[f"{base}.wq.h"] = lin.wq.h
                tensors[f"{base}.wq.z"] = lin.wq.z
                quant_meta["projections"][base] = {
                    "bits": lin.wq.bits,
                    "group_size": lin.wq.group_size,
                }
            if lin.smoothing is not None:
                tensors[f"{base}.smooth.s"] = lin.smoothing.s
                tensors[f"{base}.smooth.delta"] = lin.smoothing.delta
                quant_meta.setdefault("smoothing", {})[base] = {
                    "absorbed": lin.smoothing.absorbed
                }
    clipping = getattr(model, "clipping", None)
    if clipping:
        for (li, name), (gamma, beta) in clipping.items():
            base = f"blocks.{li}.{name}"
            tensors[f"{base}.gamma"] = np.asarray(gamma, dtype=np.float32)
            tensors[f"{base}.beta"] = np.asarray(beta, dtype=np.float32)
            quant_meta.setdefault("clipping", []).append(base)
    full_meta = dict(meta or {})
    full_meta["quant"] = quant_meta
    write_container(path, asdict(cfg), full_meta, tensors)


def load_model(path: str) -> Model:
    config, meta, tensors = read_container(path)
    try:
        cfg = ModelConfig(**config)
    except TypeError as e:
        raise DataFormatError(f"bad config in header: {e}") from e
    quant_meta = meta.get("quant", {})

    def lin(base: str) -> Linear:
        out = Linear(w=tensors[f"{base}.w"], b=tensors[f"{base}.b"])
        pq = quant_meta.get("projections", {}).get(base)
        if pq is not None:
            out.wq = QuantizedTensor(
                kind="weight",
                codes=tensors[f"{base}.wq.codes"],
                bits=pq["bits"],
                group_size=pq["group_size"],
                h=tensors[f"{base}.wq.h"],
                z=tensors[f"{base}.wq.z"],
            )
        sm = quant_meta.get("smoothing", {}).get(base)
        if sm is not None:
            out.smoothing = SmoothingParams(
                tensors[f"{base}.smooth.s"],
                tensors[f"{base}.smooth.delta"],
                absorbed=sm["absorbed"],
            )
        return out

    blocks = []
    for li in range(cfg.n_layers):
        kw = {name: lin(f"blocks.{li}.{name}") for name in PROJECTION_NAMES}
        blocks.append(
            DecoderBlockWeights(
                attn_norm=tensors[f"blocks.{li}.attn_norm"],
                mlp_norm=tensors[f"blocks.{li}.mlp_norm"],
                **kw,
            )
        )
    model = Model(
        config=cfg,
        embed=tensors["embed"],
        blocks=blocks,
        final_norm=tensors["final_norm"],
        head=Linear(w=tensors["head.w"], b=tensors["head.b"]),
    )
    clipping_bases = quant_meta.get("clipping", [])
    if clipping_bases:
        clipping = {}
        for base in clipping_bases:
            _, li, name = base.split(".")
            clipping[(int(li), name)] = (tensors[f"{base}.gamma"], tensors[f"{base}.beta"])
        model.clipping = clipping
    return model
