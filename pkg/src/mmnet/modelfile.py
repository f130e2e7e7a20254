"""Binary model container.

Fixed little-endian layout: 4 magic bytes, u32 format version, u32
header length, UTF-8 JSON header, raw tensor payload. The header carries
the architecture configuration, a structural hash of the rebuilt graph,
and a tensor table (name, dtype, shape, offset, optional quantization
parameters). The hash prevents loading weights into a mismatched graph.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"MMNF"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "u8": "<u1", "i32": "<i4"}
_DTYPE_OF = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8",
             np.dtype(np.int32): "i32"}


class ModelFileError(Exception):
    """Corrupt or unreadable model container."""


class ArchitectureMismatchError(ModelFileError):
    """Stored weights do not match the requested architecture."""


def _config_dict(config) -> dict:
    return {
        "width_multiplier": config.width_multiplier,
        "input_size": config.input_size,
        "channel_rounding": config.channel_rounding,
    }


def save_model(
    path,
    graph,
    tensors: Dict[str, np.ndarray],
    extras: Optional[dict] = None,
    quant: Optional[Dict[str, dict]] = None,
):
    """Write a model/checkpoint container. quant maps tensor name ->
    serialized QuantParams dict for u8 payloads."""
    from .arch import architecture_hash

    quant = quant or {}
    table = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_OF:
            arr = arr.astype(np.float32)
        dtype = _DTYPE_OF[arr.dtype]
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        table.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
                "quant": quant.get(name),
            }
        )
        payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": _config_dict(graph.config),
        "arch_hash": architecture_hash(graph),
        "extras": extras or {},
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def load_model(
    path, expected_config=None, verify_hash: bool = True
) -> Tuple[object, Dict[str, np.ndarray], dict, Dict[str, dict]]:
    """Read a container. Returns (config, tensors, extras, quant table)."""
    from .arch import MMNetConfig, architecture_hash, build_mmnet

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise ModelFileError(f"bad magic bytes in {path}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported format version {version}")
    if 12 + hlen > len(data):
        raise ModelFileError("truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt header: {exc}") from exc
    payload = data[12 + hlen :]

    config = MMNetConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise ArchitectureMismatchError(
            f"model config {config} != expected {expected_config}"
        )
    if verify_hash:
        rebuilt_graph = build_mmnet(config)
        if header.get("extras", {}).get("kind") == "quant":
            from .arch import init_weights
            from .quant import fold_batch_norm

            rebuilt_graph, _ = fold_batch_norm(
                rebuilt_graph, init_weights(rebuilt_graph, 0)
            )
        rebuilt = architecture_hash(rebuilt_graph)
        if rebuilt != header["arch_hash"]:
            raise ArchitectureMismatchError(
                "architecture hash mismatch: file does not match rebuilt graph"
            )

    spans = []
    tensors, quant = {}, {}
    for entry in header["tensors"]:
        off, nbytes = entry["offset"], entry["nbytes"]
        if off < 0 or off + nbytes > len(payload):
            raise ModelFileError(f"tensor {entry['name']} out of bounds")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(
            payload, dtype=_DTYPES[entry["dtype"]], count=nbytes // np.dtype(_DTYPES[entry["dtype"]]).itemsize,
            offset=off,
        ).reshape(entry["shape"])
        tensors[entry["name"]] = np.array(arr)  # writable copy, native order
        if entry.get("quant"):
            quant[entry["name"]] = entry["quant"]
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ModelFileError(f"overlapping tensors {n0} and {n1}")
    return config, tensors, header.get("extras", {}), quant
