"""Flat binary checkpoints.

Layout: magic "TRDS0001", then one record per array sorted by name
  [name_len: u32][name: utf-8][rank: u32][dims: u32 x rank][payload: f64 LE]
a zero u32 terminator, and a JSON manifest (config + rng state) to EOF.
Everything is little-endian, so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TRDS0001"


def save_checkpoint(path, arrays: dict, manifest: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
        fh.write(struct.pack("<I", 0))
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))


def load_checkpoint(path):
    """Returns (arrays, manifest)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:8]!r})")
    off = 8
    arrays = {}
    while True:
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if name_len == 0:
            break
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=off).reshape(dims).copy()
        off += 8 * count
    manifest = json.loads(blob[off:].decode("utf-8"))
    return arrays, manifest


def model_arrays(model) -> dict:
    out = {name: t.data for name, t in model.params.items()}
    if model.memory_template is not None:
        out["memory/addresses"] = model.memory_template.addresses
    return out


def model_manifest(model, config=None, step: int = 0) -> dict:
    from dataclasses import asdict

    return {
        "model": {"kind": model.kind, "d_x": model.d_x, "d_h": model.d_h,
                  "d_out": model.d_out, "output_kind": model.output_kind,
                  "k": model.k, "a": model.a, "d_m": model.d_m,
                  "addr_hidden": model.addr_hidden},
        "config": asdict(config) if config is not None else None,
        "rng": {"seed": config.seed if config is not None else 0},
        "step": step,
    }


def restore_model(arrays: dict, manifest: dict):
    """Rebuild a model from checkpoint contents."""
    from .autodiff import Tensor
    from .controller import TardisModel
    from .memory import MemoryState

    info = manifest["model"]
    params = {name: Tensor(arr, requires_grad=True, name=name)
              for name, arr in arrays.items() if name != "memory/addresses"}
    template = None
    if info["kind"] == "tardis":
        addresses = arrays["memory/addresses"]
        template = MemoryState(info["k"], info["a"], info["d_m"], addresses,
                               Tensor(np.zeros((info["k"], info["d_m"]))))
    return TardisModel(info["kind"], info["d_x"], info["d_h"], info["d_out"],
                       info["output_kind"], params, k=info["k"], a=info["a"],
                       d_m=info["d_m"], addr_hidden=info["addr_hidden"],
                       memory_template=template)
