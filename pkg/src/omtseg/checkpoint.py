"""Checkpoints: one flat binary blob plus a text manifest.

``params.bin`` holds every parameter as little-endian float64 in row-major
order; ``manifest.txt`` lists ``name<TAB>shape<TAB>byte-offset`` per line in
save order, so the pair is self-describing and diffable.
"""

import os

import numpy as np

from .errors import ContractError, ParseError

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "params.bin"


def save_checkpoint(directory, named_params):
    os.makedirs(directory, exist_ok=True)
    blob = bytearray()
    lines = []
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{len(blob)}")
        blob += arr.tobytes()
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        fh.write(bytes(blob))
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Read a checkpoint directory into a name -> array dict."""
    manifest = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, BLOB_NAME)
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    out = {}
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    "expected 'name<TAB>shape<TAB>offset'",
                    path=manifest, line=lineno,
                )
            name, shape_s, offset_s = parts
            shape = tuple(int(s) for s in shape_s.split(",") if s)
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_s)
            end = offset + 8 * count
            if end > len(blob):
                raise ParseError(
                    f"parameter {name} overruns the blob",
                    path=manifest, line=lineno,
                )
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            out[name] = arr.reshape(shape).astype(np.float64)
    return out


def load_into_model(model, directory):
    """Assign checkpoint arrays into a model's parameters, strictly by name."""
    stored = load_checkpoint(directory)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ContractError(
            f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise ContractError(
                f"{name}: checkpoint shape {arr.shape} != model {p.data.shape}"
            )
        p.data[...] = arr
