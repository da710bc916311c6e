"""
Versioned binary checkpoint container.

Layout (little-endian)::

    b"AGANCKPT"            8-byte magic
    uint32                 format version
    uint64                 header length L
    L bytes                UTF-8 JSON header (sorted keys): specs, tensor index, metadata
    payload                raw tensor bytes, concatenated in index order
    32 bytes               SHA-256 of everything above

A pretty-printed copy of the header is mirrored to ``<path>.json``.
"""

import hashlib
import json
import os
import struct

import numpy as np
import torch

from adaptive_gan.errors import CorruptCheckpointError, IoError, VersionError
from adaptive_gan.models import (
    ClassifierHandle,
    DiscriminatorHandle,
    GeneratorHandle,
    instantiate_model,
    spec_from_dict,
    spec_to_dict,
)

MAGIC = b"AGANCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_BYTES = 32
_HANDLE_KINDS = {cls.__name__: cls for cls in (GeneratorHandle, DiscriminatorHandle, ClassifierHandle)}


def _encode(handles, metadata):
    index, chunks, offset = {}, [], 0
    for role in sorted(handles):
        handle = handles[role]
        tensors = []
        for name, tensor in handle.module.state_dict().items():
            arr = tensor.detach().cpu().contiguous().numpy()
            raw = arr.tobytes()
            tensors.append(
                {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
        entry = {
            "kind": type(handle).__name__,
            "spec": spec_to_dict(handle.spec),
            "param_version": handle.param_version,
            "checksum": handle.checksum(),
            "tensors": tensors,
        }
        if isinstance(handle, ClassifierHandle):
            entry["frozen"] = handle.frozen
        index[role] = entry
    header = {"format_version": FORMAT_VERSION, "handles": index, "metadata": metadata}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest(), header


def save_checkpoint(handles, metadata, path):
    """Write ``handles`` (role name -> handle) plus JSON-able ``metadata``.

    Returns the SHA-256 hex digest stored in the file trailer.
    """
    blob, header = _encode(handles, metadata or {})
    tmp = f"{path}.tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
        with open(f"{path}.json", "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return blob[-_DIGEST_BYTES:].hex()


def file_checksum(path):
    with open(path, "rb") as f:
        f.seek(-_DIGEST_BYTES, os.SEEK_END)
        return f.read().hex()


def load_checkpoint(path):
    """Return ``(handles, metadata)``; raises before building anything on a bad file."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size + _DIGEST_BYTES:
        raise CorruptCheckpointError(f"{path}: file too short")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST_BYTES], blob[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = memoryview(body)[start + header_len :]

    handles = {}
    for role, entry in header["handles"].items():
        handle = instantiate_model(spec_from_dict(entry["spec"]))
        if type(handle).__name__ != entry["kind"]:
            raise CorruptCheckpointError(f"{path}: role {role} kind mismatch")
        state = {}
        for t in entry["tensors"]:
            raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
            state[t["name"]] = torch.from_numpy(arr)
        handle.module.load_state_dict(state)
        handle.module.eval()
        handle.param_version = entry["param_version"]
        if entry.get("frozen"):
            handle.freeze()
        handles[role] = handle
    return handles, header["metadata"]
