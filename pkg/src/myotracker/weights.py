"""On-disk weight storage.

Layout: 8-byte magic ``MYOTRKW1``, a little-endian u64 byte length, a
UTF-8 JSON manifest (tensor names, shapes, byte offsets, plus a 64-bit
architecture fingerprint of the generating configuration), then the raw
little-endian float32 blob. Round trips are bit exact; loading verifies
the magic, the blob size, and the fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelConfig, MyoTracker

MAGIC = b"MYOTRKW1"

# fields that determine weight shapes / semantics; runtime toggles such as
# refinement_iters or window_length reuse the same weights
_FINGERPRINT_FIELDS = (
    "d_feat",
    "encoder_channels",
    "pyramid_levels",
    "kernel_size",
    "d_model",
    "n_blocks",
    "n_heads",
    "ffn_dim",
    "coord_embed_dim",
)


class WeightStoreError(Exception):
    pass


def config_fingerprint(config: ModelConfig) -> str:
    """64-bit hex digest over the architecture-defining config fields."""
    payload = {k: getattr(config, k) for k in _FINGERPRINT_FIELDS}
    payload["encoder_channels"] = list(payload["encoder_channels"])
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


class WeightStore:
    """Named float32 tensors plus the fingerprint of their architecture."""

    def __init__(self, tensors: dict, fingerprint: str):
        self.tensors = {k: np.asarray(v, dtype="<f4") for k, v in tensors.items()}
        self.fingerprint = fingerprint

    @classmethod
    def from_model(cls, model: MyoTracker) -> "WeightStore":
        tensors = {name: p.data.copy() for name, p in model.named_parameters()}
        return cls(tensors, config_fingerprint(model.config))

    def apply_to(self, model: MyoTracker) -> MyoTracker:
        if config_fingerprint(model.config) != self.fingerprint:
            raise WeightStoreError(
                f"fingerprint mismatch: store {self.fingerprint} vs model config "
                f"{config_fingerprint(model.config)}"
            )
        params = dict(model.named_parameters())
        missing = set(params) ^ set(self.tensors)
        if missing:
            raise WeightStoreError(f"tensor name mismatch: {sorted(missing)[:5]}")
        for name, arr in self.tensors.items():
            p = params[name]
            if p.shape != arr.shape:
                raise WeightStoreError(
                    f"shape mismatch for {name}: {p.shape} vs {arr.shape}"
                )
            p.data = arr.astype(np.float32, copy=True)
        return model


def save_weights(store: WeightStore, path) -> None:
    entries = []
    offset = 0
    chunks = []
    for name in sorted(store.tensors):
        arr = np.ascontiguousarray(store.tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {"fingerprint": store.fingerprint, "tensors": entries, "blob_bytes": offset}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path, config: ModelConfig | None = None) -> WeightStore:
    """Read a weight store; when ``config`` is given, verify its fingerprint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise WeightStoreError(f"{path}: not a weight file (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise WeightStoreError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightStoreError(f"{path}: corrupt manifest: {exc}") from exc
    blob = raw[16 + mlen :]
    expected = manifest.get("blob_bytes", 0)
    if len(blob) != expected:
        raise WeightStoreError(
            f"{path}: blob size {len(blob)} does not match manifest ({expected})"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise WeightStoreError(f"{path}: tensor {entry['name']} exceeds blob")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
    store = WeightStore(tensors, manifest["fingerprint"])
    if config is not None and config_fingerprint(config) != store.fingerprint:
        raise WeightStoreError(
            f"{path}: fingerprint {store.fingerprint} does not match the given "
            f"config ({config_fingerprint(config)})"
        )
    return store
