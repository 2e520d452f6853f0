"""Checkpoint serialization: JSON header plus concatenated float32 blobs.

Layout: magic "VNCK1\\n", a little-endian u32 header length, the UTF-8 JSON
header, then raw little-endian float32 tensor data in manifest order. The
manifest lists (name, shape, byte offset into the blob section); offsets are
required to be gap-free. Floats are 32-bit on disk regardless of in-memory
precision; the header records which precision to restore.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .metrics import Geometry
from .space import SpaceSpec
from .supernet import DisjointStore, EntangledStore, StoreDims, build_disjoint

MAGIC = b"VNCK1\n"
FORMAT_VERSION = 1


def _manifest_arrays(store, opt=None):
    """Deterministically ordered (name, array) pairs: weights then moments."""
    pairs = [(name, arr) for name, arr in sorted(store.tensors.items())]
    if opt is not None:
        for name in sorted(opt.state):
            slot = opt.state[name]
            for part in ("m", "v", "t"):
                pairs.append((f"opt.{name}.{part}", slot[part]))
    return pairs


def save_checkpoint(path, store, *, epoch=0, opt=None, rng_states=None,
                    train_config=None, extra=None) -> None:
    pairs = _manifest_arrays(store, opt)
    manifest = []
    offset = 0
    for name, arr in pairs:
        manifest.append([name, list(arr.shape), offset])
        offset += arr.size * 4
    header = {
        "format": FORMAT_VERSION,
        "kind": store.kind,
        "dtype": store.dtype.name,
        "gelu_form": store.gelu_form,
        "space": store.spec.to_dict() if store.spec is not None else None,
        "space_digest": store.spec.digest() if store.spec is not None else None,
        "geometry": store.geom.to_dict(),
        "dims": {"embed": store.dims.embed, "qkv": store.dims.qkv,
                 "hidden": store.dims.hidden, "depth": store.dims.depth},
        "epoch": epoch,
        "rng": rng_states,
        "train_config": train_config,
        "extra": extra or {},
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in pairs:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class Checkpoint:
    def __init__(self, store, header, opt_state):
        self.store = store
        self.header = header
        self.opt_state = opt_state  # name -> {"m","v","t"} float arrays or None

    @property
    def epoch(self):
        return self.header["epoch"]

    @property
    def rng_states(self):
        return self.header["rng"]

    @property
    def train_config(self):
        return self.header["train_config"]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:6]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable header: {e}") from e
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format {header.get('format')}")

    data_start = hstart + hlen
    expected = data_start
    for name, shape, offset in header["manifest"]:
        if data_start + offset != expected:
            raise DataError(f"{path}: manifest offset for {name} leaves a gap")
        expected += int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
    if expected != len(blob):
        raise DataError(f"{path}: length {len(blob)} != {expected} implied by manifest")
    arrays = {}
    for name, shape, offset in header["manifest"]:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[name] = np.frombuffer(
            blob, dtype="<f4", count=size, offset=data_start + offset
        ).reshape(shape)

    dtype = np.dtype(header["dtype"])
    geom = Geometry.from_dict(header["geometry"])
    spec = SpaceSpec.from_dict(header["space"]) if header["space"] else None
    dims = StoreDims(**header["dims"])
    weights = {n: a.astype(dtype) for n, a in arrays.items() if not n.startswith("opt.")}

    if header["kind"] == "disjoint":
        if spec is None:
            raise DataError(f"{path}: disjoint checkpoint without a space")
        shell = build_disjoint(spec, geom, init_seed=0, dtype=dtype,
                               gelu_form=header["gelu_form"])
        if set(shell.tensors) != set(weights):
            raise DataError(f"{path}: tensor names do not match the declared space")
        store = DisjointStore(spec, geom, dims, dtype, header["gelu_form"], weights,
                              shell.msa_choices, shell.mlp_choices)
    else:
        store = EntangledStore(spec, geom, dims, dtype, header["gelu_form"], weights)

    opt_state = None
    opt_names = [n for n in arrays if n.startswith("opt.")]
    if opt_names:
        opt_state = {}
        for n in opt_names:
            base, part = n[4:].rsplit(".", 1)
            slot = opt_state.setdefault(base, {})
            arr = arrays[n]
            slot[part] = arr.copy() if part == "t" else arr.astype(dtype)
    return Checkpoint(store, header, opt_state)


def restore_optimizer(opt, opt_state) -> None:
    """Install a loaded moment/step state into a fresh AdamW."""
    if opt_state:
        opt.state = {name: {k: np.ascontiguousarray(v) for k, v in slot.items()}
                     for name, slot in opt_state.items()}
