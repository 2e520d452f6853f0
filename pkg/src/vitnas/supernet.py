"""Maximal weight store and elastic subnet execution.

One tensor per named slot, allocated at the largest extents the space can
reach; any subnet's weights are the leading-index sub-blocks of those
tensors. Two choices of a block in the same layer therefore always satisfy
the nesting relation (the smaller one's parameters are a prefix-subset of
the larger one's). The classical baseline, DisjointStore, instead gives
every per-layer block choice its own tensors.

A SubnetView holds slice descriptors only; no weight data is copied. Forward
passes wrap the sliced regions in autograd Tensors that alias the store, so
optimizer writes through a view land in the store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ShapeError, SpecError
from .metrics import Geometry, hidden_dim
from .space import ArchConfig, SpaceSpec, validate

LN_EPS = 1e-6
INIT_STD = 0.02


def trunc_normal(rng, shape, std=INIT_STD, dtype=np.float32):
    """Normal(0, std) truncated at two standard deviations, via resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, tokens, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    nh, nw = h // patch, w // patch
    x = images.reshape(b, nh, patch, nw, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, nh * nw, patch * patch * c)


def to_model_input(images: np.ndarray, dtype) -> np.ndarray:
    """Map uint8 pixels to [-1, 1]; float input passes through as-is."""
    if np.issubdtype(images.dtype, np.integer):
        return (images.astype(dtype) / 255.0 - 0.5) * 2.0
    return images.astype(dtype, copy=False)


@dataclass(frozen=True)
class StoreDims:
    """Maximal extents the store allocates."""

    embed: int
    qkv: int
    hidden: int
    depth: int

    @classmethod
    def from_spec(cls, spec: SpaceSpec):
        e, q, h, d, _ = spec.max_dims()
        return cls(embed=e, qkv=q, hidden=h, depth=d)

    @classmethod
    def from_arch(cls, arch: ArchConfig):
        return cls(
            embed=arch.embed_dim,
            qkv=max(g.qkv_dim for g in arch.layers) if arch.layers else 1,
            hidden=max(hidden_dim(g.mlp_ratio, arch.embed_dim) for g in arch.layers)
            if arch.layers
            else 1,
            depth=arch.depth,
        )


def _shared_shapes(dims: StoreDims, geom: Geometry):
    e = dims.embed
    return {
        "patch.w": (e, geom.patch_pixels),
        "patch.b": (e,),
        "cls": (e,),
        "pos": (geom.tokens + 1, e),
        "norm.g": (e,),
        "norm.b": (e,),
        "head.w": (geom.classes, e),
        "head.b": (geom.classes,),
    }


def _block_shapes(e: int, q: int, hid: int):
    return {
        "ln1.g": (e,), "ln1.b": (e,),
        "q.w": (q, e), "q.b": (q,),
        "k.w": (q, e), "k.b": (q,),
        "v.w": (q, e), "v.b": (q,),
        "proj.w": (e, q), "proj.b": (e,),
        "ln2.g": (e,), "ln2.b": (e,),
        "fc1.w": (hid, e), "fc1.b": (hid,),
        "fc2.w": (e, hid), "fc2.b": (e,),
    }


def _init_tensor(name, shape, rng, dtype):
    if name.endswith(".w") or name in ("cls", "pos"):
        return trunc_normal(rng, shape, dtype=dtype)
    if name.endswith(".g"):
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)  # biases, LN beta


def decays(name: str) -> bool:
    """Weight decay applies to 2-D projection weights only."""
    return name.endswith(".w")


class EntangledStore:
    """Weight store whose subnets are leading-index slices of shared tensors."""

    kind = "entangled"

    def __init__(self, spec, geom, dims, dtype, gelu_form, tensors):
        self.spec = spec
        self.geom = geom
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.gelu_form = gelu_form
        self.tensors = tensors

    def total_size(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy_tensors(self):
        return {k: v.copy() for k, v in self.tensors.items()}

    def clone(self):
        return EntangledStore(self.spec, self.geom, self.dims, self.dtype,
                              self.gelu_form, self.copy_tensors())


class DisjointStore:
    """Classical-sharing baseline: every per-layer block choice owns a full,
    independent weight set (attention blocks keyed by (heads, qkv), MLP
    blocks keyed by ratio). The embedding axis is network-wide, not a block
    choice, so it stays elastic inside each block."""

    kind = "disjoint"

    def __init__(self, spec, geom, dims, dtype, gelu_form, tensors, msa_choices, mlp_choices):
        self.spec = spec
        self.geom = geom
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.gelu_form = gelu_form
        self.tensors = tensors
        self.msa_choices = msa_choices
        self.mlp_choices = mlp_choices

    total_size = EntangledStore.total_size
    copy_tensors = EntangledStore.copy_tensors

    def clone(self):
        return DisjointStore(self.spec, self.geom, self.dims, self.dtype,
                             self.gelu_form, self.copy_tensors(),
                             self.msa_choices, self.mlp_choices)


def _msa_slot(layer, heads, qkv):
    return f"L{layer}.msa{heads}x{qkv}"


def _mlp_slot(layer, ratio):
    return f"L{layer}.mlp{ratio}"


def build(spec: SpaceSpec, geom: Geometry, init_seed: int, dtype=np.float32,
          gelu_form="tanh") -> EntangledStore:
    """Allocate and initialize the maximal tensors for a search space."""
    dims = StoreDims.from_spec(spec)
    rng = np.random.default_rng(init_seed)
    tensors = {}
    for name, shape in _shared_shapes(dims, geom).items():
        tensors[name] = _init_tensor(name, shape, rng, dtype)
    for i in range(dims.depth):
        for name, shape in _block_shapes(dims.embed, dims.qkv, dims.hidden).items():
            full = f"L{i}.{name}"
            tensors[full] = _init_tensor(full, shape, rng, dtype)
    return EntangledStore(spec, geom, dims, dtype, gelu_form, tensors)


def build_disjoint(spec: SpaceSpec, geom: Geometry, init_seed: int, dtype=np.float32,
                   gelu_form="tanh") -> DisjointStore:
    """Allocate the classical baseline: one weight set per block choice."""
    dims = StoreDims.from_spec(spec)
    rng = np.random.default_rng(init_seed)
    combos = spec.layer_choices()
    msa_choices = sorted({(g.num_heads, g.qkv_dim) for g in combos})
    mlp_choices = sorted({g.mlp_ratio for g in combos})
    tensors = {}
    for name, shape in _shared_shapes(dims, geom).items():
        tensors[name] = _init_tensor(name, shape, rng, dtype)
    e = dims.embed
    for i in range(dims.depth):
        for h, q in msa_choices:
            prefix = _msa_slot(i, h, q)
            for name in ("ln1.g", "ln1.b", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b",
                         "proj.w", "proj.b"):
                shape = _block_shapes(e, q, 1)[name]
                full = f"{prefix}.{name}"
                tensors[full] = _init_tensor(full, shape, rng, dtype)
        for r in mlp_choices:
            prefix = _mlp_slot(i, r)
            hid = hidden_dim(r, e)
            for name in ("ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"):
                shape = _block_shapes(e, 1, hid)[name]
                full = f"{prefix}.{name}"
                tensors[full] = _init_tensor(full, shape, rng, dtype)
    return DisjointStore(spec, geom, dims, dtype, gelu_form, tensors, msa_choices, mlp_choices)


def standalone_store(arch: ArchConfig, geom: Geometry, init_seed: int, dtype=np.float32,
                     gelu_form="tanh") -> EntangledStore:
    """A store sized exactly for one architecture (no search space attached)."""
    dims = StoreDims.from_arch(arch)
    rng = np.random.default_rng(init_seed)
    tensors = {}
    for name, shape in _shared_shapes(dims, geom).items():
        tensors[name] = _init_tensor(name, shape, rng, dtype)
    for i in range(dims.depth):
        for name, shape in _block_shapes(dims.embed, dims.qkv, dims.hidden).items():
            full = f"L{i}.{name}"
            tensors[full] = _init_tensor(full, shape, rng, dtype)
    return EntangledStore(None, geom, dims, dtype, gelu_form, tensors)


@dataclass
class SubnetView:
    """Resolved slice descriptors for one architecture; aliases the store."""

    arch: ArchConfig
    store: object
    entries: dict = field(repr=False)  # logical name -> (slot name, region)

    def param_count(self) -> int:
        total = 0
        for slot, region in self.entries.values():
            shape = self.store.tensors[slot].shape
            n = 1
            for sl, extent in zip(region, shape):
                n *= len(range(*sl.indices(extent)))
            total += n
        return total

    def materialize(self, requires_grad=False):
        """Wrap every sliced region in a Tensor aliasing the store."""
        return {
            logical: ag.Tensor(self.store.tensors[slot][region], requires_grad=requires_grad)
            for logical, (slot, region) in self.entries.items()
        }


def _full(*extents):
    return tuple(slice(0, e) for e in extents)


def _shared_entries(arch, geom):
    e = arch.embed_dim
    return {
        "patch.w": ("patch.w", _full(e, geom.patch_pixels)),
        "patch.b": ("patch.b", _full(e)),
        "cls": ("cls", _full(e)),
        "pos": ("pos", _full(geom.tokens + 1, e)),
        "norm.g": ("norm.g", _full(e)),
        "norm.b": ("norm.b", _full(e)),
        "head.w": ("head.w", _full(geom.classes, e)),
        "head.b": ("head.b", _full(geom.classes)),
    }


def _layer_entries(i, gene, embed, slot_prefixes):
    """Logical layer entries; slot_prefixes = (msa prefix, mlp prefix)."""
    q = gene.qkv_dim
    hid = hidden_dim(gene.mlp_ratio, embed)
    msa, mlp = slot_prefixes
    return {
        f"L{i}.ln1.g": (f"{msa}.ln1.g", _full(embed)),
        f"L{i}.ln1.b": (f"{msa}.ln1.b", _full(embed)),
        f"L{i}.q.w": (f"{msa}.q.w", _full(q, embed)),
        f"L{i}.q.b": (f"{msa}.q.b", _full(q)),
        f"L{i}.k.w": (f"{msa}.k.w", _full(q, embed)),
        f"L{i}.k.b": (f"{msa}.k.b", _full(q)),
        f"L{i}.v.w": (f"{msa}.v.w", _full(q, embed)),
        f"L{i}.v.b": (f"{msa}.v.b", _full(q)),
        f"L{i}.proj.w": (f"{msa}.proj.w", _full(embed, q)),
        f"L{i}.proj.b": (f"{msa}.proj.b", _full(embed)),
        f"L{i}.ln2.g": (f"{mlp}.ln2.g", _full(embed)),
        f"L{i}.ln2.b": (f"{mlp}.ln2.b", _full(embed)),
        f"L{i}.fc1.w": (f"{mlp}.fc1.w", _full(hid, embed)),
        f"L{i}.fc1.b": (f"{mlp}.fc1.b", _full(hid)),
        f"L{i}.fc2.w": (f"{mlp}.fc2.w", _full(embed, hid)),
        f"L{i}.fc2.b": (f"{mlp}.fc2.b", _full(embed)),
    }


def _check_capacity(store, arch):
    dims = store.dims
    if arch.depth > dims.depth or arch.embed_dim > dims.embed:
        raise SpecError(
            f"architecture {arch.key()} exceeds store capacity {dims}"
        )
    for gene in arch.layers:
        if gene.qkv_dim > dims.qkv or hidden_dim(gene.mlp_ratio, arch.embed_dim) > dims.hidden:
            raise SpecError(f"architecture {arch.key()} exceeds store capacity {dims}")


def view(store: EntangledStore, arch: ArchConfig) -> SubnetView:
    """Slice descriptors for `arch` into an entangled (or standalone) store."""
    if store.spec is not None:
        validate(arch, store.spec)
    _check_capacity(store, arch)
    entries = _shared_entries(arch, store.geom)
    for i, gene in enumerate(arch.layers):
        entries.update(_layer_entries(i, gene, arch.embed_dim, (f"L{i}", f"L{i}")))
    return SubnetView(arch=arch, store=store, entries=entries)


def disjoint_view(store: DisjointStore, arch: ArchConfig) -> SubnetView:
    """Like `view`, but each block resolves to its own choice's tensors."""
    validate(arch, store.spec)
    entries = _shared_entries(arch, store.geom)
    for i, gene in enumerate(arch.layers):
        prefixes = (
            _msa_slot(i, gene.num_heads, gene.qkv_dim),
            _mlp_slot(i, gene.mlp_ratio),
        )
        entries.update(_layer_entries(i, gene, arch.embed_dim, prefixes))
    return SubnetView(arch=arch, store=store, entries=entries)


def subnet_view(store, arch) -> SubnetView:
    """Dispatch on the store kind."""
    if isinstance(store, DisjointStore):
        return disjoint_view(store, arch)
    return view(store, arch)


def trainable_params(v: SubnetView):
    """Iterate (slot name, region) over exactly what the subnet touches."""
    for slot, region in v.entries.values():
        yield slot, region


def multihead_attention(q, k, v, num_heads, attn_sink=None):
    """Self-attention over already-projected q/k/v of shape (B, T, qkv).

    The sliced qkv rows are split contiguously into `num_heads` groups;
    scores scale by 1/sqrt(per-head dim). Attention rows sum to 1 by
    construction of the softmax.
    """
    b, t, width = q.shape
    if width % num_heads:
        raise ShapeError(f"qkv width {width} not divisible by {num_heads} heads")
    dh = width // num_heads

    def split(x):
        return ag.transpose(ag.reshape(x, (b, t, num_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = ag.softmax_rows(scores)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    out = ag.matmul(attn, vh)
    return ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, width))


def forward_params(params, arch: ArchConfig, geom: Geometry, images: np.ndarray,
                   gelu_form="tanh", attn_sink=None):
    """Transformer forward through a materialized parameter dict.

    images: (B, H, W, C), uint8 or float. Returns the logits Tensor.
    """
    if images.ndim != 4 or images.shape[1:] != (geom.height, geom.width, geom.channels):
        raise ShapeError(
            f"images shape {images.shape} does not match geometry "
            f"(B, {geom.height}, {geom.width}, {geom.channels})"
        )
    dtype = params["patch.w"].dtype
    x_np = patchify(to_model_input(images, dtype), geom.patch)
    b = x_np.shape[0]

    x = ag.linear(ag.Tensor(x_np), params["patch.w"], params["patch.b"])
    cls = ag.broadcast_to(ag.reshape(params["cls"], (1, 1, arch.embed_dim)),
                          (b, 1, arch.embed_dim))
    x = ag.concat([cls, x], axis=1)
    x = x + params["pos"]

    for i, gene in enumerate(arch.layers):
        y = ag.layernorm(x, params[f"L{i}.ln1.g"], params[f"L{i}.ln1.b"], LN_EPS)
        q = ag.linear(y, params[f"L{i}.q.w"], params[f"L{i}.q.b"])
        k = ag.linear(y, params[f"L{i}.k.w"], params[f"L{i}.k.b"])
        v = ag.linear(y, params[f"L{i}.v.w"], params[f"L{i}.v.b"])
        att = multihead_attention(q, k, v, gene.num_heads, attn_sink)
        x = x + ag.linear(att, params[f"L{i}.proj.w"], params[f"L{i}.proj.b"])

        y = ag.layernorm(x, params[f"L{i}.ln2.g"], params[f"L{i}.ln2.b"], LN_EPS)
        y = ag.linear(y, params[f"L{i}.fc1.w"], params[f"L{i}.fc1.b"])
        y = ag.gelu(y, gelu_form)
        y = ag.linear(y, params[f"L{i}.fc2.w"], params[f"L{i}.fc2.b"])
        x = x + y

    x = ag.layernorm(x, params["norm.g"], params["norm.b"], LN_EPS)
    cls_row = x[:, 0]
    return ag.linear(cls_row, params["head.w"], params["head.b"])


def forward(v: SubnetView, images: np.ndarray, attn_sink=None):
    """Inference forward through a view; returns the logits Tensor."""
    params = v.materialize(requires_grad=False)
    return forward_params(params, v.arch, v.store.geom, images,
                          v.store.gelu_form, attn_sink)


def extract(store, arch: ArchConfig, dtype=None) -> EntangledStore:
    """Copy a subnet's weights out into a standalone store of its own size."""
    src = subnet_view(store, arch)
    dst_store = standalone_store(arch, store.geom, init_seed=0,
                                 dtype=dtype or store.dtype,
                                 gelu_form=store.gelu_form)
    dst = view(dst_store, arch)
    for logical, (slot, region) in src.entries.items():
        d_slot, d_region = dst.entries[logical]
        dst_store.tensors[d_slot][d_region] = store.tensors[slot][region]
    return dst_store
