"""Searchable transformer dimensions and the genetic operators over them.

A space is five ranges (embedding dim, Q-K-V dim, MLP ratio, head count,
depth), each given as a (low, high, step) triple. Per-layer genes are the
(heads, qkv, ratio) combinations; embedding dim and depth are network-wide.
When `head_dim_lock` is set, qkv is forced to lock * heads and stops being an
independent gene.

Values are kept as exact rationals (Fraction) so half-step ratios like 3.5
never pick up float noise; integral values come back as plain ints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

from .errors import SpecError


def _rational(x):
    """Exact Fraction from int/float/str, via str to dodge float repr noise."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(x))


def _as_choice(f: Fraction):
    return int(f) if f.denominator == 1 else f


def _fmt(value) -> str:
    return str(value)  # Fraction prints as "7/2", ints as "7"


def _parse_value(s: str):
    return _as_choice(Fraction(s))


@dataclass(frozen=True)
class RangeTriple:
    """Inclusive (low, high, step) range of evenly spaced choices."""

    low: Fraction
    high: Fraction
    step: Fraction

    def __post_init__(self):
        object.__setattr__(self, "low", _rational(self.low))
        object.__setattr__(self, "high", _rational(self.high))
        object.__setattr__(self, "step", _rational(self.step))
        if self.step <= 0:
            raise SpecError(f"range step must be > 0, got {self.step}")
        if self.low > self.high:
            raise SpecError(f"range low {self.low} exceeds high {self.high}")
        if ((self.high - self.low) / self.step).denominator != 1:
            raise SpecError(
                f"range span {self.high}-{self.low} is not a multiple of step {self.step}"
            )

    def expand(self):
        """Ascending choice list {low, low+step, ..., high}."""
        count = int((self.high - self.low) / self.step) + 1
        return [_as_choice(self.low + i * self.step) for i in range(count)]

    def to_json(self):
        return [_fmt(_as_choice(self.low)), _fmt(_as_choice(self.high)), _fmt(_as_choice(self.step))]

    @classmethod
    def from_json(cls, seq):
        if not isinstance(seq, (list, tuple)) or len(seq) != 3:
            raise SpecError(f"range triple must be [low, high, step], got {seq!r}")
        return cls(*(_rational(v) for v in seq))


def expand(triple: RangeTriple):
    return triple.expand()


class LayerGene(NamedTuple):
    num_heads: int
    qkv_dim: int
    mlp_ratio: object  # int or Fraction


@dataclass(frozen=True)
class SpaceSpec:
    """The searchable ranges defining all legal architectures."""

    embed_dim: RangeTriple
    qkv_dim: RangeTriple
    mlp_ratio: RangeTriple
    num_heads: RangeTriple
    depth: RangeTriple
    head_dim_lock: Optional[int] = None

    def __post_init__(self):
        for name in ("embed_dim", "qkv_dim", "num_heads", "depth"):
            for v in getattr(self, name).expand():
                if not isinstance(v, int) or v <= 0:
                    raise SpecError(f"{name} choices must be positive integers, got {v}")
        if self.head_dim_lock is not None:
            if self.head_dim_lock <= 0:
                raise SpecError(f"head_dim_lock must be positive, got {self.head_dim_lock}")
            qkv_set = set(self.qkv_dim.expand())
            for h in self.num_heads.expand():
                if self.head_dim_lock * h not in qkv_set:
                    raise SpecError(
                        f"head_dim_lock {self.head_dim_lock} x heads {h} = "
                        f"{self.head_dim_lock * h} is outside the qkv choices {sorted(qkv_set)}"
                    )
        if not self.layer_choices():
            raise SpecError("no head/qkv combination satisfies divisibility; space is empty")

    def embed_choices(self):
        return self.embed_dim.expand()

    def depth_choices(self):
        return self.depth.expand()

    def ratio_choices(self):
        return self.mlp_ratio.expand()

    def heads_choices(self):
        return self.num_heads.expand()

    def qkv_choices(self):
        return self.qkv_dim.expand()

    def layer_choices(self):
        """All valid per-layer (heads, qkv, ratio) genes, in a fixed order.

        qkv must be divisible by heads; under head_dim_lock the qkv value is
        implied by the head count and is not free.
        """
        ratios = self.ratio_choices()
        combos = []
        if self.head_dim_lock is not None:
            for h in self.heads_choices():
                q = self.head_dim_lock * h
                for r in ratios:
                    combos.append(LayerGene(h, q, r))
        else:
            for h in self.heads_choices():
                for q in self.qkv_choices():
                    if q % h == 0:
                        for r in ratios:
                            combos.append(LayerGene(h, q, r))
        return combos

    def max_dims(self):
        """(max_embed, max_qkv, max_hidden, max_depth, max_heads) reachable."""
        max_embed = max(self.embed_choices())
        combos = self.layer_choices()
        max_qkv = max(g.qkv_dim for g in combos)
        max_ratio = max(g.mlp_ratio for g in combos)
        max_hidden = math.ceil(max_ratio * max_embed)
        return max_embed, max_qkv, max_hidden, max(self.depth_choices()), max(
            g.num_heads for g in combos
        )

    def to_dict(self):
        d = {
            "embed_dim": self.embed_dim.to_json(),
            "qkv_dim": self.qkv_dim.to_json(),
            "mlp_ratio": self.mlp_ratio.to_json(),
            "num_heads": self.num_heads.to_json(),
            "depth": self.depth.to_json(),
        }
        if self.head_dim_lock is not None:
            d["head_dim_lock"] = self.head_dim_lock
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"embed_dim", "qkv_dim", "mlp_ratio", "num_heads", "depth", "head_dim_lock"}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown space keys: {sorted(unknown)}")
        missing = known - {"head_dim_lock"} - set(d)
        if missing:
            raise SpecError(f"space is missing keys: {sorted(missing)}")
        lock = d.get("head_dim_lock")
        if lock is not None:
            lock = int(lock)
        return cls(
            embed_dim=RangeTriple.from_json(d["embed_dim"]),
            qkv_dim=RangeTriple.from_json(d["qkv_dim"]),
            mlp_ratio=RangeTriple.from_json(d["mlp_ratio"]),
            num_heads=RangeTriple.from_json(d["num_heads"]),
            depth=RangeTriple.from_json(d["depth"]),
            head_dim_lock=lock,
        )

    def digest(self) -> str:
        """Stable short hash used to match checkpoints against configs."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


# The three built-in supernet spaces. Head dim locks to 64 by default, which
# every row's qkv/heads choices are consistent with; pass head_dim_lock=None
# to treat qkv as an independent per-layer gene instead.
_PRESETS = {
    "tiny": dict(embed=(192, 240, 24), qkv=(192, 256, 64), ratio=("3.5", "4", "0.5"),
                 heads=(3, 4, 1), depth=(12, 14, 1)),
    "small": dict(embed=(320, 448, 64), qkv=(320, 448, 64), ratio=("3", "4", "0.5"),
                  heads=(5, 7, 1), depth=(12, 14, 1)),
    "base": dict(embed=(528, 624, 48), qkv=(512, 640, 64), ratio=("3", "4", "0.5"),
                 heads=(8, 10, 1), depth=(14, 16, 1)),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, head_dim_lock: Optional[int] = 64) -> SpaceSpec:
    if name not in _PRESETS:
        raise SpecError(f"unknown preset {name!r}; expected one of {list(_PRESETS)}")
    p = _PRESETS[name]
    return SpaceSpec(
        embed_dim=RangeTriple.from_json(p["embed"]),
        qkv_dim=RangeTriple.from_json(p["qkv"]),
        mlp_ratio=RangeTriple.from_json(p["ratio"]),
        num_heads=RangeTriple.from_json(p["heads"]),
        depth=RangeTriple.from_json(p["depth"]),
        head_dim_lock=head_dim_lock,
    )


@dataclass(frozen=True)
class ArchConfig:
    """One concrete subnet: embedding dim plus per-layer genes."""

    embed_dim: int
    layers: tuple  # tuple[LayerGene, ...]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def key(self) -> str:
        """Canonical string encoding, decodable back via `parse_arch_key`."""
        genes = ",".join(f"{g.num_heads}.{g.qkv_dim}.{_fmt(g.mlp_ratio)}" for g in self.layers)
        return f"e{self.embed_dim}d{self.depth}:{genes}"

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "layers": [[g.num_heads, g.qkv_dim, _fmt(g.mlp_ratio)] for g in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        known = {"embed_dim", "depth", "layers"}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown architecture keys: {sorted(unknown)}")
        layers = tuple(
            LayerGene(int(h), int(q), _parse_value(str(r))) for h, q, r in d["layers"]
        )
        if "depth" in d and int(d["depth"]) != len(layers):
            raise SpecError(f"depth {d['depth']} does not match {len(layers)} layer genes")
        return cls(embed_dim=int(d["embed_dim"]), layers=layers)


def parse_arch_key(key: str) -> ArchConfig:
    try:
        head, genes = key.split(":")
        if not head.startswith("e"):
            raise ValueError("missing embed marker")
        embed, depth = head[1:].split("d")
        layers = []
        if genes:
            for part in genes.split(","):
                h, q, r = part.split(".", 2)
                layers.append(LayerGene(int(h), int(q), _parse_value(r)))
        arch = ArchConfig(embed_dim=int(embed), layers=tuple(layers))
    except (ValueError, IndexError) as e:
        raise SpecError(f"malformed architecture key {key!r}") from e
    if arch.depth != int(depth):
        raise SpecError(f"architecture key {key!r} depth mismatch")
    return arch


def validate(arch: ArchConfig, spec: SpaceSpec) -> None:
    """Raise SpecError unless every gene is a member of its choice set."""
    if arch.embed_dim not in spec.embed_choices():
        raise SpecError(f"embed_dim {arch.embed_dim} not in {spec.embed_choices()}")
    if arch.depth not in spec.depth_choices():
        raise SpecError(f"depth {arch.depth} not in {spec.depth_choices()}")
    combos = set(spec.layer_choices())
    for i, gene in enumerate(arch.layers):
        if gene.qkv_dim % gene.num_heads != 0:
            raise SpecError(f"layer {i}: qkv {gene.qkv_dim} not divisible by heads {gene.num_heads}")
        if LayerGene(*gene) not in combos:
            raise SpecError(f"layer {i} gene {tuple(gene)} not a member of the space")


def is_valid(arch: ArchConfig, spec: SpaceSpec) -> bool:
    try:
        validate(arch, spec)
    except SpecError:
        return False
    return True


def _draw(rng, choices):
    return choices[int(rng.integers(len(choices)))]


def sample_uniform(spec: SpaceSpec, rng) -> ArchConfig:
    """Uniform architecture: depth, embed, then one uniform gene per layer."""
    depth = _draw(rng, spec.depth_choices())
    embed = _draw(rng, spec.embed_choices())
    combos = spec.layer_choices()
    layers = tuple(_draw(rng, combos) for _ in range(depth))
    return ArchConfig(embed_dim=embed, layers=layers)


def minimal_arch(spec: SpaceSpec) -> ArchConfig:
    combos = spec.layer_choices()
    smallest = min(combos, key=lambda g: (g.qkv_dim, g.mlp_ratio, g.num_heads))
    depth = min(spec.depth_choices())
    return ArchConfig(embed_dim=min(spec.embed_choices()), layers=(smallest,) * depth)


def maximal_arch(spec: SpaceSpec) -> ArchConfig:
    combos = spec.layer_choices()
    largest = max(combos, key=lambda g: (g.qkv_dim, g.mlp_ratio, g.num_heads))
    depth = max(spec.depth_choices())
    return ArchConfig(embed_dim=max(spec.embed_choices()), layers=(largest,) * depth)


def cardinality(spec: SpaceSpec) -> int:
    """Exact architecture count: |embed| * sum_d |layer genes|^d."""
    n_combo = len(spec.layer_choices())
    total = sum(n_combo**d for d in spec.depth_choices())
    return len(spec.embed_choices()) * total


def mutate(arch: ArchConfig, spec: SpaceSpec, p_depth: float, p_gene: float, rng) -> ArchConfig:
    """Depth resampled with probability p_depth (list truncated or extended
    with fresh uniform genes), then every layer gene and the embedding dim
    each resampled with probability p_gene."""
    combos = spec.layer_choices()
    layers = list(arch.layers)
    if rng.random() < p_depth:
        new_depth = _draw(rng, spec.depth_choices())
        if new_depth <= len(layers):
            layers = layers[:new_depth]
        else:
            layers += [_draw(rng, combos) for _ in range(new_depth - len(layers))]
    for i in range(len(layers)):
        if rng.random() < p_gene:
            layers[i] = _draw(rng, combos)
    embed = arch.embed_dim
    if rng.random() < p_gene:
        embed = _draw(rng, spec.embed_choices())
    return ArchConfig(embed_dim=embed, layers=tuple(layers))


def crossover(a: ArchConfig, b: ArchConfig, spec: SpaceSpec, rng) -> ArchConfig:
    """Uniform crossover: depth from one parent, every other gene from
    whichever parent has it (either, when both are deep enough).

    Both parents must be valid under the same spec, so a mixed child is
    valid by construction; parents with incompatible per-layer choice sets
    cannot arise.
    """
    depth = a.depth if rng.random() < 0.5 else b.depth
    embed = a.embed_dim if rng.random() < 0.5 else b.embed_dim
    layers = []
    for i in range(depth):
        donors = [p.layers[i] for p in (a, b) if i < p.depth]
        layers.append(donors[0] if len(donors) == 1 else donors[int(rng.integers(2))])
    return ArchConfig(embed_dim=embed, layers=tuple(layers))
