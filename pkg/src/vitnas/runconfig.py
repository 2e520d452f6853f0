"""Run configuration: one JSON document with space/data/train/search/output
sections. Unknown keys are rejected at every level, so typos fail loudly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SpecError
from .evolution import SearchConfig
from .space import SpaceSpec, preset
from .trainer import TrainConfig

OUTDIR_ENV = "VITNAS_OUTDIR"

_TOP_KEYS = {"space", "data", "train", "search", "output", "gelu_form"}
_DATA_KEYS = {"train", "val", "patch"}
_OUTPUT_KEYS = {"dir"}


@dataclass
class DataConfig:
    train: str | None = None
    val: str | None = None
    patch: int = 8

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - _DATA_KEYS
        if unknown:
            raise SpecError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    space: SpaceSpec
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    output_dir: str = "runs"
    gelu_form: str = "tanh"
    raw: dict = field(default_factory=dict, repr=False)

    def resolve_output_dir(self) -> Path:
        override = os.environ.get(OUTDIR_ENV)
        return Path(override) if override else Path(self.output_dir)


def space_from_dict(d) -> SpaceSpec:
    """Either {"preset": name[, "head_dim_lock": x]} or explicit triples."""
    if "preset" in d:
        unknown = set(d) - {"preset", "head_dim_lock"}
        if unknown:
            raise SpecError(f"unknown space keys with preset: {sorted(unknown)}")
        return preset(d["preset"], head_dim_lock=d.get("head_dim_lock", 64))
    return SpaceSpec.from_dict(d)


def parse_runconfig(doc: dict) -> RunConfig:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SpecError(f"unknown config sections: {sorted(unknown)}")
    if "space" not in doc:
        raise SpecError("config is missing the 'space' section")
    gelu_form = doc.get("gelu_form", "tanh")
    if gelu_form not in ("tanh", "erf"):
        raise SpecError(f"gelu_form must be 'tanh' or 'erf', got {gelu_form!r}")
    output = doc.get("output", {})
    unknown = set(output) - _OUTPUT_KEYS
    if unknown:
        raise SpecError(f"unknown output keys: {sorted(unknown)}")
    return RunConfig(
        space=space_from_dict(doc["space"]),
        data=DataConfig.from_dict(doc.get("data", {})),
        train=TrainConfig.from_dict(doc.get("train", {})),
        search=SearchConfig.from_dict(doc.get("search", {})),
        output_dir=output.get("dir", "runs"),
        gelu_form=gelu_form,
        raw=doc,
    )


def load_runconfig(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise SpecError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SpecError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SpecError(f"config {path} must hold a JSON object")
    return parse_runconfig(doc)
