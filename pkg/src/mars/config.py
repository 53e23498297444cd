"""Pipeline configuration: one JSON file with optional per-module sections, plus flag overrides.

Precedence is flags > file > defaults. Example file::

    {"seed": 3,
     "synthetic": {"n_users": 500},
     "alignment": {"epochs": 2, "lam": 0.1},
     "augment": {"strategy": "filter", "theta": 0.3},
     "ctr": {"epochs": 4}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .alignment import AlignmentConfig
from .ctr import CtrConfig
from .dataio import SyntheticSpec
from .retrieval import AugmentConfig

SECTIONS = {"synthetic": SyntheticSpec, "alignment": AlignmentConfig, "augment": AugmentConfig,
            "ctr": CtrConfig}


def desk_alignment() -> AlignmentConfig:
    # desk-scale overrides of the full-size defaults (id 128 / hidden 256 / batch 512)
    return AlignmentConfig(id_dim=32, hidden_dim=32, dk=16, batch_size=64, epochs=2)


def desk_ctr() -> CtrConfig:
    return CtrConfig(batch_size=256, epochs=8, lr=5e-3)


@dataclass
class PipelineConfig:
    seed: int = 0
    low_frac: float = 0.3
    high_frac: float = 0.3
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    alignment: AlignmentConfig = field(default_factory=desk_alignment)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ctr: CtrConfig = field(default_factory=desk_ctr)

    def apply_seed(self, seed: int) -> None:
        """One global seed drives every stage."""
        self.seed = seed
        self.synthetic.seed = seed
        self.alignment.seed = seed
        self.ctr.seed = seed

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _update(obj, values: dict, where: str) -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ValueError(f"unknown config key {where}.{key}")
        if isinstance(getattr(obj, key), tuple):
            val = tuple(val)
        setattr(obj, key, val)


def load_config(path=None, **overrides) -> PipelineConfig:
    cfg = PipelineConfig()
    raw: dict[str, Any] = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
    if "seed" in raw:
        cfg.apply_seed(int(raw["seed"]))
    for key, val in raw.items():
        if key == "seed":
            continue
        if key in SECTIONS:
            _update(getattr(cfg, key), val, key)
        elif key in ("low_frac", "high_frac"):
            setattr(cfg, key, float(val))
        else:
            raise ValueError(f"unknown config section {key!r}")
    seed = overrides.pop("seed", None)
    if seed is not None:
        cfg.apply_seed(seed)
    for key in ("strategy", "theta", "k"):
        val = overrides.pop(key, None)
        if val is not None:
            setattr(cfg.augment, key, val)
    if overrides:
        raise ValueError(f"unsupported overrides {sorted(overrides)}")
    cfg.augment.validate()
    cfg.alignment.validate()
    cfg.ctr.validate()
    cfg.synthetic.validate()
    return cfg
