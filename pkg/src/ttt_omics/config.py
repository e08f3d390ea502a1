"""Declarative pipeline configuration (TOML file, strict schema).

Sections: [data] (paths and preprocessing knobs), [synth] (synthetic
dataset extents), [model], [train.stage1..3], [eval]. Unknown sections or
keys are rejected so typos fail fast; command-line flags override file
values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelConfig
from .training import StageConfig


@dataclass
class DataConfig:
    rna: str = ""
    adt: str = ""
    gene_order: str = ""
    protein_map: str = ""
    labels: str = ""
    gene_lengths: str = ""
    output_dir: str = "out"
    n_top_genes: int = 4000
    pseudocount: float = 1.0
    log1p: bool = True


@dataclass
class SynthConfig:
    n_cells: int = 300
    n_genes: int = 50
    n_proteins: int = 10
    n_classes: int = 3
    separation: float = 5.0
    seed: int = 0


@dataclass
class EvalConfig:
    k: int = 20
    resolution: float = 1.0
    seed: int = 0


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[int, StageConfig] = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def stage(self, n: int) -> StageConfig:
        if n not in self.stages:
            self.stages[n] = StageConfig(stage=n)
        return self.stages[n]

    def config_hash(self) -> str:
        blob = {
            "data": asdict(self.data),
            "synth": asdict(self.synth),
            "model": asdict(self.model),
            "stages": {str(k): asdict(v) for k, v in sorted(self.stages.items())},
            "eval": asdict(self.eval),
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()

    def override_seed(self, seed: int) -> None:
        self.model.seed = seed
        self.synth.seed = seed
        self.eval.seed = seed
        for stage_cfg in self.stages.values():
            stage_cfg.seed = seed


def _build_section(cls, raw: dict, where: str, **extra):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**extra, **raw)
    except TypeError as exc:
        raise ConfigError(f"bad [{where}] section: {exc}")


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")

    known_sections = {"data", "synth", "model", "train", "eval"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    cfg = PipelineConfig(
        data=_build_section(DataConfig, raw.get("data", {}), "data"),
        synth=_build_section(SynthConfig, raw.get("synth", {}), "synth"),
        model=_build_section(ModelConfig, raw.get("model", {}), "model"),
        eval=_build_section(EvalConfig, raw.get("eval", {}), "eval"),
    )
    cfg.model.validate()

    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("[train] must contain stage1/stage2/stage3 subsections")
    for key, body in train_raw.items():
        if key not in ("stage1", "stage2", "stage3"):
            raise ConfigError(f"unknown section [train.{key}]")
        n = int(key[-1])
        if "stage" in body:
            raise ConfigError(f"[train.{key}] must not set 'stage' explicitly")
        cfg.stages[n] = _build_section(StageConfig, body, f"train.{key}", stage=n).validate()
    return cfg
