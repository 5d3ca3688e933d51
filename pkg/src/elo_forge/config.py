"""Strict JSON run configuration."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import SOURCE_LANG, TARGET_LANG, LangSpec
from .errors import ConfigError
from .lora import LoraConfig
from .model import ModelConfig
from .train import TrainPlan


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class ModelSection(_Strict):
    n_layers: int = 16
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 64
    max_seq_len: int = 128
    eps: float = 1e-5
    seed: int = 0

    def build(self) -> ModelConfig:
        try:
            return ModelConfig(**self.model_dump()).validate()
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from None


class LangSection(_Strict):
    name: str
    char_set: list[int]
    word_len_range: tuple[int, int] = (2, 6)
    sentence_len_range: tuple[int, int] = (3, 8)
    doc_len_range: tuple[int, int] = (384, 640)
    markov_order: int = 1
    transition_seed: int = 0

    @classmethod
    def of(cls, spec: LangSpec) -> "LangSection":
        return cls(**spec.to_dict())

    def build(self) -> LangSpec:
        try:
            return LangSpec.from_dict(self.model_dump())
        except ValueError as exc:
            raise ConfigError(f"data.{self.name}: {exc}") from None


class DataSection(_Strict):
    source: LangSection = Field(default_factory=lambda: LangSection.of(SOURCE_LANG))
    target: LangSection = Field(default_factory=lambda: LangSection.of(TARGET_LANG))
    ratio: tuple[int, int] = (1, 9)
    seed: int = 0
    base_docs: int = 300
    pt_docs: int = 300
    eval_docs: int = 24
    unit_kb: float = 32.0
    align_units: float = 1.0
    align_pool_units: float = 4.0
    inst_source: int = 320
    sft_instructions: int = 384
    held_out: int = 64
    payload_len_range: tuple[int, int] = (2, 4)

    @field_validator("ratio")
    @classmethod
    def _ratio(cls, v):
        if v[0] < 0 or v[1] < 0 or v == (0, 0):
            raise ValueError("ratio parts must be >= 0 and not both zero")
        return v

    @property
    def unit_bytes(self) -> int:
        return int(self.unit_kb * 1024)


class PlanSection(_Strict):
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    batch: int = 8
    seq_len: int = 64
    epochs: Optional[int] = None
    max_steps: Optional[int] = None
    log_every: int = 50
    cosine: bool = False
    shuffle: bool = False
    check_mask: bool = False

    def plan(self, method: str, seed: int) -> TrainPlan:
        return TrainPlan(method=method, seed=seed, **self.model_dump())


class TrainSection(_Strict):
    base: PlanSection = Field(default_factory=PlanSection)
    elo: PlanSection = Field(default_factory=PlanSection)
    fft: PlanSection = Field(default_factory=PlanSection)
    lora: PlanSection = Field(default_factory=PlanSection)
    align: PlanSection = Field(default_factory=lambda: PlanSection(cosine=True))
    inst: PlanSection = Field(default_factory=lambda: PlanSection(batch=16, seq_len=24, shuffle=True))
    sft: PlanSection = Field(default_factory=lambda: PlanSection(batch=16, seq_len=24, shuffle=True))


class EloSection(_Strict):
    layers: Optional[list[int]] = None
    train_emb_head: bool = False


class LoraSection(_Strict):
    rank: int = 8
    alpha: float = 16.0
    targets: list[str] = Field(default_factory=lambda: ["attn.q", "attn.v"])

    def build(self, seed: int) -> LoraConfig:
        return LoraConfig(self.rank, self.alpha, tuple(self.targets), seed)


class EvalSection(_Strict):
    seq_len: int = 64
    batch: int = 16
    slack: int = 4


class BenchSection(_Strict):
    methods: list[str] = Field(default_factory=lambda: ["fft", "elo", "lora"])
    n_steps: int = 50
    warmup: int = 5
    batch: int = 8
    seq_len: int = 128
    data_units: list[float] = Field(default_factory=lambda: [10.0, 50.0, 100.0, 200.0])


class AblateSection(_Strict):
    selections: list[list[int]] = Field(default_factory=lambda: [[1, 16], [1, 8, 16], [4, 12], [1, 8]])
    budgets: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0])


class RunConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    elo: EloSection = Field(default_factory=EloSection)
    lora: LoraSection = Field(default_factory=LoraSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    ablate: AblateSection = Field(default_factory=AblateSection)
    output_dir: str = "runs/default"

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())

    def selection(self) -> list[int]:
        return self.elo.layers or sorted({1, self.model.n_layers})


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def parse_config_text(text: str) -> RunConfig:
    try:
        cfg = RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    cfg.model.build()
    cfg.data.source.build()
    cfg.data.target.build()
    if cfg.elo.layers is not None:
        from .surgery import LayerSelection
        from .errors import SelectionError

        try:
            LayerSelection(cfg.elo.layers).check(cfg.model.n_layers)
        except SelectionError as exc:
            raise ConfigError(f"elo.layers: {exc}") from None
    return cfg


def parse_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())
