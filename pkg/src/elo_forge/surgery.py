"""
Layer detachment, write-back and parameter-delta arithmetic.

A detached sub-model is an ordinary ``DecoderModel`` with ``len(selection)``
layers. Its layer ``j`` holds a copy of donor layer ``selection[j-1]``;
embedding and head group (``head.norm`` + ``head.w``) are copied unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import LineageError, SelectionError, ShapeError, UnknownNameError
from .model import (
    EMBED_NAMES,
    HEAD_NAMES,
    LAYER_PARTS,
    DecoderModel,
    fingerprint_params,
    with_layers,
)
from .tensor import Tensor


@dataclass(frozen=True)
class LayerSelection:
    indices: tuple[int, ...]

    def __init__(self, indices: Iterable[int]):
        object.__setattr__(self, "indices", tuple(int(i) for i in indices))
        if not self.indices:
            raise SelectionError("layer selection must be non-empty")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise SelectionError(f"indices must be strictly increasing without duplicates: {self.indices}")
        if self.indices[0] < 1:
            raise SelectionError(f"layer indices are 1-based, got {self.indices}")

    @classmethod
    def parse(cls, text: str) -> "LayerSelection":
        try:
            return cls(int(p) for p in text.replace(" ", "").split(",") if p)
        except ValueError as exc:
            raise SelectionError(f"cannot parse layer list {text!r}") from exc

    @classmethod
    def first_last(cls, n_layers: int) -> "LayerSelection":
        return cls(sorted({1, n_layers}))

    def check(self, n_layers: int) -> "LayerSelection":
        if self.indices[-1] > n_layers:
            raise SelectionError(f"layer {self.indices[-1]} out of range for a {n_layers}-layer model")
        return self

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __str__(self) -> str:
        return ",".join(map(str, self.indices))


@dataclass
class EloSubModel:
    model: DecoderModel
    selection: LayerSelection
    source_fingerprint: str
    lineage: str
    train_emb_head: bool = False

    @property
    def config(self):
        return self.model.config

    @property
    def n_active_layers(self) -> int:
        return self.model.config.n_layers

    def layer_map(self) -> dict[int, int]:
        """Sub-model layer position -> donor layer index."""
        return {j: i for j, i in enumerate(self.selection.indices, start=1)}

    def frozen_names(self) -> list[str]:
        if self.train_emb_head:
            return []
        return [*EMBED_NAMES, *HEAD_NAMES]

    def trainable_names(self) -> list[str]:
        frozen = set(self.frozen_names())
        return [n for n in self.model.names() if n not in frozen]

    def parameters(self) -> dict[str, Tensor]:
        return self.model.params

    def set_trainable(self, names) -> None:
        self.model.set_trainable(names)

    def forward(self, tokens, adapters=None) -> Tensor:
        return self.model.forward(tokens, adapters)

    __call__ = forward

    def extra_flops(self, seq_len: int) -> int:
        return 0

    def fingerprint(self) -> str:
        return self.model.fingerprint()


def detach_elo(model: DecoderModel, selection: LayerSelection | Iterable[int], train_emb_head: bool = False) -> EloSubModel:
    if not isinstance(selection, LayerSelection):
        selection = LayerSelection(selection)
    selection.check(model.config.n_layers)
    params: dict[str, Tensor] = {}
    for name in (*EMBED_NAMES, *HEAD_NAMES):
        params[name] = Tensor(model.params[name].data.copy(), name=name)
    for j, i in enumerate(selection.indices, start=1):
        for part in LAYER_PARTS:
            params[f"layer.{j}.{part}"] = Tensor(model.params[f"layer.{i}.{part}"].data.copy(), name=f"layer.{j}.{part}")
    sub = DecoderModel(with_layers(model.config, len(selection)), params, lineage=model.lineage)
    return EloSubModel(sub, selection, model.fingerprint(), model.lineage, train_emb_head)


def replace_layers(original: DecoderModel, sub: EloSubModel) -> DecoderModel:
    """Write the sub-model's trained layers back into a copy of ``original``.

    Embedding, final norm and head of ``original`` are kept as they are.
    """
    if sub.lineage != original.lineage:
        raise LineageError(f"sub-model lineage {sub.lineage[:12]} does not match model lineage {original.lineage[:12]}")
    sub.selection.check(original.config.n_layers)
    params = {k: Tensor(v.data.copy(), name=k) for k, v in original.params.items()}
    for j, i in sub.layer_map().items():
        for part in LAYER_PARTS:
            src = sub.model.params[f"layer.{j}.{part}"].data
            dst = f"layer.{i}.{part}"
            if src.shape != params[dst].shape or src.dtype != params[dst].dtype:
                raise ShapeError(f"{dst}: sub-model tensor {src.shape}/{src.dtype} incompatible")
            params[dst] = Tensor(src.copy(), name=dst)
    return DecoderModel(original.config, params, lineage=original.lineage)


@dataclass
class ParamDelta:
    entries: dict[str, np.ndarray]
    minuend_fingerprint: str
    subtrahend_fingerprint: str
    meta: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.entries)

    def l1(self) -> float:
        return float(sum(np.abs(d.astype(np.float64)).sum() for d in self.entries.values()))

    def fingerprint(self) -> str:
        return fingerprint_params({k: Tensor(v) for k, v in self.entries.items()})


def compute_delta(minuend: DecoderModel, subtrahend: DecoderModel) -> ParamDelta:
    """Per-tensor ``minuend - subtrahend``, computed in f64 and stored in the model dtype."""
    if minuend.config != subtrahend.config and _shape_config(minuend) != _shape_config(subtrahend):
        raise ShapeError("models have different architectures")
    if set(minuend.params) != set(subtrahend.params):
        raise ShapeError("models have different tensor-name sets")
    entries = {}
    for name, a in minuend.params.items():
        b = subtrahend.params[name]
        if a.shape != b.shape:
            raise ShapeError(f"{name}: {a.shape} vs {b.shape}")
        entries[name] = (a.data.astype(np.float64) - b.data.astype(np.float64)).astype(a.dtype)
    return ParamDelta(entries, minuend.fingerprint(), subtrahend.fingerprint())


def apply_delta(model: DecoderModel, delta: ParamDelta) -> DecoderModel:
    missing = [n for n in model.params if n not in delta.entries]
    extra = [n for n in delta.entries if n not in model.params]
    if missing or extra:
        raise UnknownNameError(f"delta/model name mismatch (missing={missing[:3]}, extra={extra[:3]})")
    params = {}
    for name, t in model.params.items():
        d = delta.entries[name]
        if d.shape != t.shape:
            raise ShapeError(f"{name}: delta {d.shape} vs tensor {t.shape}")
        params[name] = Tensor((t.data.astype(np.float64) + d.astype(np.float64)).astype(t.dtype), name=name)
    return DecoderModel(model.config, params, lineage=model.lineage)


def fingerprint(model) -> str:
    return model.fingerprint()


def changed_tensors(a: DecoderModel, b: DecoderModel) -> list[str]:
    """Names whose bytes differ between two same-architecture models."""
    return [n for n in a.params if not np.array_equal(a.params[n].data, b.params[n].data)]


def _shape_config(model: DecoderModel) -> tuple:
    c = model.config
    return (c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size)


def selection_tensor_names(selection: Sequence[int]) -> set[str]:
    return {f"layer.{i}.{p}" for i in selection for p in LAYER_PARTS}
