"""Low-rank adapters on a frozen ``DecoderModel``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MergeError, UnknownNameError
from .model import DecoderModel
from .tensor import Tensor, create_tensor


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("attn.q", "attn.v")
    seed: int = 0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraModel:
    """Base model plus ``A [d_in, r]`` / ``B [r, d_out]`` per targeted matrix.

    Effective weight is ``W + (alpha / r) * A @ B``. B starts at zero, so the
    adapters contribute nothing until trained.
    """

    def __init__(self, base: DecoderModel, cfg: LoraConfig):
        self.base = base
        self.cfg = cfg
        self.merged = False
        self.adapters: dict[str, tuple[Tensor, Tensor]] = {}
        names = []
        for i in range(1, base.config.n_layers + 1):
            for part in cfg.targets:
                names.append(f"layer.{i}.{part}")
        unknown = [n for n in names if n not in base.params]
        if unknown:
            raise UnknownNameError(f"LoRA targets not in model: {unknown[:3]}")
        for name in names:
            d_in, d_out = base.params[name].shape
            a = create_tensor((d_in, cfg.rank), "normal", std=1.0 / cfg.rank, seed=cfg.seed,
                              name=f"lora.{name}.A", dtype=_dtype_tag(base))
            b = create_tensor((cfg.rank, d_out), "zeros", name=f"lora.{name}.B", dtype=_dtype_tag(base))
            self.adapters[name] = (a, b)

    @property
    def config(self):
        return self.base.config

    @property
    def n_active_layers(self) -> int:
        return self.base.config.n_layers

    def adapter_params(self) -> dict[str, Tensor]:
        out = {}
        for a, b in self.adapters.values():
            out[a.name] = a
            out[b.name] = b
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base.params, **self.adapter_params()}

    def trainable_names(self) -> list[str]:
        return list(self.adapter_params())

    def set_trainable(self, names) -> None:
        names = set(names)
        params = self.parameters()
        unknown = names - set(params)
        if unknown:
            raise UnknownNameError(f"unknown tensor names: {sorted(unknown)[:5]}")
        for k, t in params.items():
            t.requires_grad = k in names
            t.grad = None

    def forward(self, tokens) -> Tensor:
        s = self.cfg.scaling
        return self.base.forward(tokens, {n: (a, b, s) for n, (a, b) in self.adapters.items()})

    __call__ = forward

    def extra_flops(self, seq_len: int) -> int:
        """Adapter matmul FLOPs per sequence: ``x @ A`` then ``(xA) @ B``."""
        total = 0
        for a, b in self.adapters.values():
            total += 2 * seq_len * a.shape[0] * a.shape[1] + 2 * seq_len * b.shape[0] * b.shape[1]
        return total

    def fingerprint(self) -> str:
        return self.base.fingerprint()


def _dtype_tag(model: DecoderModel) -> str:
    return "f64" if model.dtype == np.float64 else "f32"


def attach_lora(model: DecoderModel, cfg: LoraConfig | None = None) -> LoraModel:
    lm = LoraModel(model, cfg or LoraConfig())
    lm.set_trainable(lm.trainable_names())
    return lm


def merge_lora(lm: LoraModel) -> DecoderModel:
    """Fold adapters into a new plain model. A LoraModel can be merged once."""
    if lm.merged:
        raise MergeError("adapters were already merged into a model")
    params = {k: Tensor(v.data.copy(), name=k) for k, v in lm.base.params.items()}
    s = lm.cfg.scaling
    for name, (a, b) in lm.adapters.items():
        w = params[name].data
        upd = (a.data.astype(np.float64) @ b.data.astype(np.float64)) * s
        params[name] = Tensor((w.astype(np.float64) + upd).astype(w.dtype), name=name)
    lm.merged = True
    return DecoderModel(lm.base.config, params, lineage=lm.base.lineage)
