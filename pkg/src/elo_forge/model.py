"""
Decoder-only transformer: pre-norm RMSNorm, rotary positions, plain SiLU FFN,
no biases, untied embedding and head.

Parameters live in a flat ``dict`` keyed by canonical names::

    emb.tok
    layer.{i}.attn.norm  layer.{i}.attn.q  .k  .v  .o
    layer.{i}.ffn.norm   layer.{i}.ffn.up  layer.{i}.ffn.down
    head.norm  head.w

with ``i`` 1-based. These names are the contract used by surgery and the
checkpoint format.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, SeqLenError, UnknownNameError
from .tensor import Tensor, create_tensor

LAYER_PARTS = (
    "attn.norm", "attn.q", "attn.k", "attn.v", "attn.o",
    "ffn.norm", "ffn.up", "ffn.down",
)
EMBED_NAMES = ("emb.tok",)
HEAD_NAMES = ("head.norm", "head.w")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_seq_len: int = 128
    eps: float = 1e-5
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for key in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            val = getattr(self, key)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise ConfigError(f"{key} must be an integer >= 1, got {val!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def layer_names(i: int) -> list[str]:
    return [f"layer.{i}.{part}" for part in LAYER_PARTS]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"emb.tok": (v, d)}
    for i in range(1, config.n_layers + 1):
        shapes.update({
            f"layer.{i}.attn.norm": (d,),
            f"layer.{i}.attn.q": (d, d),
            f"layer.{i}.attn.k": (d, d),
            f"layer.{i}.attn.v": (d, d),
            f"layer.{i}.attn.o": (d, d),
            f"layer.{i}.ffn.norm": (d,),
            f"layer.{i}.ffn.up": (d, f),
            f"layer.{i}.ffn.down": (f, d),
        })
    shapes["head.norm"] = (d,)
    shapes["head.w"] = (d, v)
    return shapes


def rope_tables(config: ModelConfig, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    hd = config.head_dim
    inv = 1.0 / (10000.0 ** (np.arange(0, hd // 2, dtype=np.float64) * 2 / hd))
    ang = np.outer(np.arange(config.max_seq_len, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def fingerprint_params(params: Mapping[str, Tensor]) -> str:
    """sha256 over sorted (name, dtype, shape, little-endian bytes)."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data
        h.update(name.encode("utf-8"))
        h.update(arr.dtype.str.lstrip("<>=|").encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


class DecoderModel:
    """Full n-layer decoder. ``lineage`` is the fingerprint taken at build time."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], lineage: str | None = None):
        self.config = config.validate()
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shp in expected.items():
            if params[name].shape != shp:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shp}")
        self.params = {name: params[name] for name in expected}
        self.lineage = lineage or self.fingerprint()
        self._rope_cache: dict = {}

    # -- bookkeeping ------------------------------------------------------
    @property
    def dtype(self):
        return self.params["emb.tok"].dtype

    @property
    def n_active_layers(self) -> int:
        return self.config.n_layers

    def names(self) -> list[str]:
        return list(self.params)

    def fingerprint(self) -> str:
        return fingerprint_params(self.params)

    def trainable_names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def extra_flops(self, seq_len: int) -> int:
        return 0

    def copy(self) -> "DecoderModel":
        params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        return DecoderModel(self.config, params, lineage=self.lineage)

    def astype(self, dtype: str) -> "DecoderModel":
        np_dtype = T.DTYPES[dtype]
        params = {k: Tensor(v.data.astype(np_dtype), name=k) for k, v in self.params.items()}
        return DecoderModel(self.config, params, lineage=self.lineage)

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise UnknownNameError(f"unknown tensor names: {sorted(unknown)[:5]}")
        for k, t in self.params.items():
            t.requires_grad = k in names
            t.grad = None

    # -- forward ------------------------------------------------------------
    def _rope(self, s: int):
        key = (s, self.dtype.str)
        if key not in self._rope_cache:
            cos, sin = rope_tables(self.config, self.dtype)
            self._rope_cache[key] = (cos[:s], sin[:s])
        return self._rope_cache[key]

    def _linear(self, x: Tensor, name: str, adapters=None) -> Tensor:
        y = T.matmul(x, self.params[name])
        if adapters is not None and name in adapters:
            a, b, scaling = adapters[name]
            y = T.add(y, T.scale(T.matmul(T.matmul(x, a), b), scaling))
        return y

    def _attention(self, x: Tensor, i: int, adapters=None) -> Tensor:
        cfg = self.config
        bsz, s, d = x.shape
        h, hd = cfg.n_heads, cfg.head_dim
        cos, sin = self._rope(s)

        def heads(t: Tensor) -> Tensor:
            return T.swapaxes(T.reshape(t, (bsz, s, h, hd)), 1, 2)

        q = T.rope(heads(self._linear(x, f"layer.{i}.attn.q", adapters)), cos, sin)
        k = T.rope(heads(self._linear(x, f"layer.{i}.attn.k", adapters)), cos, sin)
        v = heads(self._linear(x, f"layer.{i}.attn.v", adapters))
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / math.sqrt(hd))
        probs = T.softmax_rows(scores, causal=True)
        ctx = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (bsz, s, d))
        return self._linear(ctx, f"layer.{i}.attn.o", adapters)

    def _block(self, x: Tensor, i: int, adapters=None) -> Tensor:
        p, eps = self.params, self.config.eps
        x = T.add(x, self._attention(T.rms_norm(x, p[f"layer.{i}.attn.norm"], eps), i, adapters))
        hdn = T.silu(self._linear(T.rms_norm(x, p[f"layer.{i}.ffn.norm"], eps), f"layer.{i}.ffn.up", adapters))
        return T.add(x, self._linear(hdn, f"layer.{i}.ffn.down", adapters))

    def forward(self, tokens, adapters=None) -> Tensor:
        """Logits ``[batch, s, V]`` for integer ``tokens`` of shape ``[batch, s]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        s = tokens.shape[1]
        if s > self.config.max_seq_len:
            raise SeqLenError(f"sequence length {s} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")
        x = T.embedding(self.params["emb.tok"], tokens)
        for i in range(1, self.config.n_layers + 1):
            x = self._block(x, i, adapters)
        x = T.rms_norm(x, self.params["head.norm"], self.config.eps)
        return T.matmul(x, self.params["head.w"])

    __call__ = forward


def build_model(config: ModelConfig, dtype: str = "f32") -> DecoderModel:
    config.validate()
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            params[name] = create_tensor(shape, "ones", name=name, dtype=dtype)
        else:
            params[name] = create_tensor(shape, "normal", std=0.02, seed=config.seed, name=name, dtype=dtype)
    return DecoderModel(config, params)


def count_params(model, scope="all") -> int:
    """Element count over ``"all"``, ``"trainable"`` or an iterable of names."""
    params = model.parameters()
    if scope == "all":
        return sum(t.size for t in params.values())
    if scope == "trainable":
        names = model.trainable_names()
    else:
        names = list(scope)
    unknown = [n for n in names if n not in params]
    if unknown:
        raise UnknownNameError(f"unknown tensor names: {unknown[:5]}")
    return sum(params[n].size for n in set(names))


def layer_scope(indices: Iterable[int]) -> list[str]:
    return [n for i in indices for n in layer_names(i)]


def count_params_closed_form(config: ModelConfig) -> int:
    v, d, f, n = config.vocab_size, config.d_model, config.d_ff, config.n_layers
    return v * d + n * (4 * d * d + 2 * d * f + 2 * d) + (d * v + d)


def layer_flops(config: ModelConfig, seq_len: int) -> int:
    s, d, f = seq_len, config.d_model, config.d_ff
    return 8 * s * d * d + 4 * s * s * d + 4 * s * d * f


def head_flops(config: ModelConfig, seq_len: int) -> int:
    return 2 * seq_len * config.d_model * config.vocab_size


def forward_flops(config: ModelConfig, n_active_layers: int, seq_len: int) -> int:
    """Matmul FLOPs of one forward pass over one sequence (multiply-add = 2)."""
    if not 0 <= n_active_layers <= config.n_layers:
        raise ValueError(f"n_active_layers={n_active_layers} outside [0, {config.n_layers}]")
    return n_active_layers * layer_flops(config, seq_len) + head_flops(config, seq_len)


def train_step_flops(config: ModelConfig, n_active_layers: int, seq_len: int, batch: int, extra: int = 0) -> int:
    """Backward counted as twice forward: 3 x (forward + extra) x batch."""
    return 3 * (forward_flops(config, n_active_layers, seq_len) + extra) * batch


def with_layers(config: ModelConfig, n_layers: int) -> ModelConfig:
    return replace(config, n_layers=n_layers)
