"""
One step engine shared by every training method.

``train_step`` marks exactly the tensors in the plan's trainable mask as
requiring grad, runs forward/backward and an AdamW update over those names.
Everything outside the mask is never touched; ``check_mask=True`` verifies
that bitwise after each step.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, ByteTokenizer, DocStream, InstructionSet, batchify
from .errors import ConfigError, DivergenceError, UnknownNameError
from .lora import LoraModel
from .model import DecoderModel, count_params, train_step_flops
from .optim import AdamWState, adamw_step, cosine_lr
from .surgery import EloSubModel

log = logging.getLogger(__name__)

METHODS = ("FFT", "ELO", "LORA", "ALIGN", "SFT")


@dataclass(frozen=True)
class TrainPlan:
    method: str = "FFT"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    batch: int = 8
    seq_len: int = 128
    epochs: int | None = None
    max_steps: int | None = None
    trainable_mask: frozenset[str] | None = None
    seed: int = 0
    log_every: int = 10
    cosine: bool = False
    shuffle: bool = False
    check_mask: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.batch < 1 or self.seq_len < 1:
            raise ConfigError("batch and seq_len must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 10 if self.method == "SFT" else 1

    def with_method(self, method: str) -> "TrainPlan":
        return replace(self, method=method)


@dataclass
class StepRecord:
    step: int
    loss: float
    wall_ms: float
    flops: int


@dataclass
class PhaseMetrics:
    phase: str
    method: str
    steps: int = 0
    wall_seconds: float = 0.0
    step_flops: int = 0
    total_flops: int = 0
    tokens: int = 0
    params_total: int = 0
    params_trainable: int = 0
    memory_proxy_bytes: int = 0
    batch: int = 0
    seq_len: int = 0
    seed: int = 0
    records: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def tokens_per_second(self) -> float:
        return self.tokens / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["tokens_per_second"] = self.tokens_per_second
        d["final_loss"] = self.records[-1].loss if self.records else None
        return d

    def log_lines(self, include_wall: bool = True) -> list[str]:
        """Record-per-step text log: ``step loss wall_ms flops``."""
        lines = []
        for r in self.records:
            cols = [str(r.step), repr(r.loss)]
            if include_wall:
                cols.append(f"{r.wall_ms:.3f}")
            cols.append(str(r.flops))
            lines.append("\t".join(cols))
        return lines


@dataclass
class TrainedResult:
    model: object
    metrics: PhaseMetrics


def resolve_mask(modelish, plan: TrainPlan) -> list[str]:
    params = modelish.parameters()
    if plan.trainable_mask is None:
        return list(modelish.trainable_names())
    unknown = sorted(set(plan.trainable_mask) - set(params))
    if unknown:
        raise UnknownNameError(f"trainable_mask names not in model: {unknown[:5]}")
    return [n for n in params if n in plan.trainable_mask]


def train_step(modelish, batch: Batch, plan: TrainPlan, state: AdamWState,
               mask: Sequence[str] | None = None, lr: float | None = None) -> float:
    """One optimizer step; returns the (pre-update) loss."""
    params = modelish.parameters()
    if mask is None:
        mask = resolve_mask(modelish, plan)
        modelish.set_trainable(mask)
    frozen_before = None
    if plan.check_mask:
        keep = set(mask)
        frozen_before = {n: t.data.copy() for n, t in params.items() if n not in keep}
    logits = modelish.forward(batch.tokens)
    loss = T.cross_entropy(logits, batch.targets, batch.mask)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(
            f"non-finite loss {value} at optimizer step {state.t + 1} "
            f"(method={plan.method}, lr={lr or plan.lr}, batch rows={batch.rows})"
        )
    loss.backward()
    grads = {n: params[n].grad for n in mask if params[n].grad is not None}
    adamw_step(params, grads, state, lr=plan.lr if lr is None else lr, betas=plan.betas,
               eps=plan.eps, weight_decay=plan.weight_decay)
    for n in mask:
        params[n].grad = None
    if frozen_before is not None:
        for n, before in frozen_before.items():
            if not np.array_equal(before, params[n].data):
                raise AssertionError(f"frozen tensor {n} changed during {plan.method} step")
    return value


def _memory_proxy(params_total: int, params_trainable: int) -> int:
    # f32 weights plus AdamW first/second moments for the trainable subset
    return 4 * (params_total + 2 * params_trainable)


def run_training(modelish, batches: list[Batch], plan: TrainPlan, phase: str) -> PhaseMetrics:
    mask = resolve_mask(modelish, plan)
    modelish.set_trainable(mask)
    state = AdamWState()
    cfg = modelish.config
    total = plan.resolved_epochs * len(batches)
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    p_total = count_params(modelish, "all")
    p_train = count_params(modelish, mask)
    m = PhaseMetrics(
        phase=phase, method=plan.method, params_total=p_total, params_trainable=p_train,
        memory_proxy_bytes=_memory_proxy(p_total, p_train), batch=plan.batch,
        seq_len=plan.seq_len, seed=plan.seed,
    )
    if batches:
        m.step_flops = train_step_flops(cfg, modelish.n_active_layers, batches[0].seq_len,
                                        plan.batch, modelish.extra_flops(batches[0].seq_len))
    step = 0
    epoch = 0
    t_phase = time.perf_counter()
    while step < total:
        order = np.arange(len(batches))
        if plan.shuffle:
            order = np.random.default_rng([plan.seed, epoch]).permutation(len(batches))
        for idx in order:
            if step >= total:
                break
            b = batches[int(idx)]
            lr = cosine_lr(plan.lr, step, total) if plan.cosine else plan.lr
            t0 = time.perf_counter()
            loss = train_step(modelish, b, plan, state, mask, lr)
            wall_ms = (time.perf_counter() - t0) * 1e3
            flops = train_step_flops(cfg, modelish.n_active_layers, b.seq_len, b.rows,
                                     modelish.extra_flops(b.seq_len))
            step += 1
            m.records.append(StepRecord(step, loss, wall_ms, flops))
            m.total_flops += flops
            m.tokens += b.n_tokens
            if plan.log_every and step % plan.log_every == 0:
                log.info("%s step %d/%d loss %.4f (%.1f ms)", phase, step, total, loss, wall_ms)
        epoch += 1
    m.steps = step
    m.wall_seconds = time.perf_counter() - t_phase
    modelish.set_trainable([])
    return m


def _expect(plan: TrainPlan, method: str) -> None:
    if plan.method != method:
        raise ConfigError(f"plan.method is {plan.method!r}, expected {method!r}")


def _stream_batches(stream: DocStream, plan: TrainPlan, tokenizer: ByteTokenizer | None) -> list[Batch]:
    return batchify(stream, plan.batch, plan.seq_len, "all", tokenizer)


def train_fft(model: DecoderModel, stream: DocStream, plan: TrainPlan,
              tokenizer: ByteTokenizer | None = None, phase: str = "fft") -> TrainedResult:
    _expect(plan, "FFT")
    out = model.copy()
    metrics = run_training(out, _stream_batches(stream, plan, tokenizer), plan, phase)
    return TrainedResult(out, metrics)


def train_elo(sub: EloSubModel, stream: DocStream, plan: TrainPlan,
              tokenizer: ByteTokenizer | None = None, phase: str = "elo") -> TrainedResult:
    _expect(plan, "ELO")
    out = EloSubModel(sub.model.copy(), sub.selection, sub.source_fingerprint, sub.lineage, sub.train_emb_head)
    metrics = run_training(out, _stream_batches(stream, plan, tokenizer), plan, phase)
    return TrainedResult(out, metrics)


def train_lora(lm: LoraModel, stream: DocStream, plan: TrainPlan,
               tokenizer: ByteTokenizer | None = None, phase: str = "lora") -> TrainedResult:
    """Trains the adapters in place (the base stays frozen and shared)."""
    _expect(plan, "LORA")
    metrics = run_training(lm, _stream_batches(stream, plan, tokenizer), plan, phase)
    return TrainedResult(lm, metrics)


def align(model: DecoderModel, stream: DocStream, plan: TrainPlan,
          tokenizer: ByteTokenizer | None = None, phase: str = "align") -> TrainedResult:
    """Brief full fine-tune of a merged model. An empty budget is a no-op."""
    _expect(plan, "ALIGN")
    out = model.copy()
    if not stream.docs:
        p = count_params(out, "all")
        return TrainedResult(out, PhaseMetrics(phase, "ALIGN", params_total=p, params_trainable=p,
                                               memory_proxy_bytes=_memory_proxy(p, p),
                                               batch=plan.batch, seq_len=plan.seq_len, seed=plan.seed))
    metrics = run_training(out, _stream_batches(stream, plan, tokenizer), plan, phase)
    return TrainedResult(out, metrics)


def sft(model: DecoderModel, instructions: InstructionSet, plan: TrainPlan,
        tokenizer: ByteTokenizer | None = None, phase: str = "sft") -> TrainedResult:
    _expect(plan, "SFT")
    out = model.copy()
    batches = batchify(instructions, plan.batch, plan.seq_len, "response_only", tokenizer)
    metrics = run_training(out, batches, plan, phase)
    return TrainedResult(out, metrics)
