"""
Evaluation, wall-clock benchmarking, report tables and the two ablations.

Reports are plain data: a ``Table`` renders to an aligned text table and to
a header + tab-separated record file. Rendering is a pure function of the
rows, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EOS, PAD, BOS, ByteTokenizer, DocStream, InstructionSet, batchify, default_tokenizer
from .errors import ConfigError, EmptyDataError
from .lora import LoraConfig, attach_lora
from .model import DecoderModel, ModelConfig, build_model, count_params, forward_flops, train_step_flops
from .optim import AdamWState
from .surgery import (
    LayerSelection,
    apply_delta,
    detach_elo,
    replace_layers,
    selection_tensor_names,
)
from .train import TrainPlan, align, resolve_mask, sft, train_elo, train_step

LOG2E = math.log2(math.e)


# ---------------------------------------------------------------------------
# quality metrics

def perplexity(model, stream: DocStream | InstructionSet, seq_len: int | None = None, batch: int = 16,
               tokenizer: ByteTokenizer | None = None) -> float:
    """exp(mean NLL) over every unmasked target position.

    NLL is accumulated in bits (log2) in f64 and the result is ``2 ** mean``,
    which keeps a uniform predictor at exactly ``V``.
    """
    if isinstance(stream, DocStream) and not stream.docs:
        raise EmptyDataError("cannot evaluate perplexity on an empty stream")
    seq_len = seq_len or model.config.max_seq_len
    batches = batchify(stream, batch, seq_len, "all", tokenizer)
    parts = []
    with T.no_grad():
        for b in batches:
            z = model.forward(b.tokens).data.astype(np.float64).reshape(-1, model.config.vocab_size)
            t = b.targets.reshape(-1)
            msk = b.mask.reshape(-1)
            z = z[msk]
            t = t[msk]
            zmax = z.max(axis=-1)
            lse2 = np.log2(np.exp(z - zmax[:, None]).sum(axis=-1))
            nll_bits = lse2 - (z[np.arange(len(t)), t] - zmax) * LOG2E
            parts.append(nll_bits)
    bits = np.concatenate(parts)
    return float(2.0 ** (math.fsum(bits) / len(bits)))


def greedy_decode(model, prompts: Sequence[np.ndarray], max_new: Sequence[int]) -> list[list[int]]:
    """Greedy continuation for a batch of prompts (no KV cache).

    Rows are right-padded; causality keeps padding from affecting each row's
    next-token logits. Generation stops per row at EOS or ``max_new`` tokens.
    """
    n = len(prompts)
    limit = model.config.max_seq_len
    width = min(limit, max(len(p) + m for p, m in zip(prompts, max_new)))
    arr = np.full((n, width), PAD, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    for r, p in enumerate(prompts):
        arr[r, :len(p)] = p
        pos[r] = len(p)
    budget = np.asarray(max_new, dtype=np.int64).copy()
    out: list[list[int]] = [[] for _ in range(n)]
    active = budget > 0
    with T.no_grad():
        while active.any():
            cur = int(pos[active].max())
            logits = model.forward(arr[:, :cur]).data
            for r in np.flatnonzero(active):
                nxt = int(np.argmax(logits[r, pos[r] - 1]))
                out[r].append(nxt)
                budget[r] -= 1
                if pos[r] < width:
                    arr[r, pos[r]] = nxt
                    pos[r] += 1
                if nxt == EOS or budget[r] <= 0 or pos[r] >= width:
                    active[r] = False
    return out


def decode_responses(model, instructions: InstructionSet, slack: int = 4,
                     tokenizer: ByteTokenizer | None = None) -> list[bytes | None]:
    """Greedy answers; ``None`` when no EOS appeared within ``len(response) + slack + 1`` tokens."""
    tok = tokenizer or default_tokenizer()
    prompts = [np.concatenate([[BOS], tok.encode(r.prompt)]) for r in instructions.records]
    windows = [len(r.response) + slack + 1 for r in instructions.records]
    preds = []
    for ids in greedy_decode(model, prompts, windows):
        if EOS in ids:
            preds.append(tok.decode(ids[:ids.index(EOS)]))
        else:
            preds.append(None)
    return preds


def score_predictions(instructions: InstructionSet, predictions: Sequence[bytes | None]) -> dict[str, float]:
    """Exact-match accuracy per language plus ``"all"``."""
    hits: dict[str, list[bool]] = {}
    for r, p in zip(instructions.records, predictions):
        ok = p is not None and p == r.response
        hits.setdefault(r.lang, []).append(ok)
        hits.setdefault("all", []).append(ok)
    return {k: sum(v) / len(v) for k, v in sorted(hits.items())}


def instruction_accuracy(model, instructions: InstructionSet, slack: int = 4,
                         tokenizer: ByteTokenizer | None = None) -> dict[str, float]:
    return score_predictions(instructions, decode_responses(model, instructions, slack, tokenizer))


# ---------------------------------------------------------------------------
# tables

@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, float):
            if v != 0 and (abs(v) >= 1e6 or abs(v) < 1e-3):
                return f"{v:.4e}"
            return f"{v:.4f}"
        return str(v)

    def to_text(self) -> str:
        cells = [self.columns] + [[self._fmt(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = [self.title, ""]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells[0], widths)))
        lines.append("  ".join("-" * w for w in widths))
        for r in cells[1:]:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        lines += [""] + [f"# {n}" for n in self.notes]
        return "\n".join(lines).rstrip() + "\n"

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row))
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def write_table(table: Table, out_dir: str | Path, stem: str, cfg_hash: str) -> tuple[Path, Path]:
    """Write ``<stem>-<cfg>-<runid>.txt`` and ``.tsv``; run id is derived from content."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = table.to_tsv()
    run_id = hashlib.sha1(tsv.encode()).hexdigest()[:7]
    base = out_dir / f"{stem}-{cfg_hash}-{run_id}"
    txt_path, tsv_path = Path(f"{base}.txt"), Path(f"{base}.tsv")
    txt_path.write_text(table.to_text())
    tsv_path.write_text(tsv)
    return txt_path, tsv_path


# ---------------------------------------------------------------------------
# run-level report

@dataclass
class MetricsReport:
    phases: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    speedups: list[dict] = field(default_factory=list)

    def add_phase(self, metrics) -> None:
        self.phases.append(metrics.summary())

    def add_eval(self, model_tag: str, corpus: str, ppl: float) -> None:
        self.evals.append({"model": model_tag, "corpus": corpus, "perplexity": ppl})

    def ppl(self, model_tag: str, corpus: str) -> float:
        for e in self.evals:
            if e["model"] == model_tag and e["corpus"] == corpus:
                return e["perplexity"]
        raise KeyError((model_tag, corpus))

    def to_dict(self) -> dict:
        return asdict(self)

    def phase_table(self, include_wall: bool = True) -> Table:
        cols = ["phase", "method", "steps", "step_flops", "params_total", "params_trainable"]
        if include_wall:
            cols += ["wall_seconds", "tokens_per_second"]
        t = Table("training phases", cols)
        for p in self.phases:
            t.rows.append([p[c] for c in cols])
        return t

    def eval_table(self) -> Table:
        t = Table("evaluation", ["model", "corpus", "perplexity"])
        for e in self.evals:
            t.rows.append([e["model"], e["corpus"], e["perplexity"]])
        for tag, acc in self.accuracy.items():
            for lang, v in acc.items():
                t.rows.append([tag, f"instr:{lang}", v])
        return t


# ---------------------------------------------------------------------------
# wall-clock benchmark

@dataclass
class BenchResult:
    method: str
    config: dict
    selection: list[int] | None
    batch: int
    seq_len: int
    seed: int
    warmup: int
    step_seconds: list[float]
    step_flops: int
    params_total: int
    params_trainable: int
    data_bytes: int = 0
    align_bytes: int = 0
    align_step_seconds: float = 0.0

    @property
    def median_step(self) -> float:
        return statistics.median(self.step_seconds)

    @property
    def mean_step(self) -> float:
        return statistics.fmean(self.step_seconds)

    @property
    def tokens_per_step(self) -> int:
        return self.batch * self.seq_len

    def steps_for(self, n_bytes: int) -> int:
        return math.ceil(n_bytes / self.tokens_per_step) if n_bytes > 0 else 0

    def fixed_overhead(self) -> float:
        """Alignment cost paid once by ELO, independent of the pretraining size."""
        return self.steps_for(self.align_bytes) * self.align_step_seconds

    def extrapolated_seconds(self, n_bytes: int | None = None) -> float:
        n_bytes = self.data_bytes if n_bytes is None else n_bytes
        return self.steps_for(n_bytes) * self.median_step + self.fixed_overhead()


def bench_batches(config: ModelConfig, batch: int, seq_len: int, seed: int, n: int = 4):
    """Deterministic batches of in-vocabulary tokens shared by all benchmark arms."""
    from .data import Batch

    rng = np.random.default_rng([seed, batch, seq_len, config.vocab_size])
    out = []
    for _ in range(n):
        toks = rng.integers(3, config.vocab_size, size=(batch, seq_len + 1))
        out.append(Batch(toks[:, :-1], toks[:, 1:], np.ones((batch, seq_len), dtype=bool)))
    return out


@dataclass
class _Arm:
    method: str
    modelish: object
    plan: TrainPlan
    mask: list[str]
    selection: list[int] | None
    align_step: float = 0.0
    state: AdamWState = field(default_factory=AdamWState)
    times: list[float] = field(default_factory=list)

    def step(self, batch, timed: bool) -> None:
        t0 = time.perf_counter()
        train_step(self.modelish, batch, self.plan, self.state, self.mask)
        if timed:
            self.times.append(time.perf_counter() - t0)


def _time_steps(modelish, plan: TrainPlan, batches, n_steps: int, warmup: int) -> list[float]:
    arm = _Arm(plan.method, modelish, plan, resolve_mask(modelish, plan), None)
    modelish.set_trainable(arm.mask)
    for i in range(warmup + n_steps):
        arm.step(batches[i % len(batches)], i >= warmup)
    modelish.set_trainable([])
    return arm.times


def _make_arm(config: ModelConfig, method: str, selection, lora_cfg, batch: int, seq_len: int, seed: int,
              batches, align_bytes: int, align_probe_steps: int) -> _Arm:
    method = method.upper()
    model = build_model(config)
    plan = TrainPlan(method=method, batch=batch, seq_len=seq_len, seed=seed)
    align_step = 0.0
    sel = None
    if method == "FFT":
        modelish = model
    elif method == "ELO":
        sel = LayerSelection(selection or (1, config.n_layers))
        modelish = detach_elo(model, sel)
        if align_bytes > 0:
            probe = _time_steps(build_model(config), TrainPlan(method="ALIGN", batch=batch, seq_len=seq_len),
                                batches, align_probe_steps, 2)
            align_step = statistics.median(probe)
    elif method == "LORA":
        modelish = attach_lora(model, lora_cfg or LoraConfig())
    else:
        raise ConfigError(f"cannot benchmark method {method!r}")
    arm = _Arm(method, modelish, plan, resolve_mask(modelish, plan), list(sel) if sel else None, align_step)
    modelish.set_trainable(arm.mask)
    return arm


def _arm_result(arm: _Arm, config: ModelConfig, batch: int, seq_len: int, seed: int, warmup: int,
                data_bytes: int, align_bytes: int) -> BenchResult:
    m = arm.modelish
    m.set_trainable([])
    return BenchResult(
        method=arm.method, config=config.to_dict(), selection=arm.selection,
        batch=batch, seq_len=seq_len, seed=seed, warmup=warmup, step_seconds=arm.times,
        step_flops=train_step_flops(m.config, m.n_active_layers, seq_len, batch, m.extra_flops(seq_len)),
        params_total=count_params(m, "all"), params_trainable=count_params(m, arm.mask),
        data_bytes=data_bytes, align_bytes=align_bytes if arm.method == "ELO" else 0,
        align_step_seconds=arm.align_step,
    )


def bench_suite(
    config: ModelConfig,
    methods: Sequence[str],
    selection: Sequence[int] | None = None,
    lora_cfg: LoraConfig | None = None,
    n_steps: int = 20,
    data_bytes: int = 0,
    *,
    warmup: int = 5,
    batch: int = 8,
    seq_len: int = 128,
    seed: int = 0,
    align_bytes: int = 0,
    align_probe_steps: int = 5,
) -> list[BenchResult]:
    """Time ``n_steps`` optimizer steps per method, interleaved across methods.

    Each round runs one step of every arm, rotating the order, so slow drift
    in machine load is shared by all arms instead of landing on whichever arm
    happened to run during it. ``warmup`` rounds are discarded. For ELO,
    ``align_bytes`` of full-model alignment is added to the extrapolated
    total using a short probe of full-model steps.
    """
    if n_steps < 1 or warmup < 0:
        raise ValueError("n_steps must be >= 1 and warmup >= 0")
    if not methods:
        raise ConfigError("no methods to benchmark")
    batches = bench_batches(config, batch, seq_len, seed)
    arms = [_make_arm(config, m, selection, lora_cfg, batch, seq_len, seed, batches, align_bytes,
                      align_probe_steps) for m in methods]
    k = len(arms)
    for i in range(warmup + n_steps):
        b = batches[i % len(batches)]
        for j in range(k):
            arms[(i + j) % k].step(b, i >= warmup)
    return [_arm_result(a, config, batch, seq_len, seed, warmup, data_bytes, align_bytes) for a in arms]


def bench_method(
    config: ModelConfig,
    method: str,
    selection: Sequence[int] | None = None,
    lora_cfg: LoraConfig | None = None,
    n_steps: int = 20,
    data_bytes: int = 0,
    **kw,
) -> BenchResult:
    """Time a single method; see :func:`bench_suite`."""
    return bench_suite(config, [method], selection, lora_cfg, n_steps, data_bytes, **kw)[0]


def speedup_report(results: Sequence[BenchResult], data_units: Sequence[float] = (),
                   unit_bytes: int = 64 * 1024) -> Table:
    """Per-method wall time, FLOPs and speedup relative to FFT (or the first row)."""
    if len(results) < 2:
        raise ConfigError("speedup_report needs at least two measured methods")
    ref_keys = (results[0].config, results[0].batch, results[0].seq_len, results[0].seed)
    for r in results[1:]:
        if (r.config, r.batch, r.seq_len, r.seed) != ref_keys:
            raise ConfigError(f"{r.method} was measured on a different config/batch/seq_len/seed")
    ref = next((r for r in results if r.method == "FFT"), results[0])
    cols = ["method", "median_step_s", "mean_step_s", "step_flops", "flop_ratio_vs_" + ref.method.lower(),
            "wall_speedup_vs_" + ref.method.lower(), "params_trainable", "params_total"]
    for u in data_units:
        cols.append(f"total_s@{u:g}u")
    for u in data_units:
        cols.append(f"speedup@{u:g}u")
    t = Table("training-time comparison", cols)
    for r in results:
        row = [r.method, r.median_step, r.mean_step, r.step_flops, ref.step_flops / r.step_flops,
               ref.median_step / r.median_step, r.params_trainable, r.params_total]
        row += [r.extrapolated_seconds(int(u * unit_bytes)) for u in data_units]
        row += [ref.extrapolated_seconds(int(u * unit_bytes)) / r.extrapolated_seconds(int(u * unit_bytes))
                for u in data_units]
        t.rows.append(row)
    t.notes = [
        f"batch={ref.batch} seq_len={ref.seq_len} seed={ref.seed} warmup={ref.warmup} "
        f"timed_steps={len(ref.step_seconds)}",
        f"data axis: 1 unit = {unit_bytes} bytes (stands in for 1 GB)",
        "speedup = reference median step time / method median step time; flop ratio = reference / method",
    ]
    return t


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationArgs:
    pt_stream: DocStream
    align_stream: DocStream
    eval_source: DocStream
    eval_target: DocStream
    elo_plan: TrainPlan
    align_plan: TrainPlan
    eval_seq_len: int = 64
    tokenizer: ByteTokenizer | None = None
    instructions: InstructionSet | None = None
    chat_delta: object | None = None
    sft_plan: TrainPlan | None = None
    sft_data: InstructionSet | None = None


def _non_selected_fingerprint(model: DecoderModel, selection: Sequence[int]) -> str:
    from .model import fingerprint_params

    skip = selection_tensor_names(selection)
    return fingerprint_params({k: v for k, v in model.params.items() if k not in skip})


def ablate_layers(base: DecoderModel, selections: Sequence[LayerSelection], args: AblationArgs) -> Table:
    """Full ELO pipeline per selection with identical budgets and seeds.

    Surgery and cost invariants are checked per cell (column ``invariants``);
    the quality ranking is reported only.
    """
    cols = ["selection", "n_selected", "params_trainable", "step_flops", "flop_ratio_vs_fft",
            "elo_steps", "elo_wall_s", "target_ppl_merged", "target_ppl", "source_ppl",
            "instr_acc", "invariants", "rank_target_ppl"]
    table = Table("impact of layer selection", cols)
    base_fp_cache = {}
    full_flops = forward_flops(base.config, base.config.n_layers, args.elo_plan.seq_len)
    for sel in selections:
        sel = sel if isinstance(sel, LayerSelection) else LayerSelection(sel)
        sub = detach_elo(base, sel)
        res = train_elo(sub, args.pt_stream, args.elo_plan, args.tokenizer)
        trained = res.model
        problems = []
        for name in trained.frozen_names():
            if not np.array_equal(trained.model.params[name].data, sub.model.params[name].data):
                problems.append(f"{name} changed")
        expect = train_step_flops(trained.config, len(sel), args.elo_plan.seq_len, args.elo_plan.batch)
        if res.metrics.step_flops != expect:
            problems.append("step flops != cost model")
        merged = replace_layers(base, trained)
        key = tuple(sel)
        if key not in base_fp_cache:
            base_fp_cache[key] = _non_selected_fingerprint(base, sel)
        if _non_selected_fingerprint(merged, sel) != base_fp_cache[key]:
            problems.append("non-selected tensors changed")
        tgt_merged = perplexity(merged, args.eval_target, args.eval_seq_len, tokenizer=args.tokenizer)
        aligned = align(merged, args.align_stream, args.align_plan, args.tokenizer).model
        tgt = perplexity(aligned, args.eval_target, args.eval_seq_len, tokenizer=args.tokenizer)
        src = perplexity(aligned, args.eval_source, args.eval_seq_len, tokenizer=args.tokenizer)
        acc = float("nan")
        if args.instructions is not None:
            final = aligned
            if args.chat_delta is not None:
                final = apply_delta(final, args.chat_delta)
            if args.sft_plan is not None and args.sft_data is not None:
                final = sft(final, args.sft_data, args.sft_plan, args.tokenizer).model
            acc = instruction_accuracy(final, args.instructions, tokenizer=args.tokenizer)["all"]
        table.rows.append([
            str(sel), len(sel), res.metrics.params_trainable, res.metrics.step_flops,
            3 * full_flops * args.elo_plan.batch / res.metrics.step_flops,
            res.metrics.steps, res.metrics.wall_seconds, tgt_merged, tgt, src, acc,
            "ok" if not problems else "; ".join(problems), 0,
        ])
    order = sorted(range(len(table.rows)), key=lambda i: table.rows[i][8])
    for rank, i in enumerate(order, start=1):
        table.rows[i][-1] = rank
    table.notes = ["ranking by aligned target perplexity is reported, not asserted"]
    return table


def ablate_align_budget(pre_align: DecoderModel, args: AblationArgs, budgets_units: Sequence[float],
                        unit_bytes: int) -> Table:
    """One alignment run per budget, all starting from the same pre-align model."""
    from .data import take_bytes

    budgets = list(budgets_units)
    if budgets != sorted(budgets) or 0 not in budgets:
        raise ValueError("budgets must be sorted ascending and include 0")
    pre_fp = pre_align.fingerprint()
    cols = ["budget_units", "budget_bytes", "align_steps", "target_ppl", "source_ppl", "pre_align_fingerprint"]
    table = Table("alignment budget", cols)
    for units in budgets:
        n_bytes = int(round(units * unit_bytes))
        stream = take_bytes(args.align_stream, n_bytes)
        res = align(pre_align, stream, args.align_plan, args.tokenizer)
        if pre_align.fingerprint() != pre_fp:
            raise AssertionError("alignment mutated the shared pre-align model")
        table.rows.append([
            float(units), n_bytes, res.metrics.steps,
            perplexity(res.model, args.eval_target, args.eval_seq_len, tokenizer=args.tokenizer),
            perplexity(res.model, args.eval_source, args.eval_seq_len, tokenizer=args.tokenizer),
            pre_fp[:16],
        ])
    table.notes = [f"1 unit = {unit_bytes} bytes (stands in for 1 GB of alignment data)"]
    return table
