"""
End-to-end runs driven by a ``RunConfig``.

Phases communicate only through files in the run directory, and a phase
whose outputs already exist is skipped. Re-running a finished run is
therefore a no-op, and an interrupted run picks up where it stopped.

ELO run::

    data -> init -> base (source-language PT, the original model)
         -> inst (source SFT) -> chatvec diff (inst - base)
         -> detach -> elo -> merge -> align -> chatvec apply -> sft -> eval

The FFT run replaces detach..align with one full fine-tune on the same
pretraining mix.
"""

from __future__ import annotations

import json
import logging
import math
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    DocStream,
    InstructionSet,
    default_tokenizer,
    gen_bilingual_instructions,
    gen_corpus,
    gen_instructions,
    mix_streams,
    read_corpus,
    read_instructions,
    split_instructions,
    take_bytes,
    write_corpus,
    write_instructions,
)
from .evalbench import MetricsReport, config_hash, instruction_accuracy, perplexity, write_table
from .model import build_model
from .surgery import LayerSelection, apply_delta, compute_delta, detach_elo, replace_layers
from .train import PhaseMetrics, align, sft, train_elo, train_fft

log = logging.getLogger(__name__)

ELO_PHASES = ("data", "init", "base", "inst", "chatvec", "detach", "elo", "merge", "align", "apply", "sft", "eval")
FFT_PHASES = ("data", "init", "base", "inst", "chatvec", "fft", "apply", "sft", "eval")


def _seed(base: int, k: int) -> int:
    return int(base) * 1000 + k


def generate_data(cfg: RunConfig) -> dict[str, DocStream | InstructionSet]:
    d = cfg.data
    src, tgt = d.source.build(), d.target.build()
    s = d.seed
    out: dict[str, DocStream | InstructionSet] = {}
    out["base_src"] = gen_corpus(src, d.base_docs, _seed(s, 1))
    n_src = math.ceil(d.pt_docs * d.ratio[0] / max(1, sum(d.ratio))) + 1
    n_tgt = math.ceil(d.pt_docs * d.ratio[1] / max(1, sum(d.ratio))) + 1
    pt = mix_streams(gen_corpus(src, n_src, _seed(s, 2)), gen_corpus(tgt, n_tgt, _seed(s, 3)), d.ratio)
    out["pt_mix"] = DocStream(pt.docs[:d.pt_docs], pt.langs[:d.pt_docs], pt.seed, pt.meta)
    pool_docs = math.ceil(d.align_pool_units * d.unit_bytes / src.doc_len_range[0]) + 2
    a_src = math.ceil(pool_docs * d.ratio[0] / max(1, sum(d.ratio))) + 1
    a_tgt = math.ceil(pool_docs * d.ratio[1] / max(1, sum(d.ratio))) + 1
    out["align_pool"] = mix_streams(gen_corpus(src, a_src, _seed(s, 4)), gen_corpus(tgt, a_tgt, _seed(s, 5)), d.ratio)
    out["eval_src"] = gen_corpus(src, d.eval_docs, _seed(s, 6))
    out["eval_tgt"] = gen_corpus(tgt, d.eval_docs, _seed(s, 7))
    bil = gen_bilingual_instructions(src, tgt, d.sft_instructions + d.held_out, _seed(s, 8),
                                     payload_len_range=d.payload_len_range)
    train_set, held = split_instructions(bil, d.held_out)
    held_prompts = {r.prompt for r in held.records}
    inst = gen_instructions(src, d.inst_source, _seed(s, 9), payload_len_range=d.payload_len_range)
    out["inst_src"] = InstructionSet([r for r in inst.records if r.prompt not in held_prompts])
    out["sft_train"] = train_set
    out["sft_heldout"] = held
    return out


@dataclass
class RunPaths:
    root: Path

    def data(self, name: str) -> Path:
        ext = "tsv" if name.startswith(("inst", "sft")) else "txt"
        return self.root / "data" / f"{name}.{ext}"

    def ckpt(self, name: str) -> Path:
        return self.root / "ckpt" / f"{name}.elof"

    def log(self, phase: str) -> Path:
        return self.root / "logs" / f"{phase}.log"

    def summary(self, phase: str) -> Path:
        return self.root / "logs" / f"{phase}.json"


def write_phase_log(paths: RunPaths, metrics: PhaseMetrics) -> None:
    p = paths.log(metrics.phase)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("step\tloss\twall_ms\tflops\n" + "".join(line + "\n" for line in metrics.log_lines()))
    paths.summary(metrics.phase).write_text(json.dumps(metrics.summary(), indent=1, sort_keys=True))


def write_manifest(root: Path, cfg: RunConfig, extra: dict | None = None) -> Path:
    resolved = cfg.resolved()
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({
        "config_hash": config_hash(resolved),
        "config": resolved,
        "seeds": {"model": cfg.model.seed, "data": cfg.data.seed},
        "versions": {"elo_forge": __version__, "numpy": np.__version__, "python": platform.python_version()},
    })
    manifest.update(extra or {})
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, kind: str = "elo", resume: bool = True):
        if kind not in ("elo", "fft"):
            raise ValueError(f"unknown pipeline kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.paths = RunPaths(Path(out_dir or cfg.output_dir))
        self.resume = resume
        self.tok = default_tokenizer([cfg.data.source.build(), cfg.data.target.build()])
        if self.tok.vocab_size > cfg.model.vocab_size:
            from .errors import ConfigError

            raise ConfigError(f"model.vocab_size {cfg.model.vocab_size} < tokenizer vocab {self.tok.vocab_size}")
        self.ran: list[str] = []

    # -- helpers -----------------------------------------------------------
    def _done(self, *outputs: Path) -> bool:
        return self.resume and all(p.exists() for p in outputs)

    def _plan(self, section: str, method: str):
        return getattr(self.cfg.train, section).plan(method, self.cfg.model.seed)

    def _corpus(self, name: str) -> DocStream:
        return read_corpus(self.paths.data(name))

    def _instr(self, name: str) -> InstructionSet:
        return read_instructions(self.paths.data(name))

    def _train_phase(self, phase: str, fn, out_name: str) -> None:
        result = fn()
        save_checkpoint(self.paths.ckpt(out_name), result.model, {"phase": phase})
        write_phase_log(self.paths, result.metrics)

    # -- phases ------------------------------------------------------------
    def phase_data(self) -> None:
        names = ("base_src", "pt_mix", "align_pool", "eval_src", "eval_tgt", "inst_src", "sft_train", "sft_heldout")
        if self._done(*(self.paths.data(n) for n in names)):
            return
        specs = [self.cfg.data.source.build(), self.cfg.data.target.build()]
        (self.paths.root / "data").mkdir(parents=True, exist_ok=True)
        for name, obj in generate_data(self.cfg).items():
            if isinstance(obj, InstructionSet):
                write_instructions(self.paths.data(name), obj)
            else:
                write_corpus(self.paths.data(name), obj, specs)

    def phase_init(self) -> None:
        if self._done(self.paths.ckpt("init")):
            return
        save_checkpoint(self.paths.ckpt("init"), build_model(self.cfg.model.build()), {"phase": "init"})

    def phase_base(self) -> None:
        if self._done(self.paths.ckpt("base")):
            return
        init = load_checkpoint(self.paths.ckpt("init"))
        self._train_phase("base", lambda: train_fft(init, self._corpus("base_src"), self._plan("base", "FFT"),
                                                     self.tok, phase="base"), "base")

    def phase_inst(self) -> None:
        if self._done(self.paths.ckpt("inst")):
            return
        base = load_checkpoint(self.paths.ckpt("base"))
        self._train_phase("inst", lambda: sft(base, self._instr("inst_src"), self._plan("inst", "SFT"),
                                               self.tok, phase="inst"), "inst")

    def phase_chatvec(self) -> None:
        if self._done(self.paths.ckpt("chatvec")):
            return
        delta = compute_delta(load_checkpoint(self.paths.ckpt("inst")), load_checkpoint(self.paths.ckpt("base")))
        save_checkpoint(self.paths.ckpt("chatvec"), delta, {"phase": "chatvec"})

    def phase_detach(self) -> None:
        if self._done(self.paths.ckpt("sub")):
            return
        base = load_checkpoint(self.paths.ckpt("base"))
        sub = detach_elo(base, LayerSelection(self.cfg.selection()), self.cfg.elo.train_emb_head)
        save_checkpoint(self.paths.ckpt("sub"), sub, {"phase": "detach"})

    def phase_elo(self) -> None:
        if self._done(self.paths.ckpt("sub_trained")):
            return
        sub = load_checkpoint(self.paths.ckpt("sub"))
        self._train_phase("elo", lambda: train_elo(sub, self._corpus("pt_mix"), self._plan("elo", "ELO"),
                                                    self.tok, phase="elo"), "sub_trained")

    def phase_merge(self) -> None:
        if self._done(self.paths.ckpt("merged")):
            return
        merged = replace_layers(load_checkpoint(self.paths.ckpt("base")), load_checkpoint(self.paths.ckpt("sub_trained")))
        save_checkpoint(self.paths.ckpt("merged"), merged, {"phase": "merge"})

    def phase_align(self) -> None:
        if self._done(self.paths.ckpt("aligned")):
            return
        merged = load_checkpoint(self.paths.ckpt("merged"))
        budget = int(round(self.cfg.data.align_units * self.cfg.data.unit_bytes))
        stream = take_bytes(self._corpus("align_pool"), budget)
        self._train_phase("align", lambda: align(merged, stream, self._plan("align", "ALIGN"), self.tok), "aligned")

    def phase_fft(self) -> None:
        if self._done(self.paths.ckpt("cp")):
            return
        base = load_checkpoint(self.paths.ckpt("base"))
        self._train_phase("fft", lambda: train_fft(base, self._corpus("pt_mix"), self._plan("fft", "FFT"),
                                                    self.tok, phase="fft"), "cp")

    @property
    def pretrained_name(self) -> str:
        return "aligned" if self.kind == "elo" else "cp"

    def phase_apply(self) -> None:
        if self._done(self.paths.ckpt("chat")):
            return
        model = apply_delta(load_checkpoint(self.paths.ckpt(self.pretrained_name)),
                            load_checkpoint(self.paths.ckpt("chatvec")))
        save_checkpoint(self.paths.ckpt("chat"), model, {"phase": "apply"})

    def phase_sft(self) -> None:
        if self._done(self.paths.ckpt("final")):
            return
        chat = load_checkpoint(self.paths.ckpt("chat"))
        self._train_phase("sft", lambda: sft(chat, self._instr("sft_train"), self._plan("sft", "SFT"),
                                              self.tok, phase="sft"), "final")

    def phase_eval(self) -> MetricsReport:
        report_path = self.paths.root / "report.json"
        if self._done(report_path):
            return load_report(report_path)
        ev = self.cfg.eval
        src, tgt = self._corpus("eval_src"), self._corpus("eval_tgt")
        held = self._instr("sft_heldout")
        report = MetricsReport()
        phases = ("base", "inst", "elo", "align", "sft") if self.kind == "elo" else ("base", "inst", "fft", "sft")
        for ph in phases:
            p = self.paths.summary(ph)
            if p.exists():
                report.phases.append(json.loads(p.read_text()))
        tags = ["base", "merged", "aligned", "chat", "final"] if self.kind == "elo" else ["base", "cp", "chat", "final"]
        for tag in tags:
            m = load_checkpoint(self.paths.ckpt(tag))
            report.add_eval(tag, "source", perplexity(m, src, ev.seq_len, ev.batch, self.tok))
            report.add_eval(tag, "target", perplexity(m, tgt, ev.seq_len, ev.batch, self.tok))
            if tag in ("base", "chat", "final"):
                report.accuracy[tag] = instruction_accuracy(m, held, ev.slack, self.tok)
        report_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        chash = config_hash(self.cfg.resolved())
        write_table(report.eval_table(), self.paths.root / "reports", f"{self.kind}-eval", chash)
        write_table(report.phase_table(), self.paths.root / "reports", f"{self.kind}-phases", chash)
        return report

    # -- driver ------------------------------------------------------------
    def run(self, until: str | None = None) -> MetricsReport | None:
        phases = ELO_PHASES if self.kind == "elo" else FFT_PHASES
        write_manifest(self.paths.root, self.cfg, {"pipeline": self.kind, "phases": list(phases)})
        report = None
        for ph in phases:
            log.info("phase %s", ph)
            out = getattr(self, f"phase_{ph}")()
            self.ran.append(ph)
            if ph == "eval":
                report = out
            if ph == until:
                break
        self._write_fingerprints()
        return report

    def _write_fingerprints(self) -> None:
        fps = {}
        ckdir = self.paths.root / "ckpt"
        for p in sorted(ckdir.glob("*.elof")):
            from .checkpoint import read_metadata

            meta, _ = read_metadata(p.read_bytes(), str(p))
            fps[p.stem] = meta["fingerprint"]
        (self.paths.root / "fingerprints.json").write_text(json.dumps(fps, indent=1, sort_keys=True))


def load_report(path: str | Path) -> MetricsReport:
    d = json.loads(Path(path).read_text())
    return MetricsReport(d["phases"], d["evals"], d["accuracy"], d.get("speedups", []))


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None, kind: str = "elo") -> MetricsReport:
    return Pipeline(cfg, out_dir, kind).run()
