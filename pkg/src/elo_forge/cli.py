"""
Command-line entry point.

Every subcommand reads its inputs from checkpoint/data files and writes its
outputs to files, so any phase can be re-run on its own. Each invocation
also writes ``manifest.json`` (resolved config, seeds, versions) into the
output directory.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import default_tokenizer, read_corpus, read_instructions, take_bytes
from .errors import ConfigError, EloError
from .evalbench import (
    AblationArgs,
    ablate_align_budget,
    ablate_layers,
    bench_suite,
    config_hash,
    instruction_accuracy,
    perplexity,
    speedup_report,
    write_table,
)
from .lora import attach_lora, merge_lora
from .model import DecoderModel, build_model
from .pipeline import Pipeline, write_manifest, write_phase_log
from .surgery import EloSubModel, LayerSelection, apply_delta, compute_delta, detach_elo, replace_layers
from .train import align, sft, train_elo, train_fft, train_lora

PLAN_SECTIONS = ["base", "fft", "elo", "lora", "align", "inst", "sft"]

log = logging.getLogger("elo_forge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _layers(text: str) -> LayerSelection:
    try:
        return LayerSelection.parse(text)
    except EloError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="elo-forge", description="Layer-selective continual pretraining toolkit")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate corpora and instruction sets")

    s = sub.add_parser("init", parents=[common], help="write a freshly initialised model")
    s.add_argument("--output", required=True)

    s = sub.add_parser("train", parents=[common], help="causal-LM training")
    s.add_argument("--method", required=True, choices=["fft", "elo", "lora"])
    s.add_argument("--input", required=True, help="full model (fft, lora) or detached sub-model (elo)")
    s.add_argument("--data", required=True, help="corpus file")
    s.add_argument("--output", required=True)
    s.add_argument("--plan", choices=PLAN_SECTIONS, help="train.* config section (default: the method's own)")

    s = sub.add_parser("detach", parents=[common], help="detach embedding, selected layers and head")
    s.add_argument("--layers", type=_layers, help="1-based indices, e.g. 1,16 (default: first and last)")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("merge", parents=[common], help="write trained layers back into the original")
    s.add_argument("--base", required=True)
    s.add_argument("--sub", required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("align", parents=[common], help="brief full fine-tune of a merged model")
    s.add_argument("--budget", type=float, required=True, help="data budget in units (see data.unit_kb)")
    s.add_argument("--input", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("chatvec", parents=[common], help="parameter delta between two models")
    s.add_argument("action", choices=["diff", "apply"])
    s.add_argument("--minuend", help="diff: instruction-tuned model")
    s.add_argument("--subtrahend", help="diff: its base model")
    s.add_argument("--input", help="apply: model receiving the delta")
    s.add_argument("--delta", help="apply: delta checkpoint")
    s.add_argument("--output", required=True)

    s = sub.add_parser("sft", parents=[common], help="supervised fine-tuning on instructions")
    s.add_argument("--input", required=True)
    s.add_argument("--data", required=True, help="instruction TSV")
    s.add_argument("--output", required=True)
    s.add_argument("--plan", choices=PLAN_SECTIONS, help="train.* config section (default: sft)")

    s = sub.add_parser("eval", parents=[common], help="perplexity or instruction accuracy")
    s.add_argument("kind", choices=["ppl", "instr"])
    s.add_argument("--input", required=True)
    s.add_argument("--data", help="corpus (ppl) or instruction TSV (instr); synthetic eval set when omitted")

    s = sub.add_parser("bench", parents=[common], help="wall-clock comparison of training methods")
    s.add_argument("--methods", type=_csv, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--exclusive", action="store_true",
                   help="hold a lock so concurrent benchmarks cannot overlap timings")

    s = sub.add_parser("ablate", parents=[common], help="layer-selection or alignment-budget ablation")
    s.add_argument("kind", choices=["layers", "align-budget"])
    s.add_argument("--sft", action="store_true", help="also apply chat vector + SFT per layer cell")

    s = sub.add_parser("pipeline", parents=[common], help="run every phase end to end (resumable)")
    s.add_argument("kind", choices=["elo", "fft"])
    s.add_argument("--until", help="stop after this phase")
    s.add_argument("--fresh", action="store_true", help="ignore existing phase outputs")
    return p


# -- helpers -----------------------------------------------------------------

def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    out = getattr(args, "output", None)
    if out and args.cmd not in ("pipeline", "bench", "ablate", "gen-data"):
        return Path(out).parent
    return Path(cfg.output_dir)


def _expect(obj, cls, path: str):
    if not isinstance(obj, cls):
        raise ConfigError(f"{path}: expected {cls.__name__} checkpoint, got {type(obj).__name__}")
    return obj


def _save(path: str, obj, phase: str) -> None:
    save_checkpoint(path, obj, {"phase": phase})
    print(f"wrote {path} fingerprint={obj.fingerprint()}")


def _tokenizer(cfg: RunConfig):
    return default_tokenizer([cfg.data.source.build(), cfg.data.target.build()])


@contextlib.contextmanager
def _lock(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise EloError(f"another exclusive benchmark holds {path}") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg, out):
    Pipeline(cfg, out).phase_data()
    print(f"wrote data to {out / 'data'}")


def cmd_init(args, cfg, out):
    _save(args.output, build_model(cfg.model.build()), "init")


def cmd_train(args, cfg, out):
    tok = _tokenizer(cfg)
    stream = read_corpus(args.data)
    src = load_checkpoint(args.input)
    seed = cfg.model.seed
    plan = getattr(cfg.train, args.plan or args.method).plan(args.method.upper(), seed)
    if args.method == "fft":
        res = train_fft(_expect(src, DecoderModel, args.input), stream, plan, tok)
        model = res.model
    elif args.method == "elo":
        res = train_elo(_expect(src, EloSubModel, args.input), stream, plan, tok)
        model = res.model
    else:
        lm = attach_lora(_expect(src, DecoderModel, args.input), cfg.lora.build(seed))
        res = train_lora(lm, stream, plan, tok)
        model = merge_lora(res.model)
    write_phase_log(Pipeline(cfg, out).paths, res.metrics)
    _save(args.output, model, args.method)


def cmd_detach(args, cfg, out):
    base = _expect(load_checkpoint(args.input), DecoderModel, args.input)
    sel = args.layers or LayerSelection(cfg.selection())
    _save(args.output, detach_elo(base, sel, cfg.elo.train_emb_head), "detach")


def cmd_merge(args, cfg, out):
    base = _expect(load_checkpoint(args.base), DecoderModel, args.base)
    sub = _expect(load_checkpoint(args.sub), EloSubModel, args.sub)
    _save(args.output, replace_layers(base, sub), "merge")


def cmd_align(args, cfg, out):
    if args.budget < 0:
        raise ConfigError("--budget must be >= 0")
    model = _expect(load_checkpoint(args.input), DecoderModel, args.input)
    stream = take_bytes(read_corpus(args.data), int(round(args.budget * cfg.data.unit_bytes)))
    res = align(model, stream, cfg.train.align.plan("ALIGN", cfg.model.seed), _tokenizer(cfg))
    write_phase_log(Pipeline(cfg, out).paths, res.metrics)
    _save(args.output, res.model, "align")


def cmd_chatvec(args, cfg, out):
    if args.action == "diff":
        if not (args.minuend and args.subtrahend):
            raise UsageError("chatvec diff requires --minuend and --subtrahend")
        a = _expect(load_checkpoint(args.minuend), DecoderModel, args.minuend)
        b = _expect(load_checkpoint(args.subtrahend), DecoderModel, args.subtrahend)
        _save(args.output, compute_delta(a, b), "chatvec")
    else:
        if not (args.input and args.delta):
            raise UsageError("chatvec apply requires --input and --delta")
        model = _expect(load_checkpoint(args.input), DecoderModel, args.input)
        _save(args.output, apply_delta(model, load_checkpoint(args.delta)), "apply")


def cmd_sft(args, cfg, out):
    model = _expect(load_checkpoint(args.input), DecoderModel, args.input)
    res = sft(model, read_instructions(args.data), getattr(cfg.train, args.plan or "sft").plan("SFT", cfg.model.seed),
              _tokenizer(cfg))
    write_phase_log(Pipeline(cfg, out).paths, res.metrics)
    _save(args.output, res.model, "sft")


def cmd_eval(args, cfg, out):
    model = load_checkpoint(args.input)
    if not hasattr(model, "forward"):
        raise ConfigError(f"{args.input}: cannot evaluate a {type(model).__name__}")
    tok = _tokenizer(cfg)
    if args.kind == "ppl":
        if args.data:
            stream = read_corpus(args.data)
        else:
            from .pipeline import generate_data

            stream = generate_data(cfg)["eval_tgt"]
        print(round(perplexity(model, stream, cfg.eval.seq_len, cfg.eval.batch, tok), 6))
    else:
        if args.data:
            iset = read_instructions(args.data)
        else:
            from .pipeline import generate_data

            iset = generate_data(cfg)["sft_heldout"]
        acc = instruction_accuracy(model, iset, cfg.eval.slack, tok)
        for k in sorted(acc):
            print(f"{k}\t{acc[k]:.4f}")


def cmd_bench(args, cfg, out):
    b = cfg.bench
    methods = [m.upper() for m in (args.methods or b.methods)]
    bad = sorted(set(methods) - {"FFT", "ELO", "LORA"})
    if bad:
        raise UsageError(f"unknown bench methods {bad}")
    steps = args.steps or b.n_steps
    lock = _lock(out / ".bench.lock") if args.exclusive else contextlib.nullcontext()
    with lock:
        results = bench_suite(cfg.model.build(), methods, cfg.selection(), cfg.lora.build(cfg.model.seed), steps,
                              warmup=b.warmup, batch=b.batch, seq_len=b.seq_len, seed=cfg.model.seed,
                              align_bytes=int(cfg.data.align_units * cfg.data.unit_bytes))
    table = speedup_report(results, b.data_units, cfg.data.unit_bytes)
    print(table.to_text())
    txt, tsv = write_table(table, out / "reports", "bench", config_hash(cfg.resolved()))
    print(f"wrote {tsv}")


def _ablation_args(cfg: RunConfig, pipe: Pipeline, with_sft: bool) -> AblationArgs:
    seed = cfg.model.seed
    pool = read_corpus(pipe.paths.data("align_pool"))
    budget = int(round(cfg.data.align_units * cfg.data.unit_bytes))
    return AblationArgs(
        pt_stream=read_corpus(pipe.paths.data("pt_mix")),
        align_stream=pool if not with_sft else take_bytes(pool, budget),
        eval_source=read_corpus(pipe.paths.data("eval_src")),
        eval_target=read_corpus(pipe.paths.data("eval_tgt")),
        elo_plan=cfg.train.elo.plan("ELO", seed),
        align_plan=cfg.train.align.plan("ALIGN", seed),
        eval_seq_len=cfg.eval.seq_len,
        tokenizer=pipe.tok,
        instructions=read_instructions(pipe.paths.data("sft_heldout")) if with_sft else None,
        chat_delta=load_checkpoint(pipe.paths.ckpt("chatvec")) if with_sft else None,
        sft_plan=cfg.train.sft.plan("SFT", seed) if with_sft else None,
        sft_data=read_instructions(pipe.paths.data("sft_train")) if with_sft else None,
    )


def cmd_ablate(args, cfg, out):
    pipe = Pipeline(cfg, out, "elo")
    chash = config_hash(cfg.resolved())
    if args.kind == "layers":
        pipe.run(until="chatvec" if args.sft else "base")
        a = _ablation_args(cfg, pipe, args.sft)
        if not args.sft:
            a.align_stream = take_bytes(a.align_stream, int(round(cfg.data.align_units * cfg.data.unit_bytes)))
        sels = [LayerSelection(s) for s in cfg.ablate.selections]
        for s in sels:
            s.check(cfg.model.n_layers)
        table = ablate_layers(load_checkpoint(pipe.paths.ckpt("base")), sels, a)
        stem = "ablate-layers"
    else:
        pipe.run(until="merge")
        a = _ablation_args(cfg, pipe, False)
        table = ablate_align_budget(load_checkpoint(pipe.paths.ckpt("merged")), a, cfg.ablate.budgets,
                                    cfg.data.unit_bytes)
        stem = "ablate-align-budget"
    print(table.to_text())
    txt, tsv = write_table(table, out / "reports", stem, chash)
    print(f"wrote {tsv}")


def cmd_pipeline(args, cfg, out):
    report = Pipeline(cfg, out, args.kind, resume=not args.fresh).run(until=args.until)
    if report is not None:
        print(report.eval_table().to_text())
    print(f"run directory: {out}")


COMMANDS = {
    "gen-data": cmd_gen_data, "init": cmd_init, "train": cmd_train, "detach": cmd_detach,
    "merge": cmd_merge, "align": cmd_align, "chatvec": cmd_chatvec, "sft": cmd_sft,
    "eval": cmd_eval, "bench": cmd_bench, "ablate": cmd_ablate, "pipeline": cmd_pipeline,
}


def thread_cap() -> int:
    raw = os.environ.get("ELO_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ELO_FORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ELO_FORGE_THREADS must be >= 1")
    return n


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help exits 0 through argparse
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        out = _out_dir(args, cfg)
        if args.out:
            cfg = cfg.model_copy(update={"output_dir": str(out)})
        write_manifest(out, cfg, {"command": args.cmd, "argv": list(argv if argv is not None else sys.argv[1:])})
        with threadpool_limits(limits=thread_cap()):
            COMMANDS[args.cmd](args, cfg, out)
    except (UsageError, ConfigError) as exc:
        print(f"elo-forge: error: {exc}", file=sys.stderr)
        return 1
    except (EloError, OSError, ValueError, KeyError, AssertionError) as exc:
        print(f"elo-forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
