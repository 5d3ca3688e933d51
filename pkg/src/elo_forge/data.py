"""
Synthetic bilingual corpora and instruction sets.

Each toy language draws words from its own byte alphabet with a seeded
Markov chain; the two default languages share only space and newline. A
sentence is space-separated words closed by the language's terminator byte
(the last byte of its char set). Documents never contain a newline, so the
on-disk corpus format can be one document per line.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDataError, RatioError

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
SHARED = b" \n"

TASKS = ("copy", "reverse", "upper", "count")


@dataclass(frozen=True)
class LangSpec:
    name: str
    char_set: bytes
    word_len_range: tuple[int, int] = (2, 6)
    sentence_len_range: tuple[int, int] = (3, 8)
    doc_len_range: tuple[int, int] = (384, 640)
    markov_order: int = 1
    transition_seed: int = 0

    def __post_init__(self):
        if len(self.char_set) < 9:
            raise ValueError("char_set needs at least 9 bytes (8 word chars + terminator)")
        if len(set(self.char_set)) != len(self.char_set) or set(self.char_set) & set(SHARED):
            raise ValueError("char_set must be unique bytes excluding space/newline")
        for key in ("word_len_range", "sentence_len_range", "doc_len_range"):
            lo, hi = getattr(self, key)
            if not 1 <= lo <= hi:
                raise ValueError(f"{key} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.markov_order not in (0, 1, 2):
            raise ValueError("markov_order must be 0, 1 or 2")

    @property
    def word_chars(self) -> bytes:
        return self.char_set[:-1]

    @property
    def terminator(self) -> int:
        return self.char_set[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["char_set"] = list(self.char_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LangSpec":
        d = dict(d)
        d["char_set"] = bytes(d["char_set"])
        for key in ("word_len_range", "sentence_len_range", "doc_len_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


SOURCE_LANG = LangSpec("src", bytes(range(ord("a"), ord("z") + 1)), transition_seed=11)
TARGET_LANG = LangSpec("tgt", bytes(range(0xC0, 0xDA)), transition_seed=23)


@dataclass
class DocStream:
    docs: list[bytes]
    langs: list[str]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.docs) != len(self.langs):
            raise ValueError("docs and langs differ in length")

    @property
    def total_bytes(self) -> int:
        return sum(len(d) for d in self.docs)

    def __len__(self) -> int:
        return len(self.docs)


@dataclass(frozen=True)
class Instruction:
    prompt: bytes
    response: bytes
    lang: str
    task: str


@dataclass
class InstructionSet:
    records: list[Instruction]

    def __len__(self) -> int:
        return len(self.records)

    def by_lang(self) -> dict[str, list[Instruction]]:
        out: dict[str, list[Instruction]] = {}
        for r in self.records:
            out.setdefault(r.lang, []).append(r)
        return out


# ---------------------------------------------------------------------------
# tokenizer

class ByteTokenizer:
    """Identity-style byte tokenizer over a declared alphabet plus PAD/BOS/EOS.

    With ``alphabet=None`` every byte is representable (vocab 259). With a
    restricted alphabet, ids are ``3 + rank of the byte in sorted(alphabet)``.
    """

    def __init__(self, alphabet: bytes | None = None):
        if alphabet is None:
            alphabet = bytes(range(256))
        self.alphabet = bytes(sorted(set(alphabet)))
        self._to_id = np.full(256, -1, dtype=np.int64)
        for i, b in enumerate(self.alphabet):
            self._to_id[b] = N_SPECIAL + i
        self._to_byte = np.frombuffer(self.alphabet, dtype=np.uint8)

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + len(self.alphabet)

    def encode(self, data: bytes) -> np.ndarray:
        ids = self._to_id[np.frombuffer(data, dtype=np.uint8)]
        if ids.size and ids.min() < 0:
            bad = bytes(sorted(set(b for b in data if self._to_id[b] < 0)))
            raise ValueError(f"bytes outside tokenizer alphabet: {bad!r}")
        return ids

    def decode(self, ids: Iterable[int]) -> bytes:
        ids = np.asarray(list(ids), dtype=np.int64)
        ids = ids[ids >= N_SPECIAL]
        return self._to_byte[ids - N_SPECIAL].tobytes()


def default_tokenizer(specs: Sequence[LangSpec] = (SOURCE_LANG, TARGET_LANG)) -> ByteTokenizer:
    alphabet = bytearray(SHARED)
    for s in specs:
        alphabet.extend(s.char_set)
    return ByteTokenizer(bytes(alphabet))


# ---------------------------------------------------------------------------
# corpus generation

def _transition_cdfs(spec: LangSpec) -> np.ndarray:
    """Cumulative next-char distributions indexed by context id.

    Context 0 is "start of word"; for order 1 context ``1 + c`` is the
    previous char, for order 2 it is ``1 + prev2 * (n + 1) + prev1`` with
    ``prev2 = n`` standing for "no char".
    """
    n = len(spec.word_chars)
    rng = np.random.default_rng([spec.transition_seed, 0x5EED])
    if spec.markov_order == 0:
        n_ctx = 1
    elif spec.markov_order == 1:
        n_ctx = 1 + n
    else:
        n_ctx = 1 + (n + 1) * (n + 1)
    probs = rng.dirichlet(np.full(n, 0.15), size=n_ctx)
    if spec.markov_order == 0:
        probs[:] = 1.0 / n
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _context(spec: LangSpec, n: int, prev2: int, prev1: int) -> int:
    if spec.markov_order == 0 or prev1 < 0:
        return 0
    if spec.markov_order == 1:
        return 1 + prev1
    return 1 + (prev2 if prev2 >= 0 else n) * (n + 1) + prev1


def _gen_doc(spec: LangSpec, cdf: np.ndarray, rng: np.random.Generator) -> bytes:
    chars = spec.word_chars
    n = len(chars)
    target = int(rng.integers(spec.doc_len_range[0], spec.doc_len_range[1] + 1))
    out = bytearray()
    while len(out) < target:
        n_words = int(rng.integers(spec.sentence_len_range[0], spec.sentence_len_range[1] + 1))
        for w in range(n_words):
            wl = int(rng.integers(spec.word_len_range[0], spec.word_len_range[1] + 1))
            us = rng.random(wl)
            prev2 = prev1 = -1
            for u in us:
                c = int(np.searchsorted(cdf[_context(spec, n, prev2, prev1)], u, side="right"))
                c = min(c, n - 1)
                out.append(chars[c])
                prev2, prev1 = prev1, c
            if w < n_words - 1:
                out.append(0x20)
        out.append(spec.terminator)
        out.append(0x20)
    return bytes(out[:target])


def gen_corpus(spec: LangSpec, n_docs: int, seed: int) -> DocStream:
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    cdf = _transition_cdfs(spec)
    rng = np.random.default_rng([int(seed), spec.transition_seed, 0xC0])
    docs = [_gen_doc(spec, cdf, rng) for _ in range(n_docs)]
    return DocStream(docs, [spec.name] * n_docs, seed, {"spec": spec.to_dict()})


def mix_streams(source: DocStream, target: DocStream, ratio: tuple[int, int] = (1, 9)) -> DocStream:
    """Block interleave: every window holds ``src`` source docs then ``tgt`` target docs."""
    src_parts, tgt_parts = (int(x) for x in ratio)
    if src_parts < 0 or tgt_parts < 0:
        raise RatioError(f"ratio parts must be >= 0, got {ratio}")
    if src_parts == 0 and tgt_parts == 0:
        raise RatioError("ratio parts cannot both be zero")
    docs, langs = [], []
    i = j = 0
    while True:
        if i + src_parts > len(source.docs) or j + tgt_parts > len(target.docs):
            # finish the partial window with whatever is left, then stop
            take_s = min(src_parts, len(source.docs) - i)
            docs += source.docs[i:i + take_s]
            langs += source.langs[i:i + take_s]
            if take_s == src_parts:
                take_t = min(tgt_parts, len(target.docs) - j)
                docs += target.docs[j:j + take_t]
                langs += target.langs[j:j + take_t]
            break
        docs += source.docs[i:i + src_parts]
        langs += source.langs[i:i + src_parts]
        docs += target.docs[j:j + tgt_parts]
        langs += target.langs[j:j + tgt_parts]
        i += src_parts
        j += tgt_parts
    meta = {"ratio": [src_parts, tgt_parts], "source_seed": source.seed, "target_seed": target.seed}
    return DocStream(docs, langs, source.seed, meta)


def take_bytes(stream: DocStream, n_bytes: int) -> DocStream:
    """Longest document prefix whose total size does not exceed ``n_bytes``."""
    docs, langs, total = [], [], 0
    for d, lang in zip(stream.docs, stream.langs):
        if total + len(d) > n_bytes:
            break
        docs.append(d)
        langs.append(lang)
        total += len(d)
    return DocStream(docs, langs, stream.seed, {**stream.meta, "budget_bytes": int(n_bytes)})


def filter_lang(stream: DocStream, lang: str) -> DocStream:
    pairs = [(d, l) for d, l in zip(stream.docs, stream.langs) if l == lang]
    return DocStream([d for d, _ in pairs], [l for _, l in pairs], stream.seed, dict(stream.meta))


# ---------------------------------------------------------------------------
# instructions

def task_keyword(spec: LangSpec, task: str) -> bytes:
    k = TASKS.index(task)
    return spec.word_chars[2 * k:2 * k + 2]


def reference_response(spec: LangSpec, task: str, payload: bytes) -> bytes:
    chars = spec.word_chars
    if task == "copy":
        return payload
    if task == "reverse":
        return payload[::-1]
    if task == "upper":
        n = len(chars)
        return bytes(chars[(chars.index(c) + n // 2) % n] for c in payload)
    if task == "count":
        return bytes([chars[len(payload) % len(chars)]])
    raise ValueError(f"unknown task {task!r}")


def make_instruction(spec: LangSpec, task: str, payload: bytes) -> Instruction:
    prompt = task_keyword(spec, task) + b" " + payload + b"\n"
    return Instruction(prompt, reference_response(spec, task, payload), spec.name, task)


def gen_instructions(
    spec: LangSpec,
    n: int,
    seed: int,
    tasks: Sequence[str] = TASKS,
    payload_len_range: tuple[int, int] = (2, 5),
) -> InstructionSet:
    """Round-robin over ``tasks`` with random payloads from the language's word chars."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([int(seed), spec.transition_seed, 0x1A5])
    chars = spec.word_chars
    records = []
    for i in range(n):
        task = tasks[i % len(tasks)]
        ln = int(rng.integers(payload_len_range[0], payload_len_range[1] + 1))
        payload = bytes(chars[int(c)] for c in rng.integers(0, len(chars), ln))
        records.append(make_instruction(spec, task, payload))
    return InstructionSet(records)


def gen_bilingual_instructions(
    source: LangSpec,
    target: LangSpec,
    n: int,
    seed: int,
    **kwargs,
) -> InstructionSet:
    """1:1 interleave of the two languages; counts differ by at most one."""
    a = gen_instructions(source, (n + 1) // 2, seed, **kwargs).records
    b = gen_instructions(target, max(n // 2, 1), seed + 1, **kwargs).records if n > 1 else []
    records = []
    for i in range(max(len(a), len(b))):
        if i < len(a):
            records.append(a[i])
        if i < len(b):
            records.append(b[i])
    return InstructionSet(records[:n])


def split_instructions(iset: InstructionSet, n_held_out: int) -> tuple[InstructionSet, InstructionSet]:
    """Drop duplicate prompts, then hold out the last ``n_held_out`` records."""
    seen, uniq = set(), []
    for r in iset.records:
        if r.prompt not in seen:
            seen.add(r.prompt)
            uniq.append(r)
    if not 0 <= n_held_out < len(uniq):
        raise ValueError(f"cannot hold out {n_held_out} of {len(uniq)} unique records")
    cut = len(uniq) - n_held_out
    return InstructionSet(uniq[:cut]), InstructionSet(uniq[cut:])


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def _windows(ids: np.ndarray, seq_len: int, first_loss: int = 0):
    """Yield (tokens, targets, mask) windows over one id sequence.

    Windows advance by ``seq_len``; the last one is pulled back so it ends on
    the final target and keeps full context. Targets already covered by the
    previous window are masked, so each target counts exactly once.
    """
    n = len(ids) - 1
    start, covered = 0, 0
    while covered < n:
        s = min(start, max(0, n - seq_len))
        w = ids[s:s + seq_len + 1]
        tok = np.full(seq_len, PAD, dtype=np.int64)
        tgt = np.full(seq_len, PAD, dtype=np.int64)
        msk = np.zeros(seq_len, dtype=bool)
        k = len(w) - 1
        tok[:k] = w[:-1]
        tgt[:k] = w[1:]
        pos = np.arange(s + 1, s + 1 + k)
        msk[:k] = (pos >= first_loss) & (pos > covered)
        yield tok, tgt, msk
        covered = s + k
        start += seq_len


def batchify(
    source: DocStream | InstructionSet,
    batch: int,
    seq_len: int,
    loss_mask_mode: str = "all",
    tokenizer: ByteTokenizer | None = None,
) -> list[Batch]:
    """Next-token batches. Each document becomes ``[BOS] doc [EOS]``, cut into
    windows of ``seq_len`` inputs; PAD positions are masked. In
    ``response_only`` mode only targets belonging to the response (and its
    EOS) count toward the loss.
    """
    if loss_mask_mode not in ("all", "response_only"):
        raise ValueError(f"unknown loss_mask_mode {loss_mask_mode!r}")
    if batch < 1 or seq_len < 1:
        raise ValueError("batch and seq_len must be >= 1")
    tok = tokenizer or default_tokenizer()
    rows = []
    if isinstance(source, InstructionSet):
        if not source.records:
            raise EmptyDataError("instruction set is empty")
        for r in source.records:
            ids = np.concatenate([[BOS], tok.encode(r.prompt), tok.encode(r.response), [EOS]])
            first = 1 + len(r.prompt) if loss_mask_mode == "response_only" else 0
            rows.extend(_windows(ids, seq_len, first))
    else:
        if not source.docs:
            raise EmptyDataError("document stream is empty")
        for d in source.docs:
            ids = np.concatenate([[BOS], tok.encode(d), [EOS]])
            rows.extend(_windows(ids, seq_len))
    rows = [r for r in rows if r[2].any()]
    if not rows:
        raise EmptyDataError("no trainable positions in source")
    out = []
    for i in range(0, len(rows), batch):
        chunk = rows[i:i + batch]
        out.append(Batch(
            np.stack([c[0] for c in chunk]),
            np.stack([c[1] for c in chunk]),
            np.stack([c[2] for c in chunk]),
        ))
    return out


# ---------------------------------------------------------------------------
# file formats

def write_corpus(path: str | Path, stream: DocStream, specs: Sequence[LangSpec] = ()) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        for d in stream.docs:
            fh.write(d + b"\n")
    meta = {
        "n_docs": len(stream.docs),
        "total_bytes": stream.total_bytes,
        "seed": stream.seed,
        "langs": stream.langs,
        "specs": [s.to_dict() for s in specs],
        "meta": stream.meta,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_corpus(path: str | Path) -> DocStream:
    path = Path(path)
    docs = path.read_bytes().split(b"\n")
    if docs and docs[-1] == b"":
        docs.pop()
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        langs, seed, extra = meta["langs"], meta["seed"], meta.get("meta", {})
        if len(langs) != len(docs):
            raise ValueError(f"{meta_path}: {len(langs)} language tags for {len(docs)} docs")
    else:
        langs, seed, extra = ["?"] * len(docs), 0, {}
    return DocStream(docs, langs, seed, extra)


def _escape(b: bytes) -> bytes:
    return b.replace(b"\\", b"\\\\").replace(b"\t", b"\\t").replace(b"\n", b"\\n")


def _unescape(b: bytes) -> bytes:
    out, i = bytearray(), 0
    while i < len(b):
        c = b[i]
        if c == 0x5C and i + 1 < len(b):
            nxt = b[i + 1]
            out.append({ord("n"): 0x0A, ord("t"): 0x09}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return bytes(out)


def write_instructions(path: str | Path, iset: InstructionSet) -> None:
    with open(path, "wb") as fh:
        for r in iset.records:
            fh.write(b"\t".join([_escape(r.prompt), _escape(r.response),
                                 r.lang.encode(), r.task.encode()]) + b"\n")


def read_instructions(path: str | Path) -> InstructionSet:
    records = []
    for lineno, line in enumerate(Path(path).read_bytes().split(b"\n"), start=1):
        if not line:
            continue
        parts = line.split(b"\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        records.append(Instruction(_unescape(parts[0]), _unescape(parts[1]),
                                   parts[2].decode(), parts[3].decode()))
    return InstructionSet(records)
