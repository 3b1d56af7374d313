"""FASTA ingestion, nucleotide tokenisation, windowing and synthetic corpora."""

from __future__ import annotations

import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

NUCLEOTIDES = "ACGT"


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...] = ("A", "C", "G", "T", "N", "<pad>", "<mask>")
    pad: int = 5
    mask: int = 6
    unk: int = 4

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset({self.pad, self.mask})

    def id_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(symbol) from None


VOCAB = Vocabulary()
A, C, G, T, N, PAD, MASK = range(7)

# id -> complementary id, valid for A, C, G, T, N
_COMPLEMENT = np.array([T, G, C, A, N], dtype=np.int64)
_LUT = np.full(256, -1, dtype=np.int64)
for _i, _s in enumerate("ACGTN"):
    _LUT[ord(_s)] = _i


@dataclass
class TokenSequence:
    ids: np.ndarray
    origin: tuple[str, int] = ("", 0)
    strand: str = "forward"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError("TokenSequence ids must be one-dimensional")
        if self.strand not in ("forward", "reverse_complement"):
            raise ValueError(f"unknown strand {self.strand!r}")

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab: Vocabulary = VOCAB) -> None:
        if len(self.ids) and (self.ids.min() < 0 or self.ids.max() >= vocab.size):
            raise ValueError("token id outside vocabulary")
        pad_at = np.flatnonzero(self.ids == vocab.pad)
        if len(pad_at) and pad_at[0] + len(pad_at) != len(self.ids):
            raise ValueError("PAD ids may only form a trailing run")


@dataclass
class SequenceBatch:
    ids: np.ndarray  # [B, T]
    include: np.ndarray  # [B, T] bool, False wherever ids == PAD
    origins: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise ValueError("SequenceBatch ids must be [B, T]")
        self.include = np.asarray(self.include, dtype=bool)
        if self.include.shape != self.ids.shape:
            raise ValueError("inclusion flags must match ids")
        if np.any(self.include & (self.ids == PAD)):
            raise ValueError("PAD positions cannot be included in the loss")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    @classmethod
    def from_ids(cls, ids, origins=None) -> "SequenceBatch":
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        return cls(ids, ids != PAD, list(origins or []))


class FastaParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _normalise(chunk: str) -> str:
    chunk = chunk.upper()
    return "".join(ch if ch in NUCLEOTIDES else "N" for ch in chunk)


def parse_fasta(stream: BinaryIO | bytes | str) -> list[tuple[str, str]]:
    """Parse FASTA into ``(record id, sequence)`` pairs in file order.

    Sequence letters are upper-cased; anything outside ACGT becomes N. The
    record id is the first whitespace-delimited word of the header.
    """
    if isinstance(stream, str):
        stream = stream.encode()
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)

    records: list[tuple[str, str]] = []
    header: str | None = None
    header_line = 0
    parts: list[str] = []

    def flush():
        if header is None:
            return
        if not parts:
            raise FastaParseError(f"empty record {header!r}", header_line)
        records.append((header, "".join(parts)))

    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("latin-1").strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            flush()
            words = line[1:].split()
            header = words[0] if words else ""
            header_line = lineno
            parts = []
            continue
        if header is None:
            raise FastaParseError("sequence data before any header", lineno)
        seq = "".join(line.split())
        if not seq.isalpha() and not all(ch.isalpha() or ch in "*-." for ch in seq):
            raise FastaParseError(f"invalid sequence characters in {seq[:20]!r}", lineno)
        parts.append(_normalise("".join(ch for ch in seq if ch.isalpha())))
    flush()
    return records


def read_fasta(path) -> list[tuple[str, str]]:
    with open(path, "rb") as fh:
        return parse_fasta(fh)


def write_fasta(records: Iterable[tuple[str, str]], width: int = 80) -> str:
    out = []
    for rid, seq in records:
        out.append(f">{rid}")
        out.extend(seq[i : i + width] for i in range(0, len(seq), width))
    return "\n".join(out) + "\n"


def tokenize(s: str, vocab: Vocabulary = VOCAB, origin: tuple[str, int] = ("", 0)) -> TokenSequence:
    if not s:
        raise ValueError("cannot tokenize an empty string")
    raw = np.frombuffer(s.encode("latin-1", errors="replace"), dtype=np.uint8)
    ids = _LUT[raw]
    if (ids < 0).any():
        bad = s[int(np.flatnonzero(ids < 0)[0])]
        raise ValueError(f"character {bad!r} is not in the vocabulary")
    return TokenSequence(ids, origin=origin, strand="forward")


def detokenize(t: TokenSequence | Sequence[int], vocab: Vocabulary = VOCAB) -> str:
    ids = t.ids if isinstance(t, TokenSequence) else t
    return "".join(vocab.symbols[i] if i < 5 else "" for i in ids)


def reverse_complement(t: TokenSequence) -> TokenSequence:
    ids = t.ids
    if len(ids) and (ids.min() < 0 or ids.max() > N):
        raise ValueError("reverse_complement: special tokens present")
    strand = "reverse_complement" if t.strand == "forward" else "forward"
    return TokenSequence(_COMPLEMENT[ids[::-1]], origin=t.origin, strand=strand)


def reverse_complement_str(s: str) -> str:
    return detokenize(reverse_complement(tokenize(s)))


def chunk_record(ids: np.ndarray, length: int, stride: int) -> list[tuple[int, np.ndarray]]:
    """Sliding windows over one record; the last short window is PAD-filled."""
    n = len(ids)
    out = []
    for start in range(0, n, stride):
        window = ids[start : start + length]
        if len(window) < length:
            window = np.concatenate([window, np.full(length - len(window), PAD, dtype=np.int64)])
        out.append((start, window))
        if start + length >= n:
            break
    return out


def chunk_dataset(
    records: Iterable[tuple[str, str]],
    length: int,
    stride: int | None = None,
    batch_size: int = 1,
) -> Iterator[SequenceBatch]:
    """Yield batches of fixed-length windows; windows never cross records."""
    if length < 2:
        raise ValueError("window length must be at least 2")
    stride = length if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be at least 1")
    pending_ids, pending_origin = [], []
    for rid, seq in records:
        if len(seq) < 2:
            log.warning("skipping record %r of length %d", rid, len(seq))
            continue
        ids = tokenize(seq).ids
        for start, window in chunk_record(ids, length, stride):
            pending_ids.append(window)
            pending_origin.append((rid, start))
            if len(pending_ids) == batch_size:
                yield SequenceBatch.from_ids(np.stack(pending_ids), pending_origin)
                pending_ids, pending_origin = [], []
    if pending_ids:
        yield SequenceBatch.from_ids(np.stack(pending_ids), pending_origin)


def windows(records: Iterable[tuple[str, str]], length: int, stride: int | None = None) -> SequenceBatch:
    """All windows of a corpus stacked into one batch."""
    batches = list(chunk_dataset(records, length, stride, batch_size=1 << 30))
    if not batches:
        return SequenceBatch.from_ids(np.zeros((0, length), dtype=np.int64))
    return batches[0]


# ---------------------------------------------------------------------------
# synthetic corpora

_TABLE_SEED = 20250527
_MARKOV_PEAK = (0.6, 0.25, 0.075, 0.075)
BIDIR_PERIOD = 4
# chance of a free successor position following its predecessor with +1
BIDIR_STEP_PROB = 0.8


def markov3_table() -> np.ndarray:
    """Fixed order-3 transition table ``P[a, b, c, next]`` over ACGT."""
    rng = np.random.default_rng(_TABLE_SEED)
    table = np.empty((4, 4, 4, 4))
    for a, b, c in itertools.product(range(4), repeat=3):
        table[a, b, c, rng.permutation(4)] = _MARKOV_PEAK
    return table


def bidir_lookup() -> np.ndarray:
    """Latin square giving the determined token from (x[t-2], x[t+2])."""
    return (np.arange(4)[:, None] + np.arange(4)[None, :]) % 4


def bidir_role(position: int | np.ndarray):
    """Role of a position in the bidir_motif layout (period 4).

    0: successor of the previous token, 1: determined by positions t-2 and
    t+2, 2: fresh uniform draw, 3: successor of the previous token.
    """
    return np.asarray(position) % BIDIR_PERIOD


def _markov3_record(rng: np.random.Generator, length: int, table: np.ndarray) -> np.ndarray:
    burn = 16
    total = length + burn
    out = np.empty(total, dtype=np.int64)
    out[:3] = rng.integers(0, 4, size=3)
    cum = np.cumsum(table, axis=-1)
    u = rng.random(total)
    for t in range(3, total):
        out[t] = int(np.searchsorted(cum[out[t - 3], out[t - 2], out[t - 1]], u[t], side="right"))
    return np.minimum(out[burn:], 3)


def _bidir_record(rng: np.random.Generator, length: int) -> np.ndarray:
    n = length + 4
    x = np.empty(n, dtype=np.int64)
    fresh = rng.integers(0, 4, size=n)
    follow = rng.random(n) < BIDIR_STEP_PROB
    other = rng.integers(0, 4, size=n)
    role = bidir_role(np.arange(n))
    for t in range(n):
        if role[t] == 2 or t == 0:
            x[t] = fresh[t]
        elif role[t] in (0, 3):
            x[t] = (x[t - 1] + 1) % 4 if follow[t] else other[t]
    lut = bidir_lookup()
    for t in np.flatnonzero(role == 1):
        left = x[t - 2] if t >= 2 else fresh[t]
        right = x[t + 2] if t + 2 < n else fresh[t]
        x[t] = lut[left, right]
    return x[:length]


def synth_corpus(kind: str, seed: int, size: int, length: int = 1024) -> list[tuple[str, str]]:
    """Synthetic nucleotide records for desk-scale experiments.

    ``size`` is the number of records, each ``length`` bases long.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    records = []
    if kind == "markov3":
        table = markov3_table()
        for r in range(size):
            ids = _markov3_record(rng, length, table)
            records.append((f"markov3_{seed}_{r}", detokenize(ids)))
    elif kind == "planted_motif":
        for r in range(size):
            ids = rng.integers(0, 4, size=length)
            n_sites = max(1, length // 64)
            for start in rng.choice(max(1, length - 4), size=n_sites, replace=False):
                motif = np.array([G, A, T, A]) if rng.random() < 0.5 else np.array([T, A, T, C])
                ids[start : start + 4] = motif[: len(ids[start : start + 4])]
            records.append((f"planted_{seed}_{r}", detokenize(ids)))
    elif kind == "bidir_motif":
        for r in range(size):
            records.append((f"bidir_{seed}_{r}", detokenize(_bidir_record(rng, length))))
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    return records


def determined_positions(length: int) -> np.ndarray:
    """Positions of a bidir_motif window (starting at a record offset that is a
    multiple of 4) whose token is fixed by both neighbours two steps away."""
    t = np.arange(2, length - 2)
    return t[bidir_role(t) == 1]


def markov3_stationary() -> np.ndarray:
    """Stationary distribution over (a, b, c) triples of the markov3 chain."""
    table = markov3_table()
    trans = np.zeros((64, 64))
    for a, b, c, d in itertools.product(range(4), repeat=4):
        trans[a * 16 + b * 4 + c, b * 16 + c * 4 + d] = table[a, b, c, d]
    vals, vecs = np.linalg.eig(trans.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, k])
    pi = pi / pi.sum()
    return pi.reshape(4, 4, 4)


def _window_joint(length: int) -> np.ndarray:
    table = markov3_table()
    joint = markov3_stationary()
    for _ in range(3, length):
        joint = _extend(joint, table)
    return joint


def _extend(joint: np.ndarray, table: np.ndarray) -> np.ndarray:
    # joint over (..., a, b, c) times P(d | a, b, c)
    lead = joint.ndim - 3
    return joint[..., None] * table.reshape((1,) * lead + table.shape)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def markov3_conditional_entropy(length: int, target: int) -> float:
    """Exact H(x_target | all other tokens of a stationary markov3 window)."""
    lo, hi = max(0, target - 3), min(length - 1, target + 3)
    span = hi - lo + 1
    if span < 3:
        raise ValueError("window too short for the markov3 entropy oracle")
    joint = _window_joint(span)
    k = target - lo
    return _entropy(joint) - _entropy(joint.sum(axis=k))


def markov3_left_entropy() -> float:
    """H(next | previous three) under stationarity."""
    pi = markov3_stationary()
    table = markov3_table()
    h = -(table * np.log(table)).sum(axis=-1)
    return float((pi * h).sum())


def markov3_bayes_next(prefix: Sequence[int]) -> int:
    """Most probable next token given a prefix (order-3 context)."""
    table = markov3_table()
    a, b, c = prefix[-3:]
    return int(np.argmax(table[a, b, c]))
