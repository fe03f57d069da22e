"""Teacher traces: frozen hidden states with the teacher's top-5 tokens.

The synthetic teacher stands in for a real LM.  In ``separable`` mode each
token gets an embedding built from random per-(position, character) code
vectors plus a token-specific component, so the spelling of a token is
linearly readable from its hidden state, the way it is from an LM's final
hidden state.  Hidden states are rescaled to a fixed per-coordinate RMS
(``hidden_rms``) like post-norm LM activations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numcore import entropy, softmax
from .vocab import TokenVocab, spell

TRACE_FORMAT = "spellm-trace-v1"
TOP_N = 5
# Separable mode requires noise_sigma < MAX_NOISE_FRACTION * hidden_rms.  At
# that bound the noise projected on any embedding difference stays an order
# of magnitude below the smallest embedding distance.
MAX_NOISE_FRACTION = 0.125
# Pairwise embedding cosines must stay below this.
MAX_EMBEDDING_COSINE = 0.999
_TOKEN_COMPONENT = 0.5


class TraceError(ValueError):
    pass


class TraceFormatError(TraceError):
    pass


class TraceVocabMismatch(TraceError):
    pass


class TraceTruncatedError(TraceError):
    pass


class TraceCorruptError(TraceError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class TeacherTraceRecord:
    hidden: np.ndarray
    top5: tuple[tuple[int, float], ...]

    def __post_init__(self):
        h = np.asarray(self.hidden, dtype=np.float64)
        object.__setattr__(self, "hidden", h)
        top = tuple((int(i), float(p)) for i, p in self.top5)
        object.__setattr__(self, "top5", top)
        if h.ndim != 1 or not np.all(np.isfinite(h)):
            raise ValueError("hidden must be a finite 1-d array")
        if len(top) != TOP_N:
            raise ValueError(f"top5 must have {TOP_N} entries, got {len(top)}")
        if len({i for i, _ in top}) != TOP_N:
            raise ValueError("top5 token ids must be distinct")
        for (i0, p0), (i1, p1) in zip(top, top[1:]):
            if p1 > p0 or (p1 == p0 and i1 < i0):
                raise ValueError("top5 must be in descending probability order (ties by ascending id)")
        for _, p in top:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"top5 probability {p} outside (0, 1]")
        if sum(p for _, p in top) > 1.0 + 1e-9:
            raise ValueError("top5 probabilities sum to more than 1")

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.top5]

    @property
    def probs(self) -> list[float]:
        return [p for _, p in self.top5]

    def __eq__(self, other):
        if not isinstance(other, TeacherTraceRecord):
            return NotImplemented
        return self.top5 == other.top5 and np.array_equal(self.hidden, other.hidden)


@dataclass
class Trace:
    d: int
    vocab_sha256: str
    records: list[TeacherTraceRecord]

    def __len__(self) -> int:
        return len(self.records)

    def hidden_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.d))
        return np.stack([r.hidden for r in self.records])


def top_n(probs: np.ndarray, n: int = TOP_N) -> tuple[tuple[int, float], ...]:
    """Highest-probability ids, descending, ties by ascending id."""
    ids = np.arange(len(probs))
    order = np.lexsort((ids, -probs))[:n]
    return tuple((int(i), float(probs[i])) for i in order)


@dataclass(frozen=True)
class SyntheticTeacherSpec:
    mode: str = "separable"
    d: int = 64
    S: int = 512
    noise_sigma: float = 0.05
    seed: int = 0
    hidden_rms: float = 8.0
    temperature: float = 40.0

    def validate(self) -> None:
        if self.mode not in ("separable", "linear"):
            raise ValueError(f"unknown teacher mode {self.mode!r}")
        if self.d < 1 or self.S < TOP_N:
            raise ValueError(f"need d >= 1 and S >= {TOP_N}, got d={self.d}, S={self.S}")
        if self.noise_sigma < 0 or self.hidden_rms <= 0 or self.temperature <= 0:
            raise ValueError("noise_sigma must be >= 0; hidden_rms and temperature > 0")
        if self.mode == "separable" and self.noise_sigma >= MAX_NOISE_FRACTION * self.hidden_rms:
            raise ValueError(
                f"separable mode needs noise_sigma < {MAX_NOISE_FRACTION} * hidden_rms "
                f"= {MAX_NOISE_FRACTION * self.hidden_rms}, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


class SyntheticTeacher:
    """Fixed teacher world (embeddings, output matrix) for one spec + vocab."""

    def __init__(self, spec: SyntheticTeacherSpec, tv: TokenVocab):
        spec.validate()
        if spec.S != tv.S:
            raise ValueError(f"teacher S={spec.S} does not match vocab S={tv.S}")
        self.spec = spec
        self.tv = tv
        world = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(0,))))
        d = spec.d
        if spec.mode == "separable":
            n_pos = int(max(1, min(16, tv.lengths.max(initial=1))))
            codes = world.standard_normal((n_pos, tv.cv.size, d))
            codes /= np.linalg.norm(codes, axis=-1, keepdims=True)
            own = world.standard_normal((tv.S, d))
            own /= np.linalg.norm(own, axis=-1, keepdims=True)
            emb = np.empty((tv.S, d))
            for t, text in enumerate(tv.texts):
                chars = spell(text, n_pos, tv.cv)
                emb[t] = codes[np.arange(n_pos), chars].sum(axis=0) + _TOKEN_COMPONENT * own[t]
            emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
            gram = emb @ emb.T
            np.fill_diagonal(gram, -1.0)
            self.max_cosine = float(gram.max()) if tv.S > 1 else 0.0
            if self.max_cosine >= MAX_EMBEDDING_COSINE:
                raise ValueError(f"embeddings too close (max cosine {self.max_cosine:.4f})")
            self.embeddings = emb * spec.hidden_rms * math.sqrt(d)
            self.teacher_matrix = emb * (spec.temperature / (spec.hidden_rms * math.sqrt(d)))
        else:
            self.max_cosine = float("nan")
            self.embeddings = None
            self.teacher_matrix = world.standard_normal((tv.S, d)) * (3.0 / math.sqrt(d))

    def sample(self, n: int, stream: int = 0) -> tuple[list[TeacherTraceRecord], np.ndarray]:
        """Draw ``n`` records; also returns the planted token per record
        (``-1`` in linear mode, where nothing is planted)."""
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        spec = self.spec
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(stream + 1,))))
        if spec.mode == "separable":
            planted = rng.integers(0, spec.S, n)
            hidden = self.embeddings[planted] + rng.normal(0.0, spec.noise_sigma, (n, spec.d))
        else:
            planted = np.full(n, -1, dtype=np.int64)
            hidden = rng.standard_normal((n, spec.d))
        hidden = _as_f32(hidden)
        if n == 0:
            return [], planted
        probs = softmax(hidden @ self.teacher_matrix.T, axis=-1)
        records = [TeacherTraceRecord(hidden[i], top_n(probs[i])) for i in range(n)]
        return records, planted


def gen_synthetic_trace(spec: SyntheticTeacherSpec, n: int, tv: TokenVocab, stream: int = 0) -> Trace:
    records, _ = SyntheticTeacher(spec, tv).sample(n, stream)
    return Trace(spec.d, tv.sha256, records)


def teacher_entropy(rec: TeacherTraceRecord, renormalize: bool = True) -> float:
    """Entropy of the top-5 probabilities; renormalized to sum 1 by default."""
    p = np.array(rec.probs)
    if renormalize:
        p = p / p.sum()
    return float(entropy(p))


def _record_line(rec: TeacherTraceRecord) -> str:
    h = ",".join(map(repr, _as_f32(rec.hidden).tolist()))
    top = ",".join(f"[{i},{p!r}]" for i, p in rec.top5)
    return f'{{"h":[{h}],"top5":[{top}]}}\n'


def write_trace(path, records: Sequence[TeacherTraceRecord], d: int, vocab_sha: str) -> None:
    """Write a trace; hidden states are stored at float32 precision."""
    path = Path(path)
    for i, rec in enumerate(records):
        if rec.hidden.shape != (d,):
            raise ValueError(f"record {i} has hidden width {rec.hidden.shape}, header says d={d}")
    header = {"format": TRACE_FORMAT, "d": int(d), "vocab_sha256": vocab_sha, "count": len(records)}
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header) + "\n")
        for rec in records:
            f.write(_record_line(rec))


def _parse_header(path, line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}:1: unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        got = header.get("format") if isinstance(header, dict) else header
        raise TraceFormatError(f"{path}: format {got!r}, expected {TRACE_FORMAT!r}")
    for key in ("d", "vocab_sha256", "count"):
        if key not in header:
            raise TraceFormatError(f"{path}:1: header missing {key!r}")
    return header


def iter_trace(path, expected_vocab_sha: str | None = None) -> Iterator[TeacherTraceRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        first = f.readline()
        if not first:
            raise TraceTruncatedError(f"{path}: empty file, no header")
        header = _parse_header(path, first)
        if expected_vocab_sha is not None and header["vocab_sha256"] != expected_vocab_sha:
            raise TraceVocabMismatch(
                f"{path}: trace built for vocab {header['vocab_sha256'][:12]}, "
                f"got vocab {expected_vocab_sha[:12]}")
        d, count = int(header["d"]), int(header["count"])
        seen = 0
        for lineno, line in enumerate(f, start=2):
            if not line.endswith("\n"):
                raise TraceTruncatedError(f"{path}:{lineno}: last line is incomplete")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = TeacherTraceRecord(np.array(obj["h"], dtype=np.float64),
                                         tuple((pair[0], pair[1]) for pair in obj["top5"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise TraceCorruptError(path, lineno, f"bad record: {exc}") from None
            if rec.hidden.shape != (d,):
                raise TraceCorruptError(path, lineno, f"hidden width {rec.hidden.shape[0]}, header says {d}")
            seen += 1
            if seen > count:
                raise TraceCorruptError(path, lineno, f"more records than header count {count}")
            yield rec
        if seen < count:
            raise TraceTruncatedError(f"{path}: header promises {count} records, found {seen}")


def read_trace(path, expected_vocab_sha: str | None = None) -> Trace:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        first = f.readline()
    if not first:
        raise TraceTruncatedError(f"{path}: empty file, no header")
    header = _parse_header(path, first)
    records = list(iter_trace(path, expected_vocab_sha))
    return Trace(int(header["d"]), header["vocab_sha256"], records)


def trace_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

