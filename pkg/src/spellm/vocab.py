"""Character alphabet, token table and the spelling conventions.

Every token is spelled as exactly ``k`` character indices: normalized,
truncated to ``k`` and right-padded with PAD.
"""

from __future__ import annotations

import hashlib
import json
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import SeededRng

PAD = 0
UNK = 1
PAD_SYMBOL = "<pad>"
UNK_SYMBOL = "<unk>"
UNK_CHAR = "�"  # rendering of UNK in normalized/unspelled strings

VOCAB_FORMAT = "spellm-vocab-v1"


class VocabFormatError(ValueError):
    pass


def default_charset() -> list[str]:
    """PAD, UNK, space, ASCII punctuation, digits, a-z, A-Z (97 symbols)."""
    return [PAD_SYMBOL, UNK_SYMBOL, " ", *string.punctuation, *string.digits,
            *string.ascii_lowercase, *string.ascii_uppercase]


@dataclass(frozen=True)
class CharVocab:
    symbols: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        syms = tuple(self.symbols)
        if len(syms) < 2 or syms[PAD] != PAD_SYMBOL or syms[UNK] != UNK_SYMBOL:
            raise VocabFormatError(f"charset must start with {PAD_SYMBOL!r}, {UNK_SYMBOL!r}")
        if len(set(syms)) != len(syms):
            raise VocabFormatError("charset contains duplicate symbols")
        for sym in syms[2:]:
            if len(sym) != 1 or sym == UNK_CHAR:
                raise VocabFormatError(f"charset symbol {sym!r} is not a single ordinary character")
        object.__setattr__(self, "symbols", syms)
        object.__setattr__(self, "index", {c: i for i, c in enumerate(syms) if i > UNK})

    @classmethod
    def default(cls) -> "CharVocab":
        return cls(tuple(default_charset()))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self.index

    def render(self, i: int) -> str:
        if i == PAD:
            return ""
        if i == UNK:
            return UNK_CHAR
        return self.symbols[i]


def normalize(raw: str, cv: CharVocab | None = None) -> str:
    """Strip diacritics and replace out-of-alphabet characters by ``UNK_CHAR``.

    Each base character of ``raw`` yields exactly one output character;
    free-standing combining marks are dropped.
    """
    cv = cv or _DEFAULT_CV
    out = []
    for ch in raw:
        if ch in cv:
            out.append(ch)
            continue
        if unicodedata.combining(ch):
            continue
        base = [c for c in unicodedata.normalize("NFD", ch) if not unicodedata.combining(c)]
        out.append(base[0] if len(base) == 1 and base[0] in cv else UNK_CHAR)
    return "".join(out)


def spell(raw: str, k: int, cv: CharVocab | None = None) -> np.ndarray:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cv = cv or _DEFAULT_CV
    norm = normalize(raw, cv)[:k]
    out = np.full(k, PAD, dtype=np.int64)
    for i, ch in enumerate(norm):
        out[i] = cv.index.get(ch, UNK)
    return out


def is_pad_closed(chars: Sequence[int]) -> bool:
    """True when every position after the first PAD is PAD too."""
    a = np.asarray(chars)
    pads = np.flatnonzero(a == PAD)
    return pads.size == 0 or bool(np.all(a[pads[0]:] == PAD))


def unspell(chars: Sequence[int], cv: CharVocab | None = None) -> str:
    cv = cv or _DEFAULT_CV
    out = []
    for c in chars:
        c = int(c)
        if c == PAD:
            break
        out.append(cv.render(c))
    return "".join(out)


_DEFAULT_CV = CharVocab.default()


class TokenVocab:
    """Token table with derived ``k``-padded spellings.

    ``spellings`` is an ``(S, k)`` int array; ``lengths`` holds the
    normalized (untruncated) length of every token.
    """

    def __init__(self, raws: Sequence[str], k: int, cv: CharVocab | None = None):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.cv = cv or CharVocab.default()
        self.k = int(k)
        self.raws = tuple(raws)
        self.texts = tuple(normalize(r, self.cv) for r in self.raws)
        self.lengths = np.array([len(t) for t in self.texts], dtype=np.int64)
        self.spellings = np.stack([spell(t, self.k, self.cv) for t in self.texts]) if self.raws \
            else np.zeros((0, self.k), dtype=np.int64)
        self.spellings.setflags(write=False)
        self._by_spelling: dict[bytes, list[int]] = {}
        for tid, row in enumerate(self.spellings):
            self._by_spelling.setdefault(row.tobytes(), []).append(tid)
        self.sha256 = vocab_sha256(self.cv, self.raws)

    @property
    def S(self) -> int:
        return len(self.raws)

    def __len__(self) -> int:
        return self.S

    def with_k(self, k: int) -> "TokenVocab":
        return TokenVocab(self.raws, k, self.cv)

    def spelling(self, token_id: int) -> np.ndarray:
        return self.spellings[token_id]

    def ids_for(self, chars: Sequence[int]) -> list[int]:
        key = np.asarray(chars, dtype=np.int64).tobytes()
        return list(self._by_spelling.get(key, ()))


def vocab_sha256(cv: CharVocab, raws: Iterable[str]) -> str:
    """Content hash over charset and token strings (independent of ``k``)."""
    payload = json.dumps({"charset": list(cv.symbols), "tokens": list(raws)},
                         ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def is_valid_token(chars: Sequence[int], tv: TokenVocab) -> tuple[bool, list[int]]:
    if len(chars) != tv.k:
        raise ValueError(f"spelling has length {len(chars)}, vocab k is {tv.k}")
    ids = tv.ids_for(chars)
    return bool(ids), ids


@dataclass(frozen=True)
class CoverageReport:
    n_tokens: int
    representable: float
    truncated: float
    contains_unk: float

    def to_dict(self) -> dict:
        return dict(n_tokens=self.n_tokens, representable=self.representable,
                    truncated=self.truncated, contains_unk=self.contains_unk)


def coverage_report(tv: TokenVocab) -> CoverageReport:
    n = tv.S
    if n == 0:
        return CoverageReport(0, 0.0, 0.0, 0.0)
    has_unk = np.array([UNK_CHAR in t for t in tv.texts])
    long = tv.lengths > tv.k
    ok = ~has_unk & ~long
    return CoverageReport(n, float(ok.mean()), float(long.mean()), float(has_unk.mean()))


def write_vocab(path, tv: TokenVocab) -> None:
    path = Path(path)
    header = {"format": VOCAB_FORMAT, "k": tv.k, "charset": list(tv.cv.symbols)}
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for tid, raw in enumerate(tv.raws):
            f.write(json.dumps({"id": tid, "raw": raw}, ensure_ascii=False) + "\n")


def read_vocab(path, k: int | None = None) -> TokenVocab:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"vocab file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln.strip()]
    if not lines:
        raise VocabFormatError(f"{path}: empty vocab file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise VocabFormatError(f"{path}:1: bad header: {exc}") from None
    if header.get("format") != VOCAB_FORMAT:
        raise VocabFormatError(f"{path}: format {header.get('format')!r}, expected {VOCAB_FORMAT!r}")
    cv = CharVocab(tuple(header["charset"]))
    raws = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(ln)
            tid, raw = int(obj["id"]), obj["raw"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise VocabFormatError(f"{path}:{lineno}: bad token line: {exc}") from None
        if tid != len(raws):
            raise VocabFormatError(f"{path}:{lineno}: token id {tid} out of order, expected {len(raws)}")
        raws.append(raw)
    return TokenVocab(raws, int(k if k is not None else header["k"]), cv)


# Frequency-weighted BPE shape: almost all mass on 1..6 characters and a
# thin tail out to 12 so truncation still occurs for small k.
_LENGTH_WEIGHTS = np.array([5, 12, 18, 20, 18, 14, 0.8, 0.4, 0.3, 0.2, 0.2, 0.1], dtype=np.float64)


def make_synthetic_vocab(S: int, k: int, seed: int, cv: CharVocab | None = None) -> TokenVocab:
    """Distinct BPE-looking tokens: word pieces with optional leading space
    and capitalization, plus some punctuation and digit tokens.
    """
    cv = cv or CharVocab.default()
    rng = SeededRng(seed)
    lengths = np.arange(1, len(_LENGTH_WEIGHTS) + 1)
    probs = _LENGTH_WEIGHTS / _LENGTH_WEIGHTS.sum()
    lower = np.array(list(string.ascii_lowercase))
    seen: set[str] = set()
    raws: list[str] = []
    singles = list(string.punctuation[:8]) + list(string.digits[:4])
    for ch in singles[: max(0, min(len(singles), S // 16))]:
        seen.add(ch)
        raws.append(ch)
    while len(raws) < S:
        n = int(rng.choice(lengths, p=probs))
        u = rng.uniform(0, 1, 3)
        if u[0] < 0.05:
            tok = "".join(rng.choice(list(string.digits), n))
        else:
            tok = "".join(rng.choice(lower, n))
            if u[1] < 0.15:
                tok = tok[0].upper() + tok[1:]
            if u[2] < 0.45 and n > 1:
                tok = " " + tok[1:]
        if tok in seen:
            continue
        seen.add(tok)
        raws.append(tok)
    return TokenVocab(raws, k, cv)
