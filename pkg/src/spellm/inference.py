"""Decode policies: direct emission, AutoCorrect and entropy fallback."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .heads import HeadStack, decode_argmax, forward_chars, forward_token, head_entropies
from .numcore import softmax
from .vocab import TokenVocab, is_valid_token, unspell

DEFAULT_THRESHOLD = 0.22  # nats

DIRECT = "direct"
AUTOCORRECT = "autocorrect"
AUTOCORRECT_EMPTY = "autocorrect_empty"
FALLBACK = "fallback"
RAW = "raw"  # AutoCorrect disabled and the argmax string is not a token
PATHS = (DIRECT, AUTOCORRECT, AUTOCORRECT_EMPTY, FALLBACK, RAW)


@dataclass(frozen=True, eq=False)
class DecodeOutcome:
    """Result of decoding one position.

    ``raw`` is the per-head argmax; ``output`` is the spelling that was
    emitted (the chosen token's spelling when a token was picked).
    """

    raw: np.ndarray
    output: np.ndarray
    path: str
    token_id: int | None
    text: str
    mean_entropy: float
    candidate_count: int = 0

    def to_dict(self) -> dict:
        return {"raw": self.raw.tolist(), "output": self.output.tolist(), "path": self.path,
                "token_id": self.token_id, "text": self.text, "mean_entropy": self.mean_entropy,
                "candidate_count": self.candidate_count}


def top3_table(char_logits, n: int = 3) -> np.ndarray:
    """``(k, min(n, s))`` indices of the largest logits per head; ties by lowest index."""
    cl = np.asarray(char_logits)
    return np.argsort(-cl, axis=-1, kind="stable")[:, :min(n, cl.shape[-1])]


def autocorrect_candidates(t3: np.ndarray, tv: TokenVocab) -> np.ndarray:
    """Token ids whose every spelling position (PAD included) is in that position's top set."""
    k = tv.k
    allowed = np.zeros((k, tv.cv.size), dtype=bool)
    allowed[np.arange(k)[:, None], t3] = True
    ok = allowed[np.arange(k)[None, :], tv.spellings].all(axis=1)
    return np.flatnonzero(ok)


def best_by_score(ids: Sequence[int], h, stack: HeadStack) -> int:
    """Highest token-head score among ``ids``; ties go to the lowest id."""
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    scores = stack.token_head[ids] @ np.asarray(h, dtype=np.float64)
    if stack.has_bias:
        scores = scores + stack.token_bias[ids]
    return int(ids[int(np.argmax(softmax(scores)))])


def _direct_or_none(h, raw, stack, tv, mean_ent) -> DecodeOutcome | None:
    valid, ids = is_valid_token(raw, tv)
    if not valid:
        return None
    tid = ids[0] if len(ids) == 1 else best_by_score(ids, h, stack)
    return DecodeOutcome(raw, raw, DIRECT, tid, unspell(raw, tv.cv), mean_ent)


def autocorrect(h, char_logits, stack: HeadStack, tv: TokenVocab) -> DecodeOutcome:
    raw = decode_argmax(char_logits)
    _, mean_ent = head_entropies(char_logits)
    out = _direct_or_none(h, raw, stack, tv, mean_ent)
    if out is not None:
        return out
    cands = autocorrect_candidates(top3_table(char_logits), tv)
    if cands.size == 0:
        return DecodeOutcome(raw, raw, AUTOCORRECT_EMPTY, None, unspell(raw, tv.cv), mean_ent, 0)
    tid = best_by_score(cands, h, stack)
    return DecodeOutcome(raw, tv.spellings[tid].copy(), AUTOCORRECT, tid, tv.texts[tid], mean_ent, int(cands.size))


def decode_raw(h, char_logits, stack: HeadStack, tv: TokenVocab) -> DecodeOutcome:
    """Plain argmax decoding with no repair."""
    raw = decode_argmax(char_logits)
    _, mean_ent = head_entropies(char_logits)
    out = _direct_or_none(h, raw, stack, tv, mean_ent)
    if out is not None:
        return out
    return DecodeOutcome(raw, raw, RAW, None, unspell(raw, tv.cv), mean_ent)


def decode_with_fallback(h, char_logits, stack: HeadStack, tv: TokenVocab,
                         threshold: float | None = DEFAULT_THRESHOLD,
                         autocorrect_on: bool = True) -> DecodeOutcome:
    """Route to the full token head when mean head entropy exceeds ``threshold``.

    ``threshold=None`` disables the fallback gate.
    """
    if threshold is not None and threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    _, mean_ent = head_entropies(char_logits)
    if threshold is not None and mean_ent > threshold:
        raw = decode_argmax(char_logits)
        tid = int(np.argmax(forward_token(stack, h)))
        return DecodeOutcome(raw, tv.spellings[tid].copy(), FALLBACK, tid, tv.texts[tid], mean_ent)
    if autocorrect_on:
        return autocorrect(h, char_logits, stack, tv)
    return decode_raw(h, char_logits, stack, tv)


def decode(h, stack: HeadStack, tv: TokenVocab, threshold: float | None = DEFAULT_THRESHOLD,
           autocorrect_on: bool = True) -> DecodeOutcome:
    return decode_with_fallback(h, forward_chars(stack, h), stack, tv, threshold, autocorrect_on)
