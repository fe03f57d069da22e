"""The student: ``k`` character heads plus the auxiliary token head."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import ContractError, SeededRng, entropy, matvec, softmax
from .vocab import CharVocab

CKPT_FORMAT = "spellm-ckpt-v1"


class CheckpointError(ValueError):
    pass


class MaddCounter:
    """Tally of multiply-adds executed by instrumented forward passes."""

    def __init__(self):
        self.total = 0

    def matvec(self, m: np.ndarray, v: np.ndarray) -> np.ndarray:
        if m.ndim != 2 or v.shape != (m.shape[1],):
            raise ContractError(f"dimension mismatch: {m.shape} @ {v.shape}")
        self.total += m.shape[0] * m.shape[1]
        return m @ v


@dataclass
class HeadStack:
    """``char_heads`` is ``(k, s, d)``, ``token_head`` is ``(S, d)``.

    Biases are only present when the stack was built with ``bias=True``.
    """

    char_heads: np.ndarray
    token_head: np.ndarray
    charset: tuple[str, ...]
    seed: int = 0
    char_bias: np.ndarray | None = None
    token_bias: np.ndarray | None = None

    def __post_init__(self):
        self.char_heads = np.asarray(self.char_heads, dtype=np.float64)
        self.token_head = np.asarray(self.token_head, dtype=np.float64)
        if self.char_heads.ndim != 3 or self.token_head.ndim != 2:
            raise ContractError("char_heads must be (k, s, d) and token_head (S, d)")
        if self.char_heads.shape[2] != self.token_head.shape[1]:
            raise ContractError(
                f"hidden width mismatch: char heads d={self.char_heads.shape[2]}, "
                f"token head d={self.token_head.shape[1]}")
        if self.char_heads.shape[1] != len(self.charset):
            raise ContractError(f"char heads have s={self.char_heads.shape[1]} rows, charset has {len(self.charset)}")
        if (self.char_bias is None) != (self.token_bias is None):
            raise ContractError("either both or neither of the bias vectors must be set")
        if self.char_bias is not None:
            self.char_bias = np.asarray(self.char_bias, dtype=np.float64)
            self.token_bias = np.asarray(self.token_bias, dtype=np.float64)
            if self.char_bias.shape != (self.k, self.s) or self.token_bias.shape != (self.S,):
                raise ContractError("bias shapes do not match the head shapes")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ContractError("head weights contain non-finite entries")

    @property
    def k(self) -> int:
        return self.char_heads.shape[0]

    @property
    def s(self) -> int:
        return self.char_heads.shape[1]

    @property
    def d(self) -> int:
        return self.char_heads.shape[2]

    @property
    def S(self) -> int:
        return self.token_head.shape[0]

    @property
    def has_bias(self) -> bool:
        return self.char_bias is not None

    def arrays(self) -> list[np.ndarray]:
        out = [self.char_heads, self.token_head]
        if self.has_bias:
            out += [self.char_bias, self.token_bias]
        return out

    def copy(self) -> "HeadStack":
        return HeadStack(self.char_heads.copy(), self.token_head.copy(), self.charset, self.seed,
                         None if self.char_bias is None else self.char_bias.copy(),
                         None if self.token_bias is None else self.token_bias.copy())

    @classmethod
    def init(cls, k: int, cv: CharVocab, S: int, d: int, seed: int, bias: bool = False) -> "HeadStack":
        """Uniform init in [-1/sqrt(d), 1/sqrt(d)]; biases start at zero."""
        rng = SeededRng(seed)
        bound = 1.0 / math.sqrt(d)
        char_heads = rng.uniform(-bound, bound, (k, cv.size, d))
        token_head = rng.uniform(-bound, bound, (S, d))
        cb = np.zeros((k, cv.size)) if bias else None
        tb = np.zeros(S) if bias else None
        return cls(char_heads, token_head, cv.symbols, seed, cb, tb)


def forward_chars(stack: HeadStack, h, counter: MaddCounter | None = None) -> np.ndarray:
    """Per-head character logits, shape ``(k, s)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (stack.d,):
        raise ContractError(f"hidden state has shape {h.shape}, heads expect ({stack.d},)")
    if counter is not None:
        out = np.stack([counter.matvec(W, h) for W in stack.char_heads])
    else:
        out = stack.char_heads @ h
    if stack.has_bias:
        out = out + stack.char_bias
    return out


def forward_token(stack: HeadStack, h, counter: MaddCounter | None = None) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (stack.d,):
        raise ContractError(f"hidden state has shape {h.shape}, heads expect ({stack.d},)")
    out = counter.matvec(stack.token_head, h) if counter is not None else matvec(stack.token_head, h)
    if stack.has_bias:
        out = out + stack.token_bias
    return out


def decode_argmax(char_logits) -> np.ndarray:
    """Per-head argmax; ``np.argmax`` returns the lowest index on ties."""
    return np.asarray(char_logits).argmax(axis=-1).astype(np.int64)


def head_entropies(char_logits) -> tuple[np.ndarray, float]:
    per_head = entropy(softmax(char_logits, axis=-1), axis=-1)
    per_head = np.atleast_1d(per_head)
    return per_head, float(per_head.mean())


def _fmt(a: np.ndarray) -> str:
    return "[" + ",".join("%.17g" % x for x in a.ravel().tolist()) + "]"


def save_checkpoint(path, stack: HeadStack) -> None:
    header = {"format": CKPT_FORMAT, "k": stack.k, "s": stack.s, "S": stack.S, "d": stack.d,
              "charset": list(stack.charset), "seed": stack.seed, "bias": stack.has_bias}
    parts = [json.dumps(header, ensure_ascii=False)[:-1],
             ',"char_heads":' + _fmt(stack.char_heads),
             ',"token_head":' + _fmt(stack.token_head)]
    if stack.has_bias:
        parts += [',"char_bias":' + _fmt(stack.char_bias), ',"token_bias":' + _fmt(stack.token_bias)]
    parts.append("}\n")
    Path(path).write_text("".join(parts), encoding="utf-8")


def load_checkpoint(path) -> HeadStack:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON: {exc}") from None
    if obj.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: format {obj.get('format')!r}, expected {CKPT_FORMAT!r}")
    k, s, S, d = (int(obj[x]) for x in ("k", "s", "S", "d"))
    try:
        char_heads = np.array(obj["char_heads"], dtype=np.float64).reshape(k, s, d)
        token_head = np.array(obj["token_head"], dtype=np.float64).reshape(S, d)
        cb = tb = None
        if obj.get("bias"):
            cb = np.array(obj["char_bias"], dtype=np.float64).reshape(k, s)
            tb = np.array(obj["token_bias"], dtype=np.float64).reshape(S)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: weight arrays inconsistent with header: {exc}") from None
    return HeadStack(char_heads, token_head, tuple(obj["charset"]), int(obj.get("seed", 0)), cb, tb)
