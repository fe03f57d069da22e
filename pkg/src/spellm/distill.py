"""Self-distillation of the head stack from teacher traces."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .heads import HeadStack
from .numcore import ContractError, log_softmax
from .teacher import Trace, TraceVocabMismatch
from .vocab import TokenVocab

log = logging.getLogger(__name__)

LABEL_RULES = ("similar_top3", "min_loss_top5")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 1
    epochs: int = 3
    label_rule: str = "similar_top3"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    renormalize_token_target: bool = False
    restrict_token_loss: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.label_rule not in LABEL_RULES:
            raise ValueError(f"label_rule must be one of {LABEL_RULES}, got {self.label_rule!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass(frozen=True)
class LossBreakdown:
    char_loss: float
    token_loss: float
    total: float = field(default=float("nan"))

    def __post_init__(self):
        object.__setattr__(self, "char_loss", float(self.char_loss))
        object.__setattr__(self, "token_loss", float(self.token_loss))
        object.__setattr__(self, "total", self.char_loss + self.token_loss)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    losses: LossBreakdown
    wall_ms: float

    def record(self) -> dict:
        return {"epoch": self.epoch, "char_loss": self.losses.char_loss,
                "token_loss": self.losses.token_loss, "total": self.losses.total}


# -- label selection ---------------------------------------------------------

def _pick(scores: np.ndarray, probs: np.ndarray, ids: np.ndarray) -> int:
    """Index of the best candidate: highest score, then highest p, then lowest id."""
    return int(np.lexsort((ids, -probs, -scores))[0])


def select_similar(char_argmax, candidates: Sequence[tuple[int, float]], tv: TokenVocab) -> tuple[int, np.ndarray]:
    """Candidate whose spelling agrees with ``char_argmax`` at the most positions."""
    if not candidates:
        raise ValueError("no candidates to select from")
    ids = np.array([c[0] for c in candidates], dtype=np.int64)
    probs = np.array([c[1] for c in candidates], dtype=np.float64)
    spells = tv.spellings[ids]
    matches = (spells == np.asarray(char_argmax)[None, :]).sum(axis=1)
    j = _pick(matches.astype(np.float64), probs, ids)
    return int(ids[j]), spells[j]


def select_min_loss(char_logits, candidates: Sequence[tuple[int, float]], tv: TokenVocab) -> tuple[int, np.ndarray]:
    """Candidate with the lowest character loss."""
    if not candidates:
        raise ValueError("no candidates to select from")
    ids = np.array([c[0] for c in candidates], dtype=np.int64)
    probs = np.array([c[1] for c in candidates], dtype=np.float64)
    spells = tv.spellings[ids]
    lp = log_softmax(char_logits, axis=-1)
    k = lp.shape[0]
    losses = -lp[np.arange(k)[None, :], spells].sum(axis=1)
    j = _pick(-losses, probs, ids)
    return int(ids[j]), spells[j]


# -- losses ------------------------------------------------------------------

def char_loss(char_logits, target) -> tuple[float, np.ndarray]:
    """Summed per-head cross entropy against hard character labels.

    PAD is an ordinary label.  Returns the loss and its gradient with
    respect to the ``(k, s)`` logits.
    """
    cl = np.asarray(char_logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if cl.ndim != 2 or target.shape != (cl.shape[0],):
        raise ContractError(f"target length {target.shape} does not match {cl.shape[0]} heads")
    rows = np.arange(cl.shape[0])
    lp = log_softmax(cl, axis=-1)
    grad = np.exp(lp)
    grad[rows, target] -= 1.0
    return float(-lp[rows, target].sum()), grad


def token_target(top5: Sequence[tuple[int, float]], S: int, renormalize: bool = False) -> np.ndarray:
    ids = [i for i, _ in top5]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate token ids in top5: {ids}")
    q = np.zeros(S)
    for i, p in top5:
        q[i] = p
    if renormalize:
        q /= q.sum()
    return q


def token_loss(token_logits, top5: Sequence[tuple[int, float]], renormalize: bool = False,
               restrict: bool = False) -> tuple[float, np.ndarray]:
    """Cross entropy of the token head against the sparse top-5 target.

    The target is used unnormalized unless ``renormalize``; the gradient is
    ``sum(q) * softmax(logits) - q``.  With ``restrict`` the softmax runs over
    the five candidate logits only.
    """
    z = np.asarray(token_logits, dtype=np.float64)
    q = token_target(top5, z.shape[0], renormalize)
    if restrict:
        ids = np.array([i for i, _ in top5])
        lp = log_softmax(z[ids])
        qs = q[ids]
        grad = np.zeros_like(z)
        grad[ids] = qs.sum() * np.exp(lp) - qs
        return float(-(qs * lp).sum()), grad
    lp = log_softmax(z)
    grad = q.sum() * np.exp(lp) - q
    return float(-(q * lp).sum()), grad


# -- optimizer ---------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay over one flat parameter vector."""

    def __init__(self, params: np.ndarray, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self.t = 0
        self._buf = np.empty_like(params)

    def step(self, grad: np.ndarray) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        p, m, v, buf = self.params, self.m, self.v, self._buf
        p *= 1.0 - self.lr * self.weight_decay
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        np.multiply(grad, grad, out=buf)
        buf *= 1.0 - b2
        v += buf
        step = self.lr / (1.0 - b1 ** self.t)
        np.divide(v, 1.0 - b2 ** self.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(m, buf, out=buf)
        buf *= step
        p -= buf


class _FlatStack:
    """Head arrays as views into one contiguous parameter vector."""

    def __init__(self, stack: HeadStack):
        arrays = stack.arrays()
        self.shapes = [a.shape for a in arrays]
        sizes = [a.size for a in arrays]
        self.flat = np.concatenate([a.ravel() for a in arrays])
        self.grad = np.zeros_like(self.flat)
        self.views, self.grad_views = [], []
        off = 0
        for shape, n in zip(self.shapes, sizes):
            self.views.append(self.flat[off:off + n].reshape(shape))
            self.grad_views.append(self.grad[off:off + n].reshape(shape))
            off += n
        self.stack = HeadStack(self.views[0], self.views[1], stack.charset, stack.seed,
                               *(self.views[2:4] if stack.has_bias else (None, None)))
        assert np.shares_memory(self.stack.char_heads, self.flat)


def batch_loss_and_grad(stack: HeadStack, H: np.ndarray, top5s: Sequence, tv: TokenVocab,
                        cfg: TrainConfig, grads: list[np.ndarray] | None = None) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Mean loss over a batch and gradients for every head array."""
    B = H.shape[0]
    k = stack.k
    rows = np.arange(k)
    cl = np.einsum("ksd,bd->bks", stack.char_heads, H)
    tl = H @ stack.token_head.T
    if stack.has_bias:
        cl += stack.char_bias
        tl += stack.token_bias
    argmax = cl.argmax(axis=-1)
    g_char = np.empty_like(cl)
    g_tok = np.empty_like(tl)
    c_sum = t_sum = 0.0
    for b in range(B):
        top5 = top5s[b]
        if cfg.label_rule == "similar_top3":
            _, target = select_similar(argmax[b], top5[:3], tv)
        else:
            _, target = select_min_loss(cl[b], top5, tv)
        lp = log_softmax(cl[b], axis=-1)
        c_sum -= lp[rows, target].sum()
        g = np.exp(lp)
        g[rows, target] -= 1.0
        g_char[b] = g
        t_loss, t_grad = token_loss(tl[b], top5, cfg.renormalize_token_target, cfg.restrict_token_loss)
        t_sum += t_loss
        g_tok[b] = t_grad
    inv = 1.0 / B
    if grads is None:
        grads = [np.empty_like(a) for a in stack.arrays()]
    np.einsum("bks,bd->ksd", g_char, H, out=grads[0])
    grads[0] *= inv
    np.matmul(g_tok.T, H, out=grads[1])
    grads[1] *= inv
    if stack.has_bias:
        grads[2][...] = g_char.sum(axis=0) * inv
        grads[3][...] = g_tok.sum(axis=0) * inv
    return LossBreakdown(c_sum * inv, t_sum * inv), grads


def train(stack: HeadStack, trace: Trace, tv: TokenVocab, cfg: TrainConfig,
          on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[HeadStack, list[EpochLog]]:
    """Train a copy of ``stack`` on ``trace``; only the heads are updated."""
    if trace.vocab_sha256 != tv.sha256:
        raise TraceVocabMismatch(
            f"trace was built for vocab {trace.vocab_sha256[:12]}, training vocab is {tv.sha256[:12]}")
    if trace.d != stack.d:
        raise ContractError(f"trace hidden width {trace.d} != head width {stack.d}")
    if stack.S != tv.S or stack.k != tv.k or stack.s != tv.cv.size:
        raise ContractError(f"stack (k={stack.k}, s={stack.s}, S={stack.S}) does not match vocab "
                            f"(k={tv.k}, s={tv.cv.size}, S={tv.S})")
    flat = _FlatStack(stack.copy())
    opt = AdamW(flat.flat, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
    H_all = trace.hidden_matrix()
    top5s = [r.top5 for r in trace.records]
    n = len(top5s)
    logs: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(epoch,)))).permutation(n)
        c_tot = t_tot = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses, _ = batch_loss_and_grad(flat.stack, H_all[idx], [top5s[i] for i in idx], tv, cfg,
                                            flat.grad_views)
            if not (math.isfinite(losses.char_loss) and math.isfinite(losses.token_loss)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting at position {start} "
                    f"(records {idx[:5].tolist()}...): char={losses.char_loss}, token={losses.token_loss}")
            c_tot += losses.char_loss * len(idx)
            t_tot += losses.token_loss * len(idx)
            opt.step(flat.grad)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        entry = EpochLog(epoch, LossBreakdown(c_tot / max(n, 1), t_tot / max(n, 1)), wall_ms)
        logs.append(entry)
        log.info("epoch %d: char=%.4f token=%.4f (%.0f ms)", epoch, entry.losses.char_loss,
                 entry.losses.token_loss, wall_ms)
        if on_epoch is not None:
            on_epoch(entry)
    trained = HeadStack(flat.views[0].copy(), flat.views[1].copy(), stack.charset, stack.seed,
                        *(tuple(v.copy() for v in flat.views[2:4]) if stack.has_bias else (None, None)))
    return trained, logs


def write_train_log(path, logs: Sequence[EpochLog]) -> None:
    """Per-epoch losses; wall-clock times go to a ``.meta.jsonl`` sidecar."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for e in logs:
            f.write(json.dumps(e.record()) + "\n")
    meta = path.with_name(path.stem + ".meta.jsonl")
    with meta.open("w", encoding="utf-8", newline="\n") as f:
        for e in logs:
            f.write(json.dumps({"epoch": e.epoch, "wall_ms": round(e.wall_ms, 3)}) + "\n")
