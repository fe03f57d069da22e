"""Output-head micro-benchmarks.

Compares the character heads (k matvecs, per-head softmax and argmax)
against a full S-way token head (matvec, softmax, argmax).  The
end-to-end variant puts a dummy backbone of dense d -> 4d -> d blocks in
front of both heads.  Timing uses ``perf_counter_ns`` and excludes warmup
and input generation.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .heads import MaddCounter


@dataclass
class BenchConfig:
    d: int = 1024
    S: int = 100_000
    s: int = 97
    k: int = 10
    n_samples: int = 200
    warmup: int = 10
    backbone_layers: int = 0
    repeat: int = 1
    dtype: str = "float32"
    threads: int = 1
    seed: int = 0

    def validate(self) -> None:
        if min(self.d, self.S, self.s, self.k, self.repeat, self.n_samples) < 1:
            raise ValueError("d, S, s, k, n_samples and repeat must all be >= 1")
        if self.warmup < 0 or self.backbone_layers < 0:
            raise ValueError("warmup and backbone_layers must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchReport:
    config: dict
    variants: dict
    flop_counts: dict
    counted_flops: dict
    speedup_ratio: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def head_flops(d: int, S: int, s: int, k: int) -> dict:
    return {"spellm": k * s * d, "token": S * d}


def backbone_flops(d: int, layers: int) -> int:
    return layers * 8 * d * d


def _stats(ns: np.ndarray) -> dict:
    return {"median_ns": float(np.median(ns)), "mean_ns": float(ns.mean()),
            "p95_ns": float(np.percentile(ns, 95)), "n": int(ns.size)}


class _Model:
    def __init__(self, cfg: BenchConfig):
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        dt = np.dtype(cfg.dtype)
        d = cfg.d
        self.char_heads = (rng.standard_normal((cfg.k, cfg.s, d), dtype=np.float32) / math.sqrt(d)).astype(dt)
        self.token_head = (rng.standard_normal((cfg.S, d), dtype=np.float32) / math.sqrt(d)).astype(dt)
        self.blocks = [((rng.standard_normal((4 * d, d), dtype=np.float32) / math.sqrt(d)).astype(dt),
                        (rng.standard_normal((d, 4 * d), dtype=np.float32) / math.sqrt(4 * d)).astype(dt))
                       for _ in range(cfg.backbone_layers)]
        self.hidden = rng.standard_normal((cfg.n_samples, d), dtype=np.float32).astype(dt)

    def backbone(self, x, counter: MaddCounter | None = None):
        for w1, w2 in self.blocks:
            if counter is None:
                x = x + w2 @ np.maximum(w1 @ x, 0)
            else:
                x = x + counter.matvec(w2, np.maximum(counter.matvec(w1, x), 0))
        return x

    def spellm_head(self, h, counter: MaddCounter | None = None):
        if counter is None:
            z = self.char_heads @ h
        else:
            z = np.stack([counter.matvec(w, h) for w in self.char_heads])
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        return p.argmax(axis=-1)

    def token_head_fn(self, h, counter: MaddCounter | None = None):
        z = self.token_head @ h if counter is None else counter.matvec(self.token_head, h)
        e = np.exp(z - z.max())
        p = e / e.sum()
        return p.argmax()


def _time_pair(fn_a, fn_b, inputs: np.ndarray, warmup: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample latencies of two variants, interleaved so drift hits both
    equally; the order within each pair alternates."""
    for i in range(warmup):
        fn_a(inputs[i % len(inputs)])
        fn_b(inputs[i % len(inputs)])
    ta = np.empty(len(inputs), dtype=np.int64)
    tb = np.empty(len(inputs), dtype=np.int64)
    clock = time.perf_counter_ns
    for i, h in enumerate(inputs):
        for which in ((0, 1) if i % 2 == 0 else (1, 0)):
            fn, out = (fn_a, ta) if which == 0 else (fn_b, tb)
            t0 = clock()
            fn(h)
            out[i] = clock() - t0
    return ta, tb


def _count(fn, h) -> int:
    c = MaddCounter()
    fn(h, c)
    return c.total


def bench_head_only(cfg: BenchConfig, model: _Model | None = None) -> BenchReport:
    cfg.validate()
    m = model or _Model(cfg)
    with threadpool_limits(limits=cfg.threads):
        t_sp, t_tok = _time_pair(m.spellm_head, m.token_head_fn, m.hidden, cfg.warmup)
    h0 = m.hidden[0]
    counted = {"spellm": _count(m.spellm_head, h0), "token": _count(m.token_head_fn, h0)}
    sp, tok = _stats(t_sp), _stats(t_tok)
    return BenchReport(cfg.to_dict(), {"spellm": sp, "token": tok},
                       head_flops(cfg.d, cfg.S, cfg.s, cfg.k), counted,
                       tok["median_ns"] / sp["median_ns"])


def bench_end_to_end(cfg: BenchConfig, model: _Model | None = None) -> BenchReport:
    """Per-token latency of backbone + head for both head variants."""
    if cfg.backbone_layers == 0:
        return bench_head_only(cfg, model)
    cfg.validate()
    m = model or _Model(cfg)

    def with_spellm(h, counter=None):
        return m.spellm_head(m.backbone(h, counter), counter)

    def with_token(h, counter=None):
        return m.token_head_fn(m.backbone(h, counter), counter)

    with threadpool_limits(limits=cfg.threads):
        t_sp, t_tok = _time_pair(with_spellm, with_token, m.hidden, cfg.warmup)
    h0 = m.hidden[0]
    counted = {"spellm": _count(with_spellm, h0), "token": _count(with_token, h0)}
    heads = head_flops(cfg.d, cfg.S, cfg.s, cfg.k)
    bb = backbone_flops(cfg.d, cfg.backbone_layers)
    flops = {"spellm": bb + heads["spellm"], "token": bb + heads["token"], "backbone": bb}
    sp, tok = _stats(t_sp), _stats(t_tok)
    predicted = 1.0 - flops["spellm"] / flops["token"]
    measured = 1.0 - sp["median_ns"] / tok["median_ns"]
    extra = {"head_share_flops": heads["token"] / flops["token"],
             "predicted_reduction": predicted, "measured_reduction": measured,
             "reduction_ratio": measured / predicted if predicted > 0 else None}
    return BenchReport(cfg.to_dict(), {"spellm": sp, "token": tok}, flops, counted,
                       tok["median_ns"] / sp["median_ns"], extra)


def run_bench(cfg: BenchConfig) -> list[BenchReport]:
    """``cfg.repeat`` independent timing runs over one set of weights."""
    cfg.validate()
    m = _Model(cfg)
    fn = bench_end_to_end if cfg.backbone_layers > 0 else bench_head_only
    return [fn(cfg, m) for _ in range(cfg.repeat)]


def format_reports(reports: list[BenchReport]) -> str:
    lines = [f"{'run':>4} {'variant':<8} {'median us':>11} {'mean us':>10} {'p95 us':>10} {'madds':>14}"]
    for i, r in enumerate(reports):
        for name in ("spellm", "token"):
            v = r.variants[name]
            lines.append(f"{i:>4} {name:<8} {v['median_ns'] / 1e3:>11.2f} {v['mean_ns'] / 1e3:>10.2f} "
                         f"{v['p95_ns'] / 1e3:>10.2f} {r.flop_counts[name]:>14,}")
        line = f"{'':>4} speedup (token/spellm median): {r.speedup_ratio:.2f}x"
        if r.extra:
            line += (f"; runtime reduction measured {100 * r.extra['measured_reduction']:.2f}% "
                     f"vs FLOP model {100 * r.extra['predicted_reduction']:.2f}%")
        lines.append(line)
    return "\n".join(lines) + "\n"
