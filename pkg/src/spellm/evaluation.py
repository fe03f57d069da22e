"""Intrinsic evaluation against the teacher's top-5 and the analysis suite.

A prediction counts as *correct* when it spells a top-5 token without a
single mistake (``full_exact`` or ``k_char``); the per-length, per-entropy
and AutoCorrect accuracy breakdowns all use that definition.  ``total``
additionally counts prefix matches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .heads import HeadStack, forward_chars
from .inference import (AUTOCORRECT, AUTOCORRECT_EMPTY, DEFAULT_THRESHOLD, FALLBACK, PATHS, RAW,
                        decode_with_fallback)
from .numcore import UndefinedCorrelationError, pearson
from .teacher import Trace, TraceVocabMismatch, teacher_entropy
from .vocab import PAD, TokenVocab

FULL_EXACT = "full_exact"
K_CHAR = "k_char"
PREFIX = "prefix"
MISMATCH = "mismatch"
KINDS = (FULL_EXACT, K_CHAR, PREFIX, MISMATCH)
N_BINS = 8


class EmptyEvalError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    token_id: int
    prob: float
    rank: int  # 1-based position in the teacher's top-5
    spelling: np.ndarray
    length: int  # normalized, untruncated


def candidates_for(top5: Sequence[tuple[int, float]], tv: TokenVocab) -> list[Candidate]:
    return [Candidate(tid, p, r, tv.spellings[tid], int(tv.lengths[tid]))
            for r, (tid, p) in enumerate(top5, start=1)]


@dataclass(frozen=True)
class MatchVerdict:
    kind: str
    matched_token: int | None = None
    prefix_len: int | None = None


def _by_preference(cands: Sequence[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.prob, c.token_id))


def classify_match(pred, cands: Sequence[Candidate], k: int) -> MatchVerdict:
    """Verdict for a predicted spelling, in precedence order full_exact >
    k_char > prefix > mismatch; the most probable qualifying token is reported.

    full_exact needs the whole token spelled (normalized length <= k);
    k_char is the first k characters of a longer token.
    """
    pred = np.asarray(pred)
    if pred.shape != (k,):
        raise ValueError(f"prediction has shape {pred.shape}, expected ({k},)")
    ordered = _by_preference(cands)
    equal = [c for c in ordered if np.array_equal(c.spelling, pred)]
    for c in equal:
        if c.length <= k:
            return MatchVerdict(FULL_EXACT, c.token_id)
    for c in equal:
        if c.length > k:
            return MatchVerdict(K_CHAR, c.token_id)
    pads = np.flatnonzero(pred == PAD)
    n = int(pads[0]) if pads.size else k
    if n == 0 or n == k or np.any(pred[n:] != PAD):
        return MatchVerdict(MISMATCH)
    for c in ordered:
        if np.array_equal(c.spelling[:n], pred[:n]) and c.spelling[n] != PAD:
            return MatchVerdict(PREFIX, c.token_id, n)
    return MatchVerdict(MISMATCH)


def nearest_token(pred, cands: Sequence[Candidate]) -> tuple[int, int, int]:
    """(token_id, mistakes, rank) of the candidate with fewest position-wise
    mistakes; ties go to the higher teacher probability."""
    pred = np.asarray(pred)
    best = None
    for c in _by_preference(cands):
        m = int(np.count_nonzero(c.spelling != pred))
        if best is None or m < best[1]:
            best = (c.token_id, m, c.rank)
    return best


# -- aggregate report ----------------------------------------------------------

@dataclass
class RecordRow:
    path: str
    kind: str
    correct: bool
    mean_entropy: float
    teacher_entropy: float
    teacher_entropy_raw: float
    nearest_rank: int
    nearest_length: int
    candidate_count: int
    prefix_len: int | None
    target_len: int | None
    token_id: int | None


@dataclass
class EvalReport:
    n: int
    k: int
    policy: dict
    percentages: dict
    total: float
    path_counts: dict
    mean_prefix_len: float | None
    mean_target_len: float | None
    length_buckets: list
    entropy_bins: list
    topk_preference: list
    pearson: dict
    autocorrect: dict
    rows: list = field(default_factory=list, repr=False)

    def to_dict(self, with_rows: bool = False) -> dict:
        out = {key: getattr(self, key) for key in (
            "n", "k", "policy", "percentages", "total", "path_counts", "mean_prefix_len",
            "mean_target_len", "length_buckets", "entropy_bins", "topk_preference", "pearson",
            "autocorrect")}
        if with_rows:
            out["records"] = [r.__dict__ for r in self.rows]
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2, sort_keys=False) + "\n"


def _bins(values: np.ndarray, n_bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equidistant edges over [0, max(values)] and the bin index of each value."""
    hi = float(values.max()) if values.size else 0.0
    if hi <= 0.0:
        hi = 1.0
    edges = np.linspace(0.0, hi, n_bins + 1)
    idx = np.minimum((values / hi * n_bins).astype(np.int64), n_bins - 1)
    return edges, idx


def _top_mean(counts: np.ndarray, frac: float) -> float | None:
    if counts.size == 0:
        return None
    m = max(1, math.ceil(frac * counts.size))
    return float(np.sort(counts)[::-1][:m].mean())


def _pearson_entry(x, y) -> dict:
    try:
        return {"value": pearson(x, y), "defined": True, "reason": None}
    except UndefinedCorrelationError as exc:
        return {"value": None, "defined": False, "reason": str(exc)}


def aggregate(rows: Sequence[RecordRow], k: int, policy: dict) -> EvalReport:
    n = len(rows)
    if n == 0:
        raise EmptyEvalError("no records to evaluate")
    kinds = [r.kind for r in rows]
    pct = {kind: 100.0 * kinds.count(kind) / n for kind in KINDS}
    total = pct[FULL_EXACT] + pct[K_CHAR] + pct[PREFIX]
    path_counts = {p: sum(r.path == p for r in rows) for p in PATHS}
    prefix_rows = [r for r in rows if r.kind == PREFIX]
    mean_prefix = float(np.mean([r.prefix_len for r in prefix_rows])) if prefix_rows else None
    mean_target = float(np.mean([r.target_len for r in prefix_rows])) if prefix_rows else None
    correct = np.array([r.correct for r in rows])

    lengths = np.array([min(r.nearest_length, k) for r in rows])
    length_buckets = []
    for L in range(1, k + 1):
        sel = lengths == L
        cnt = int(sel.sum())
        length_buckets.append({"length": L, "count": cnt,
                               "accuracy": float(correct[sel].mean()) if cnt else None})

    ent = np.array([r.mean_entropy for r in rows])
    edges, idx = _bins(ent)
    entropy_bins = []
    for b in range(N_BINS):
        sel = idx == b
        cnt = int(sel.sum())
        entropy_bins.append({"bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]), "count": cnt,
                             "share": cnt / n, "accuracy": float(correct[sel].mean()) if cnt else None})

    t_ent = np.array([r.teacher_entropy for r in rows])
    t_edges, t_idx = _bins(t_ent)
    ranks = np.array([r.nearest_rank for r in rows])
    topk = []
    for b in range(N_BINS):
        sel = t_idx == b
        cnt = int(sel.sum())
        hist = {str(rk): int(np.count_nonzero(ranks[sel] == rk)) for rk in range(1, 6)}
        topk.append({"bin": b, "lo": float(t_edges[b]), "hi": float(t_edges[b + 1]), "count": cnt,
                     "share": cnt / n, "rank_counts": hist})

    t_raw = np.array([r.teacher_entropy_raw for r in rows])
    pear = {"renormalized": _pearson_entry(t_ent, ent), "raw": _pearson_entry(t_raw, ent)}

    not_fb = [r for r in rows if r.path != FALLBACK]
    triggered = [r for r in not_fb if r.path in (AUTOCORRECT, AUTOCORRECT_EMPTY, RAW)]
    valid = [r for r in not_fb if r.path not in (AUTOCORRECT, AUTOCORRECT_EMPTY, RAW)]
    counts = np.array([r.candidate_count for r in rows if r.path in (AUTOCORRECT, AUTOCORRECT_EMPTY)])
    ac = {
        "trigger_rate": len(triggered) / n,
        "accuracy_overall": float(correct.mean()),
        "accuracy_triggered": float(np.mean([r.correct for r in triggered])) if triggered else None,
        "accuracy_valid": float(np.mean([r.correct for r in valid])) if valid else None,
        "applied": int(counts.size),
        "candidates_median": float(np.median(counts)) if counts.size else None,
        "candidates_top_0_5pct_mean": _top_mean(counts, 0.005),
        "candidates_top_1pct_mean": _top_mean(counts, 0.01),
        "zero_candidate_rate": float(np.mean(counts == 0)) if counts.size else None,
        "fallback_rate": path_counts[FALLBACK] / n,
    }
    return EvalReport(n, k, dict(policy), pct, total, path_counts, mean_prefix, mean_target,
                      length_buckets, entropy_bins, topk, pear, ac, list(rows))


def evaluate_records(stack: HeadStack, trace: Trace, tv: TokenVocab, autocorrect: bool = True,
                     fallback: bool = True, threshold: float = DEFAULT_THRESHOLD) -> list[RecordRow]:
    rows = []
    gate = threshold if fallback else None
    for rec in trace.records:
        cl = forward_chars(stack, rec.hidden)
        out = decode_with_fallback(rec.hidden, cl, stack, tv, gate, autocorrect)
        cands = candidates_for(rec.top5, tv)
        verdict = classify_match(out.output, cands, tv.k)
        near_id, mistakes, rank = nearest_token(out.output, cands)
        target_len = int(tv.lengths[verdict.matched_token]) if verdict.kind == PREFIX else None
        rows.append(RecordRow(
            path=out.path, kind=verdict.kind, correct=verdict.kind in (FULL_EXACT, K_CHAR),
            mean_entropy=out.mean_entropy, teacher_entropy=teacher_entropy(rec),
            teacher_entropy_raw=teacher_entropy(rec, renormalize=False), nearest_rank=rank,
            nearest_length=int(tv.lengths[near_id]), candidate_count=out.candidate_count,
            prefix_len=verdict.prefix_len, target_len=target_len, token_id=out.token_id))
    return rows


def run_eval(stack: HeadStack, trace: Trace, tv: TokenVocab, autocorrect: bool = True,
             fallback: bool = True, threshold: float = DEFAULT_THRESHOLD,
             train_trace_sha: str | None = None, trace_sha: str | None = None) -> EvalReport:
    """Decode every record under one policy and aggregate the report.

    When both trace hashes are given they must differ (held-out check).
    """
    if trace.vocab_sha256 != tv.sha256:
        raise TraceVocabMismatch(
            f"trace was built for vocab {trace.vocab_sha256[:12]}, eval vocab is {tv.sha256[:12]}")
    if train_trace_sha is not None and trace_sha is not None and train_trace_sha == trace_sha:
        raise ValueError("evaluation trace is identical to the training trace")
    if not trace.records:
        raise EmptyEvalError("evaluation trace has no records")
    rows = evaluate_records(stack, trace, tv, autocorrect, fallback, threshold)
    policy = {"autocorrect": autocorrect, "fallback": fallback, "threshold": threshold}
    return aggregate(rows, tv.k, policy)


# -- rendering -----------------------------------------------------------------

_ROW_LABELS = (("Full exact match", FULL_EXACT), ("k-character match", K_CHAR),
               ("Match for prefix", PREFIX))


def render_table(without: EvalReport, with_ac: EvalReport) -> str:
    """Plain-text intrinsic-evaluation table, with and without AutoCorrect."""
    lines = [f"{'Generation':<22}{'Match type':<20}{'%':>8}"]
    for label, rep in (("SpeLLM", without), ("SpeLLM + AutoCorrect", with_ac)):
        lines.append("-" * 50)
        for i, (name, kind) in enumerate(_ROW_LABELS):
            lines.append(f"{label if i == 0 else '':<22}{name:<20}{rep.percentages[kind]:>8.2f}")
        lines.append(f"{'':<22}{'Total':<20}{rep.total:>8.2f}")
    return "\n".join(lines) + "\n"


def render_k_sweep(reports: dict[int, tuple[EvalReport, EvalReport]]) -> str:
    """Head-count sweep table: exact / k-char / total per k, both policies."""
    ks = sorted(reports)
    head = f"{'Generation':<22}{'Match type':<20}" + "".join(f"{f'{k} heads':>10}" for k in ks)
    lines = [head]
    for j, label in enumerate(("SpeLLM", "SpeLLM + AutoCorrect")):
        lines.append("-" * len(head))
        for i, (name, kind) in enumerate((("Exact match", FULL_EXACT), ("k-character match", K_CHAR))):
            vals = "".join(f"{reports[k][j].percentages[kind]:>10.2f}" for k in ks)
            lines.append(f"{label if i == 0 else '':<22}{name:<20}{vals}")
        vals = "".join(
            f"{reports[k][j].percentages[FULL_EXACT] + reports[k][j].percentages[K_CHAR]:>10.2f}" for k in ks)
        lines.append(f"{'':<22}{'Total':<20}{vals}")
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def write_analysis(report: EvalReport, out_dir) -> list[Path]:
    """Analysis JSON plus one plot-ready CSV per figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "length_accuracy.csv"
    _write_csv(p, ["length", "count", "accuracy"],
               [(b["length"], b["count"], b["accuracy"]) for b in report.length_buckets])
    written.append(p)
    p = out / "entropy_bins.csv"
    _write_csv(p, ["bin", "lo", "hi", "count", "share", "accuracy"],
               [(b["bin"], b["lo"], b["hi"], b["count"], b["share"], b["accuracy"]) for b in report.entropy_bins])
    written.append(p)
    p = out / "topk_preference.csv"
    _write_csv(p, ["bin", "lo", "hi", "count", "share", "rank1", "rank2", "rank3", "rank4", "rank5"],
               [(b["bin"], b["lo"], b["hi"], b["count"], b["share"], *(b["rank_counts"][str(r)] for r in range(1, 6)))
                for b in report.topk_preference])
    written.append(p)
    p = out / "autocorrect_candidates.csv"
    counts = sorted(r.candidate_count for r in report.rows if r.path in (AUTOCORRECT, AUTOCORRECT_EMPTY))
    _write_csv(p, ["candidate_count"], [(c,) for c in counts])
    written.append(p)
    p = out / "records.csv"
    cols = list(RecordRow.__dataclass_fields__)
    _write_csv(p, cols, [[getattr(r, c) for c in cols] for r in report.rows])
    written.append(p)
    p = out / "analysis.json"
    bundle = {"n": report.n, "k": report.k, "policy": report.policy,
              "length_buckets": report.length_buckets, "entropy_bins": report.entropy_bins,
              "topk_preference": report.topk_preference, "pearson": report.pearson,
              "autocorrect": report.autocorrect, "mean_prefix_len": report.mean_prefix_len,
              "mean_target_len": report.mean_target_len}
    p.write_text(json.dumps(bundle, indent=2) + "\n", encoding="utf-8")
    written.append(p)
    return written
