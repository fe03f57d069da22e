"""``spellm`` command-line entry point.

Subcommands: vocab, gen, train, eval, bench, analyze.  Every command reads
an optional JSON config (``--config``), applies flag overrides, and writes
into ``--out``: its artifacts, the effective ``config.json``, and a
``meta.json`` sidecar holding the only non-deterministic content (times).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import BenchConfig, format_reports, run_bench
from .distill import TrainConfig, train, write_train_log
from .evaluation import render_k_sweep, render_table, run_eval, write_analysis
from .heads import HeadStack, load_checkpoint, save_checkpoint
from .inference import DEFAULT_THRESHOLD
from .teacher import SyntheticTeacherSpec, gen_synthetic_trace, read_trace, trace_sha256, write_trace
from .vocab import coverage_report, make_synthetic_vocab, read_vocab, write_vocab

log = logging.getLogger("spellm")


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    teacher: SyntheticTeacherSpec = field(default_factory=SyntheticTeacherSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    k: int = 6
    vocab_seed: int = 0
    n_records: int = 1000
    stream: int = 0
    autocorrect: bool = True
    fallback: bool = True
    threshold: float = DEFAULT_THRESHOLD
    k_sweep: list[int] = field(default_factory=list)
    vocab: str | None = None
    train_trace: str | None = None
    eval_trace: str | None = None
    checkpoint: str | None = None
    out: str = "out"

    _SECTIONS = {"teacher": SyntheticTeacherSpec, "train": TrainConfig, "bench": BenchConfig}

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if f.name in self._SECTIONS else (list(v) if isinstance(v, list) else v)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise CliError(f"config: unknown field(s) {sorted(unknown)}")
        kw = {}
        for name, value in obj.items():
            if name in cls._SECTIONS:
                section = cls._SECTIONS[name]
                fields_ = {f.name for f in dataclasses.fields(section)}
                bad = set(value) - fields_
                if bad:
                    raise CliError(f"config: unknown field(s) {sorted(bad)} in section {name!r}")
                try:
                    kw[name] = section(**value)
                except (TypeError, ValueError) as exc:
                    raise CliError(f"config: section {name!r}: {exc}") from None
            else:
                kw[name] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise CliError(f"{p}: invalid JSON: {exc}") from None


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"no {what} path given (set {what!r} in the config or pass --{what.replace('_', '-')})")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


class _Bundle:
    """Output directory with a write lock and provenance files."""

    def __init__(self, out: str, command: str, cfg: RunConfig):
        self.dir = Path(out)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create output directory {self.dir}: {exc}") from None
        if not os.access(self.dir, os.W_OK):
            raise CliError(f"output directory not writable: {self.dir}")
        self.command = command
        self.cfg = cfg
        self.lock = FileLock(str(self.dir / ".lock"))
        self.started = time.time()
        self.timings: dict[str, float] = {}

    def __enter__(self):
        self.lock.acquire(timeout=60)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                _write_json(self.dir / "config.json", {"command": self.command, **self.cfg.to_dict()})
                _write_json(self.dir / "meta.json", {
                    "command": self.command, "version": __version__,
                    "started_utc": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
                    "wall_s": round(time.time() - self.started, 3), "python": platform.python_version(),
                    "timings_ms": self.timings})
        finally:
            self.lock.release()
        return False

    def path(self, name: str) -> Path:
        return self.dir / name


def cmd_vocab(cfg: RunConfig) -> None:
    tv = make_synthetic_vocab(cfg.teacher.S, cfg.k, cfg.vocab_seed)
    with _Bundle(cfg.out, "vocab", cfg) as b:
        write_vocab(b.path("vocab.jsonl"), tv)
        _write_json(b.path("coverage.json"), coverage_report(tv).to_dict())
        print(f"wrote {b.path('vocab.jsonl')} ({tv.S} tokens, k={tv.k}, sha256 {tv.sha256[:12]})")


def cmd_gen(cfg: RunConfig) -> None:
    tv = read_vocab(_require(cfg.vocab, "vocab"), cfg.k)
    if cfg.teacher.S != tv.S:
        raise CliError(f"teacher.S={cfg.teacher.S} but vocab has {tv.S} tokens")
    trace = gen_synthetic_trace(cfg.teacher, cfg.n_records, tv, cfg.stream)
    with _Bundle(cfg.out, "gen", cfg) as b:
        write_trace(b.path("trace.jsonl"), trace.records, trace.d, tv.sha256)
        print(f"wrote {b.path('trace.jsonl')} ({len(trace)} records)")


def _train_one(cfg: RunConfig, k: int, b: _Bundle, prefix: str = ""):
    tv = read_vocab(_require(cfg.vocab, "vocab"), k)
    trace = read_trace(_require(cfg.train_trace, "train_trace"), tv.sha256)
    stack = HeadStack.init(k, tv.cv, tv.S, trace.d, cfg.train.seed)
    t0 = time.perf_counter()
    trained, logs = train(stack, trace, tv, cfg.train)
    b.timings[f"{prefix}train"] = round((time.perf_counter() - t0) * 1000, 1)
    save_checkpoint(b.path(f"{prefix}checkpoint.json"), trained)
    write_train_log(b.path(f"{prefix}train_log.jsonl"), logs)
    return trained, tv


def cmd_train(cfg: RunConfig) -> None:
    with _Bundle(cfg.out, "train", cfg) as b:
        _, tv = _train_one(cfg, cfg.k, b)
        print(f"wrote {b.path('checkpoint.json')} and {b.path('train_log.jsonl')}")


def _eval_pair(stack, trace, tv, cfg: RunConfig, train_sha, eval_sha):
    """Reports without and with AutoCorrect under the configured fallback."""
    return tuple(run_eval(stack, trace, tv, ac, cfg.fallback, cfg.threshold, train_sha, eval_sha)
                 for ac in (False, True))


def cmd_eval(cfg: RunConfig) -> None:
    eval_path = _require(cfg.eval_trace, "eval_trace")
    eval_sha = trace_sha256(eval_path)
    train_sha = trace_sha256(cfg.train_trace) if cfg.train_trace and Path(cfg.train_trace).exists() else None
    if train_sha == eval_sha:
        log.warning("evaluation trace is the training trace; results are not held-out")
        train_sha = None
    with _Bundle(cfg.out, "eval", cfg) as b:
        if cfg.k_sweep:
            reports = {}
            for k in cfg.k_sweep:
                stack, tv = _train_one(cfg, k, b, prefix=f"k{k}_")
                trace = read_trace(eval_path, tv.sha256)
                reports[k] = _eval_pair(stack, trace, tv, cfg, train_sha, eval_sha)
                chosen = reports[k][1 if cfg.autocorrect else 0]
                b.path(f"k{k}_report.json").write_text(chosen.to_json(), encoding="utf-8")
            table = render_k_sweep(reports)
            b.path("table_k_sweep.txt").write_text(table, encoding="utf-8")
            print(table, end="")
            return
        stack = load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
        tv = read_vocab(_require(cfg.vocab, "vocab"), stack.k)
        trace = read_trace(eval_path, tv.sha256)
        without, with_ac = _eval_pair(stack, trace, tv, cfg, train_sha, eval_sha)
        chosen = with_ac if cfg.autocorrect else without
        b.path("report.json").write_text(chosen.to_json(), encoding="utf-8")
        table = render_table(without, with_ac)
        b.path("table.txt").write_text(table, encoding="utf-8")
        print(table, end="")


def cmd_analyze(cfg: RunConfig) -> None:
    stack = load_checkpoint(_require(cfg.checkpoint, "checkpoint"))
    tv = read_vocab(_require(cfg.vocab, "vocab"), stack.k)
    trace = read_trace(_require(cfg.eval_trace, "eval_trace"), tv.sha256)
    if not trace.records:
        raise CliError(f"{cfg.eval_trace}: evaluation trace is empty, nothing to analyze")
    report = run_eval(stack, trace, tv, cfg.autocorrect, cfg.fallback, cfg.threshold)
    with _Bundle(cfg.out, "analyze", cfg) as b:
        paths = write_analysis(report, b.dir / "analysis")
        pear = report.pearson["renormalized"]
        print(f"wrote {len(paths)} files to {b.dir / 'analysis'}; pearson(teacher, student entropy) = "
              f"{pear['value'] if pear['defined'] else 'undefined (' + pear['reason'] + ')'}")


def cmd_bench(cfg: RunConfig) -> None:
    reports = run_bench(cfg.bench)
    with _Bundle(cfg.out, "bench", cfg) as b:
        _write_json(b.path("bench.json"), [r.to_dict() for r in reports])
        print(format_reports(reports), end="")


COMMANDS = {"vocab": cmd_vocab, "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spellm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="seed of this command's component")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--vocab")
        sp.add_argument("--k", type=int)
        if name == "gen":
            sp.add_argument("--n", type=int, dest="n_records")
            sp.add_argument("--stream", type=int)
        if name in ("train", "eval", "analyze"):
            sp.add_argument("--train-trace")
            sp.add_argument("--checkpoint")
        if name in ("eval", "analyze"):
            sp.add_argument("--eval-trace")
            sp.add_argument("--autocorrect", action=argparse.BooleanOptionalAction, default=None)
            sp.add_argument("--fallback", action=argparse.BooleanOptionalAction, default=None)
            sp.add_argument("--fallback-threshold", type=float, dest="threshold")
        if name == "eval":
            sp.add_argument("--k-sweep", help="comma-separated head counts, e.g. 5,10,15")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in ("out", "vocab", "k", "n_records", "stream", "train_trace", "checkpoint", "eval_trace",
                "autocorrect", "fallback", "threshold"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "k_sweep", None):
        try:
            cfg.k_sweep = [int(x) for x in args.k_sweep.split(",") if x.strip()]
        except ValueError:
            raise CliError(f"--k-sweep: expected comma-separated integers, got {args.k_sweep!r}") from None
    if args.seed is not None:
        if args.command == "vocab":
            cfg.vocab_seed = args.seed
        elif args.command == "gen":
            cfg.teacher = dataclasses.replace(cfg.teacher, seed=args.seed)
        elif args.command == "bench":
            cfg.bench.seed = args.seed
        else:
            cfg.train.seed = args.seed
    if cfg.threshold is not None and cfg.threshold < 0:
        raise CliError(f"fallback threshold must be >= 0, got {cfg.threshold}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SPELLM_THREADS")
    try:
        cfg = resolve_config(args)
        limit = int(threads) if threads else None
        with threadpool_limits(limits=limit):
            COMMANDS[args.command](cfg)
    except (CliError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"spellm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
