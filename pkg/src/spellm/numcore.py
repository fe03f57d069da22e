"""Dense linear algebra, probability and RNG primitives.

Matrices and probability vectors are plain float64 numpy arrays; the
functions here add the shape/finiteness contracts the rest of the package
relies on.

Randomness comes from numpy's PCG64 bit generator (PCG-XSL-RR 128/64).
Its output stream is fixed by the seed and identical on every platform;
child streams are derived with ``SeedSequence.spawn``.
"""

from __future__ import annotations

import math

import numpy as np


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class UndefinedCorrelationError(ValueError):
    """Correlation requested for a series with zero variance or < 2 points."""


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix contains non-finite entries")
    return a


def matvec(m, v) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1:
        raise ContractError(f"matvec needs (rows, cols) @ (cols,), got {m.shape} @ {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ContractError(f"dimension mismatch: matrix has {m.shape[1]} cols, vector has {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ContractError("vector contains non-finite entries")
    return m @ v


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ContractError("softmax of an empty array")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ContractError("log_softmax of an empty array")
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def entropy(p, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def cross_entropy(logits, target) -> float:
    """Soft-label cross entropy ``-sum(target * log_softmax(logits))``.

    ``target`` is used as given; it is not renormalized.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ContractError(f"length mismatch: logits {logits.shape} vs target {target.shape}")
    return float(-(target * log_softmax(logits)).sum())


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"pearson needs two equal-length 1-d series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 points, got {x.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance in one of the series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


class SeededRng:
    """PCG64-backed generator with reproducible child streams.

    >>> SeededRng(7).uniform(0, 1, 3).tolist() == SeededRng(7).uniform(0, 1, 3).tolist()
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["SeededRng"]:
        children = []
        for child in self._seq.spawn(n):
            r = SeededRng.__new__(SeededRng)
            r.seed = self.seed
            r._seq = child
            r.gen = np.random.Generator(np.random.PCG64(child))
            children.append(r)
        return children

    def raw_uint64(self, n: int) -> np.ndarray:
        return self.gen.bit_generator.random_raw(n)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, p=None, replace=True):
        return self.gen.choice(a, size=size, p=p, replace=replace)
