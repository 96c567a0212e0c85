"""Dense float64 matrices with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradTape`.
Each record holds the output, the inputs and a closure mapping the output
gradient to input gradients. ``GradTape.gradient`` replays the records in
reverse creation order, which is a reverse topological order because an
op can only consume matrices that already exist.

    >>> w = Matrix(np.eye(2), requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = sum_all(matmul(w, w))
    >>> tape.gradient(loss, [w])[0]
    array([[2., 2.],
           [2., 2.]])
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, GradCheckError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Matrix:
    """Immutable 2-D float64 value, optionally tracked by the gradient tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigError(f"Matrix needs 2 dimensions, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def from_external(cls, data, **kw) -> "Matrix":
        """Build from untrusted input, rejecting NaN and Inf."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ConfigError("matrix input contains non-finite entries")
        return cls(arr, **kw)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Matrix":
        # internal fast path: arr is freshly computed and owned by us
        m = object.__new__(cls)
        arr.flags.writeable = False
        m.data = arr
        m.requires_grad = requires_grad
        m.name = ""
        return m

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Matrix{tag}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Matrix
    inputs: tuple[Matrix, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops; use as a context manager."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def gradient(self, target: Matrix, sources: Sequence[Matrix]) -> list[np.ndarray]:
        """d(target)/d(source) for each source; target must be 1x1.

        Sources never reached get a zero array of their own shape.
        """
        if target.shape != (1, 1):
            raise ConfigError(f"gradient target must be 1x1, got {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones((1, 1))}
        keep = {id(s) for s in sources}
        for rec in reversed(self.records):
            key = id(rec.out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        return [grads.get(id(s), np.zeros(s.shape)) for s in sources]


def _record(arr: np.ndarray, inputs: tuple[Matrix, ...], backward) -> Matrix:
    needs = any(m.requires_grad for m in inputs)
    out = Matrix._wrap(arr, needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].records.append(_Record(out, inputs, backward))
    return out


def const(arr) -> Matrix:
    return Matrix(arr)


# ---------------------------------------------------------------- primitives


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ConfigError(f"matmul shape mismatch {a.shape} x {b.shape}")
    A, B = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad
    return _record(A @ B, (a, b),
                   lambda g: (g @ B.T if ga else None, A.T @ g if gb else None))


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may be a 1xn row or nx1 column broadcast."""
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Matrix, b: Matrix) -> Matrix:
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product with row/column broadcasting of ``b``."""
    A, B = a.data, b.data
    sa, sb = a.shape, b.shape
    return _record(A * B, (a, b),
                   lambda g: (_unbroadcast(g * B, sa), _unbroadcast(g * A, sb)))


def scale(a: Matrix, c: float) -> Matrix:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def square(a: Matrix) -> Matrix:
    A = a.data
    return _record(A * A, (a,), lambda g: (2.0 * A * g,))


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Matrix) -> Matrix:
    shape = a.shape
    n = a.data.size
    return _record(np.array([[a.data.sum() / n]]), (a,),
                   lambda g: (np.full(shape, g[0, 0] / n),))


def mean_rows(a: Matrix) -> Matrix:
    """Column-wise mean over rows: (T x E) -> (1 x E)."""
    n = a.rows
    shape = a.shape
    return _record(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def softmax_rows(m: Matrix) -> Matrix:
    X = m.data
    e = np.exp(X - X.max(axis=1, keepdims=True))
    P = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (P * (g - (g * P).sum(axis=1, keepdims=True)),)

    return _record(P, (m,), back)


def logsumexp_rows(m: Matrix) -> Matrix:
    """(T x E) -> (T x 1)."""
    X = m.data
    mx = X.max(axis=1, keepdims=True)
    e = np.exp(X - mx)
    s = e.sum(axis=1, keepdims=True)
    P = e / s
    return _record(mx + np.log(s), (m,), lambda g: (P * g,))


def gelu(a: Matrix) -> Matrix:
    """tanh-approximated GELU."""
    X = a.data
    X2 = X * X
    t = np.tanh(_SQRT_2_OVER_PI * X * (1.0 + 0.044715 * X2))
    out = 0.5 * X * (1.0 + t)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * X2)
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du
        return (g * d,)

    return _record(out, (a,), back)


def take_rows(a: Matrix, idx: np.ndarray) -> Matrix:
    """Row gather ``a[idx]``; repeated indices accumulate in the backward."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), back)


def scatter_add_rows(n_rows: int, idx: np.ndarray, src: Matrix) -> Matrix:
    """Zero (n_rows x cols) matrix with ``src`` rows added at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows, src.cols))
    np.add.at(out, idx, src.data)
    return _record(out, (src,), lambda g: (g[idx],))


def take_along_rows(a: Matrix, cols: np.ndarray) -> Matrix:
    """Per-row column gather: out[t, j] = a[t, cols[t, j]]."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.rows)[:, None]
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (np.broadcast_to(rows, cols.shape), cols), g)
        return (out,)

    return _record(a.data[rows, cols], (a,), back)


def gather_elements(a: Matrix, rows: np.ndarray, cols: np.ndarray) -> Matrix:
    """Column vector of ``a[rows[i], cols[i]]``."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _record(a.data[rows, cols][:, None], (a,), back)


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    sizes = np.cumsum([p.rows for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=0))

    return _record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def normalize_rows(a: Matrix) -> Matrix:
    """Divide each row by its sum (entries assumed positive)."""
    A = a.data
    s = A.sum(axis=1, keepdims=True)
    out = A / s

    def back(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return _record(out, (a,), back)


def rmsnorm(x: Matrix, gain: Matrix, eps: float = 1e-6) -> Matrix:
    """Row-wise RMS normalisation times a (1 x H) gain."""
    X, G = x.data, gain.data
    h = X.shape[1]
    r = np.sqrt((X * X).mean(axis=1, keepdims=True) + eps)
    n = X / r
    out = n * G

    def back(g):
        gn = g * G
        gx = (gn - n * (gn * n).sum(axis=1, keepdims=True) / h) / r
        return (gx, (g * n).sum(axis=0, keepdims=True))

    return _record(out, (x, gain), back)


def causal_attention(q: Matrix, k: Matrix, v: Matrix, n_seq: int, seq_len: int) -> Matrix:
    """Single-head causal attention over ``n_seq`` packed sequences.

    Inputs are (n_seq*seq_len x d) with sequences stored contiguously.
    """
    d = q.cols
    Q = q.data.reshape(n_seq, seq_len, d)
    K = k.data.reshape(n_seq, seq_len, d)
    V = v.data.reshape(n_seq, seq_len, v.cols)
    inv = 1.0 / math.sqrt(d)
    S = np.matmul(Q, K.transpose(0, 2, 1)) * inv
    mask = np.triu(np.ones((seq_len, seq_len), dtype=bool), 1)
    S = np.where(mask, -np.inf, S)
    S = S - S.max(axis=2, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=2, keepdims=True)
    O = np.matmul(P, V)

    def back(g):
        G = g.reshape(n_seq, seq_len, -1)
        dV = np.matmul(P.transpose(0, 2, 1), G)
        dP = np.matmul(G, V.transpose(0, 2, 1))
        dS = P * (dP - (dP * P).sum(axis=2, keepdims=True)) * inv
        dQ = np.matmul(dS, K)
        dK = np.matmul(dS.transpose(0, 2, 1), Q)
        return (dQ.reshape(-1, d), dK.reshape(-1, d), dV.reshape(-1, V.shape[2]))

    return _record(O.reshape(-1, v.cols), (q, k, v), back)


def cross_entropy(logits: Matrix, targets: np.ndarray) -> Matrix:
    """Mean token cross-entropy (nats) of integer ``targets`` under ``logits``."""
    X = logits.data
    t = np.asarray(targets, dtype=np.intp)
    n = X.shape[0]
    mx = X.max(axis=1, keepdims=True)
    e = np.exp(X - mx)
    s = e.sum(axis=1, keepdims=True)
    logp = X[np.arange(n), t] - (mx[:, 0] + np.log(s[:, 0]))
    P = e / s

    def back(g):
        d = P.copy()
        d[np.arange(n), t] -= 1.0
        return (d * (g[0, 0] / n),)

    return _record(np.array([[-logp.mean()]]), (logits,), back)


# ---------------------------------------------------------------- oracle


def grad_check(f: Callable[[Matrix], Matrix], point: Matrix, epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ConfigError("epsilon must lie in (0, 1e-2]")
    x = Matrix(point.data, requires_grad=True)
    with GradTape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise GradCheckError("function value is not finite at the check point")
    analytic = tape.gradient(y, [x])[0]

    base = point.data.copy()
    worst = 0.0
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + epsilon
        fp = f(Matrix(base)).item()
        base[idx] = orig - epsilon
        fm = f(Matrix(base)).item()
        base[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"non-finite value while perturbing coordinate {idx}")
        numeric = (fp - fm) / (2 * epsilon)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative ints.

    Keys go through ``SeedSequence`` so (seed, layer, expert) style tuples
    give independent streams.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))
