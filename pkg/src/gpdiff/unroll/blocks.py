"""Residual attention and feed-forward layers with sparse weights.

The token state is held as an array of shape ``(D, B, N)``: rows are slots,
``B`` indexes independent inputs and ``N`` the sequence positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class MultRangeError(ValueError):
    """A multiplication input left the range the module was built for."""


class NonFiniteActivation(FloatingPointError):
    pass


def _csr(a, shape=None) -> sp.csr_matrix:
    m = sp.csr_matrix(a, shape=shape, dtype=np.float64)
    m.eliminate_zeros()
    return m


def triplets(m: sp.spmatrix) -> list:
    c = sp.coo_matrix(m)
    return [c.shape[0], c.shape[1], c.row.tolist(), c.col.tolist(), c.data.tolist()]


def from_triplets(t) -> sp.csr_matrix:
    n, k, rows, cols, vals = t
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, k), dtype=np.float64)


class _Sub:
    """Dense restriction of a sparse matrix to its nonzero rows and columns."""

    def __init__(self, m: sp.csr_matrix):
        c = sp.coo_matrix(m)
        self.rows = np.unique(c.row)
        self.cols = np.unique(c.col)
        self.mat = m[self.rows][:, self.cols].toarray()

    def apply(self, Y):
        r, B, N = len(self.cols), Y.shape[1], Y.shape[2]
        return (self.mat @ Y[self.cols].reshape(r, B * N)).reshape(len(self.rows), B, N)


@dataclass
class AttentionHead:
    """One head; ``qk`` is the product ``Q^T K`` and ``activation`` is relu or softmax."""

    qk: sp.csr_matrix
    v: sp.csr_matrix
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.qk, self.v = _csr(self.qk), _csr(self.v)
        self._qk, self._v = _Sub(self.qk), _Sub(self.v)

    def scores(self, Y):
        """``S[b, j, i] = y_j^T (Q^T K) y_i`` after the activation."""
        q = self._qk
        left = Y[q.rows]
        right = q.apply(Y)
        S = np.einsum("pbj,pbi->bji", left, right)
        if self.activation == "relu":
            return np.maximum(S, 0.0)
        S = S - S.max(axis=1, keepdims=True)
        np.exp(S, out=S)
        return S / S.sum(axis=1, keepdims=True)

    def contribution(self, Y):
        """Rows touched and their increments ``V Y act(S)``."""
        A = self.scores(Y)
        VY = self._v.apply(Y)
        return self._v.rows, np.einsum("pbj,bji->pbi", VY, A)

    def weights(self):
        return [self.qk, self.v]

    def to_dict(self):
        return {"activation": self.activation, "qk": triplets(self.qk), "v": triplets(self.v)}


@dataclass
class AttentionLayer:
    heads: list

    def __call__(self, Y):
        out = Y.copy()
        for h in self.heads:
            rows, inc = h.contribution(Y)
            out[rows] += inc
        return out

    def weights(self):
        return [w for h in self.heads for w in h.weights()]

    def to_dict(self):
        return {"heads": [h.to_dict() for h in self.heads]}


@dataclass
class FeedForward:
    """``Y + W_out relu(W_in Y + b_in) + b_out`` applied column-wise."""

    w_in: sp.csr_matrix
    b_in: np.ndarray
    w_out: sp.csr_matrix
    b_out: np.ndarray
    name: str = "ffn"

    def __post_init__(self):
        self.w_in, self.w_out = _csr(self.w_in), _csr(self.w_out)
        self.b_in = np.asarray(self.b_in, dtype=np.float64)
        self.b_out = np.asarray(self.b_out, dtype=np.float64)

    @property
    def width(self) -> int:
        return self.w_in.shape[0]

    def __call__(self, Y):
        D, B, N = Y.shape
        flat = Y.reshape(D, B * N)
        h = self.w_in @ flat
        h += self.b_in[:, None]
        np.maximum(h, 0.0, out=h)
        out = flat + self.w_out @ h
        out += self.b_out[:, None]
        return out.reshape(D, B, N)

    def weights(self):
        return [self.w_in, self.w_out, self.b_in, self.b_out]

    def to_dict(self):
        return {"kind": "ffn", "name": self.name, "w_in": triplets(self.w_in),
                "b_in": self.b_in.tolist(), "w_out": triplets(self.w_out), "b_out": self.b_out.tolist()}


@dataclass
class GuardedFeedForward(FeedForward):
    """Feed-forward layer that first checks its multiplication inputs lie in ``[-bound, bound]``."""

    guard_rows: tuple = ()
    bound: float = np.inf

    def __call__(self, Y):
        worst = float(np.max(np.abs(Y[list(self.guard_rows)]))) if len(self.guard_rows) else 0.0
        if worst > self.bound:
            raise MultRangeError(f"{self.name}: input magnitude {worst:.6g} exceeds bound {self.bound:.6g}")
        return super().__call__(Y)

    def to_dict(self):
        d = super().to_dict()
        d.update(kind="guarded_ffn", guard_rows=list(self.guard_rows), bound=self.bound)
        return d


@dataclass
class ExactMult:
    """Exact ``dst (+)= Y[w] * Y[src]``; stands in for the ReLU product network."""

    w_row: int
    src: tuple  # (start, stop)
    dst: tuple
    replace: bool = False
    name: str = "mult"

    def __call__(self, Y):
        out = Y.copy()
        prod = Y[self.w_row] * Y[slice(*self.src)]
        if self.replace:
            out[slice(*self.dst)] = prod
        else:
            out[slice(*self.dst)] += prod
        return out

    def weights(self):
        return []

    def to_dict(self):
        return {"kind": "exact_mult", "name": self.name, "w_row": self.w_row, "src": list(self.src),
                "dst": list(self.dst), "replace": self.replace}


@dataclass
class MeanInjection:
    """Writes the per-position mean into its slot (lookup realisation of the mean network)."""

    mu: np.ndarray  # (N, d)
    dst: tuple
    name: str = "mean"

    def __call__(self, Y):
        out = Y.copy()
        out[slice(*self.dst)] = self.mu.T[:, None, :]
        return out

    def weights(self):
        return []

    def to_dict(self):
        return {"kind": "mean", "name": self.name, "mu": np.asarray(self.mu).tolist(), "dst": list(self.dst)}


@dataclass
class TransformerBlock:
    """``ffn(attn(Y))``; either part may be ``None`` (identity)."""

    attn: AttentionLayer | None = None
    ffn: object = None

    def __call__(self, Y):
        if self.attn is not None:
            Y = self.attn(Y)
        if self.ffn is not None:
            Y = self.ffn(Y)
        return Y

    @property
    def n_heads(self) -> int:
        return 0 if self.attn is None else len(self.attn.heads)

    def weights(self):
        w = [] if self.attn is None else self.attn.weights()
        return w + ([] if self.ffn is None else self.ffn.weights())

    def to_dict(self):
        return {"attn": None if self.attn is None else self.attn.to_dict(),
                "ffn": None if self.ffn is None else self.ffn.to_dict()}


def block_from_dict(d) -> TransformerBlock:
    attn = None
    if d["attn"] is not None:
        attn = AttentionLayer([AttentionHead(from_triplets(h["qk"]), from_triplets(h["v"]), h["activation"])
                               for h in d["attn"]["heads"]])
    f = d["ffn"]
    ffn = None
    if f is not None:
        kind = f["kind"]
        if kind in ("ffn", "guarded_ffn"):
            args = (from_triplets(f["w_in"]), np.array(f["b_in"]), from_triplets(f["w_out"]),
                    np.array(f["b_out"]), f["name"])
            if kind == "ffn":
                ffn = FeedForward(*args)
            else:
                ffn = GuardedFeedForward(*args, guard_rows=tuple(f["guard_rows"]), bound=float(f["bound"]))
        elif kind == "exact_mult":
            ffn = ExactMult(f["w_row"], tuple(f["src"]), tuple(f["dst"]), f["replace"], f["name"])
        elif kind == "mean":
            ffn = MeanInjection(np.array(f["mu"]), tuple(f["dst"]), f["name"])
        else:
            raise ValueError(f"unknown block kind {kind!r}")
    return TransformerBlock(attn, ffn)


def weight_norm(w) -> float:
    if sp.issparse(w):
        return float(np.sqrt(np.sum(sp.csr_matrix(w).data ** 2)))
    return float(np.linalg.norm(w))
