"""Feed-forward building blocks: linear slot updates and the ReLU product module.

The product uses ``w x = B^2 (a^2 - b^2)`` with ``a = |x + w| / 2B`` and
``b = |x - w| / 2B`` in ``[0, 1]``.  Squares are approximated by
``f_m(u) = u - sum_{s<=m} g_s(u) / 4^s``, where ``g_s`` is the ``s``-fold
tent map; ``0 <= f_m(u) - u^2 <= 2^(-2m-2)`` on ``[0, 1]``.  Each level is
one feed-forward layer whose hidden units are ``relu(z)``, ``relu(z - 1/2)``
and ``relu(z - 1)``.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .blocks import ExactMult, FeedForward, GuardedFeedForward, TransformerBlock
from .layout import Layout

MULT_MODES = ("constructed", "oracle")


class _Builder:
    """Accumulates hidden units of one feed-forward layer as sparse triplets."""

    def __init__(self, D: int):
        self.D = D
        self.in_r, self.in_c, self.in_v = [], [], []
        self.out_r, self.out_c, self.out_v = [], [], []
        self.b_in = []
        self.b_out = np.zeros(D)

    def unit(self, inputs, bias=0.0, outputs=()):
        """Add ``relu(sum c * y[row] + bias)`` feeding ``y[row] += w * unit``."""
        h = len(self.b_in)
        self.b_in.append(bias)
        for row, c in inputs:
            self.in_r.append(h), self.in_c.append(row), self.in_v.append(c)
        for row, w in outputs:
            self.out_r.append(row), self.out_c.append(h), self.out_v.append(w)
        return h

    def linear(self, src_row, outputs):
        """Pass ``y[src_row]`` linearly through a ``relu(v) - relu(-v)`` pair."""
        self.unit([(src_row, 1.0)], 0.0, outputs)
        self.unit([(src_row, -1.0)], 0.0, [(r, -w) for r, w in outputs])

    def build(self, name, cls=FeedForward, **kw):
        H = len(self.b_in)
        w_in = sp.csr_matrix((self.in_v, (self.in_r, self.in_c)), shape=(H, self.D))
        w_out = sp.csr_matrix((self.out_v, (self.out_r, self.out_c)), shape=(self.D, H))
        return cls(w_in, np.array(self.b_in), w_out, self.b_out.copy(), name, **kw)


def linear_ffn(layout: Layout, terms, name: str = "linear") -> FeedForward:
    """Feed-forward layer performing ``dst += coef * src`` for each ``(dst, src, coef)`` slot triple.

    All reads see the layer input, so ``(c, c, -1)`` clears slot ``c`` exactly.
    """
    b = _Builder(layout.D)
    by_src = {}
    for dst, src, coef in terms:
        by_src.setdefault(src, []).append((dst, coef))
    for src, outs in by_src.items():
        for k, row in enumerate(layout.rows(src)):
            b.linear(row, [(layout.idx(dst, k), coef) for dst, coef in outs])
    return b.build(name)


def mult_levels(bound: float, eps: float) -> int:
    """Smallest ``m`` with ``bound^2 2^(-2m-2) <= eps``."""
    return max(0, math.ceil(math.log2(bound * bound / eps) / 2.0 - 1.0))


def build_mult_module(
    layout: Layout,
    w_row: int,
    src: str,
    dst: str,
    bound: float,
    eps: float,
    mode: str = "constructed",
    replace: bool = False,
    levels: int | None = None,
    name: str = "mult",
) -> list[TransformerBlock]:
    """Blocks computing ``dst (+)= y[w_row] * src`` entrywise with sup error ``<= eps``.

    ``replace=True`` overwrites ``dst`` instead of accumulating.  All blocks
    have trivial attention.  In ``constructed`` mode the first layer raises
    :class:`MultRangeError` if an input exceeds ``bound``.
    """
    if mode == "oracle":
        s, d = layout.sl(src), layout.sl(dst)
        return [TransformerBlock(None, ExactMult(w_row, (s.start, s.stop), (d.start, d.stop), replace, name))]
    if mode != "constructed":
        raise ValueError(f"mult mode must be one of {MULT_MODES}")
    if bound <= 0 or eps <= 0:
        raise ValueError("bound and eps must be positive")
    m = mult_levels(bound, eps) if levels is None else levels
    n = layout.slots[src][1]
    if layout.slots[dst][1] != n or n > layout.d:
        raise ValueError("source and target slots must have equal size <= d")
    base = layout.slots["mult"][0]
    za = [base + k for k in range(n)]
    zb = [base + layout.d + k for k in range(n)]
    acc = [base + 2 * layout.d + k for k in range(n)]
    xs, ys = list(layout.rows(src)), list(layout.rows(dst))
    B = float(bound)
    blocks = []

    setup = _Builder(layout.D)
    for k in range(n):
        x = xs[k]
        for sgn in (1.0, -1.0):
            setup.unit([(x, sgn), (w_row, sgn)], 0.0, [(za[k], 1.0 / (2 * B)), (acc[k], B / 2)])
            setup.unit([(x, sgn), (w_row, -sgn)], 0.0, [(zb[k], 1.0 / (2 * B)), (acc[k], -B / 2)])
    blocks.append(setup.build(f"{name}.setup", GuardedFeedForward, guard_rows=tuple(xs) + (w_row,), bound=B))

    for s in range(1, m + 1):
        lev = _Builder(layout.D)
        scale = B * B / 4.0**s
        for k in range(n):
            for z, sgn in ((za[k], -1.0), (zb[k], 1.0)):
                # z <- g(z) = 2 r0 - 4 r1 + 2 r2, so dz = r0 - 4 r1 + 2 r2 for z >= 0.
                lev.unit([(z, 1.0)], 0.0, [(z, 1.0), (acc[k], sgn * 2 * scale)])
                lev.unit([(z, 1.0)], -0.5, [(z, -4.0), (acc[k], -sgn * 4 * scale)])
                lev.unit([(z, 1.0)], -1.0, [(z, 2.0), (acc[k], sgn * 2 * scale)])
        blocks.append(lev.build(f"{name}.level{s}"))

    fin = _Builder(layout.D)
    for k in range(n):
        fin.linear(acc[k], [(ys[k], 1.0), (acc[k], -1.0)])
        fin.linear(za[k], [(za[k], -1.0)])
        fin.linear(zb[k], [(zb[k], -1.0)])
        if replace:
            fin.linear(ys[k], [(ys[k], -1.0)])
    blocks.append(fin.build(f"{name}.finalize"))
    return [TransformerBlock(None, f) for f in blocks]


def apply_blocks(blocks, Y):
    for b in blocks:
        Y = b(Y)
    return Y
