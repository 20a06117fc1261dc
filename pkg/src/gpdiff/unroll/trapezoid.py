"""Four-head ReLU attention group selecting one lag ``|i - j| = m``.

With ``u = e_i^T e_j - r^2 + f(m)^2 / 2 = (f(m)^2 - f(|i-j|)^2) / 2`` the
group computes::

    psi(u) = 8/D [relu(u + D/4) - relu(u + D/8) - relu(u - D/8) + relu(u - D/4)]

which is 1 for ``|u| <= D/8`` and 0 for ``|u| >= D/4``.  Since consecutive
squared distances differ by at least ``D``, ``psi`` is exactly the lag
indicator on integer index pairs.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from ..gp import TimeEmbeddings
from .blocks import AttentionHead
from .layout import Layout

OFFSETS = (Fraction(1, 4), Fraction(1, 8), Fraction(-1, 8), Fraction(-1, 4))
SIGNS = (1, -1, -1, 1)


def _biases(emb: TimeEmbeddings, m: int):
    base = -emb.r * emb.r + 0.5 * emb.f2[m]
    return [base + float(o) * emb.delta for o in OFFSETS]


def build_trapezoid_heads(
    layout: Layout,
    m: int,
    emb: TimeEmbeddings,
    gamma_m: float,
    sigma: np.ndarray,
    src: str = "buf_a",
    dst: str = "buf_c",
) -> list[AttentionHead]:
    """Heads adding ``gamma_m * psi_m(e_i^T e_j) * Sigma y_j[src]`` into ``y_i[dst]``."""
    if not emb.delta > 0:
        raise ValueError("minimum embedding gap must be positive")
    if not 0 <= m < len(emb.f2):
        raise ValueError(f"lag {m} out of range")
    D = layout.D
    e_rows = list(layout.rows("e"))
    one = layout.idx("one")
    heads = []
    for bias, sign in zip(_biases(emb, m), SIGNS):
        qk = sp.lil_matrix((D, D))
        for r in e_rows:
            qk[r, r] = 1.0
        qk[one, one] = bias
        v = sp.lil_matrix((D, D))
        block = sign * (8.0 / emb.delta) * gamma_m * np.asarray(sigma)
        for a, ra in enumerate(layout.rows(dst)):
            for b, rb in enumerate(layout.rows(src)):
                if block[a, b] != 0.0:
                    v[ra, rb] = block[a, b]
        heads.append(AttentionHead(qk.tocsr(), v.tocsr(), "relu"))
    return heads


def psi_float(emb: TimeEmbeddings, m: int) -> np.ndarray:
    """Trapezoid values for all index pairs in double precision."""
    G = emb.gram()
    out = np.zeros_like(G)
    for bias, sign in zip(_biases(emb, m), SIGNS):
        out += sign * np.maximum(G + bias, 0.0)
    return out * (8.0 / emb.delta)


def psi_exact(emb: TimeEmbeddings, ms=None) -> dict:
    """Trapezoid values in exact rational arithmetic, as integer matrices.

    The stored embeddings, ``f(m)^2``, ``r`` and the gap are taken at their
    exact binary values; every later operation is exact.  Returns
    ``{m: N x N object array}`` whose entries are the Python ints 0 or 1
    when the construction is exact (any other value would be returned
    as a :class:`Fraction`).
    """
    N = emb.e.shape[0]
    ms = range(N) if ms is None else ms
    vals = [Fraction(float(v)) for v in np.ravel(emb.e)]
    extra = [Fraction(float(v)) for v in emb.f2] + [Fraction(emb.r), Fraction(emb.delta)]
    # Common power-of-two scale turns every quantity (and the products) into integers.
    den = max(f.denominator for f in vals + extra)
    scale = den * den * 8
    E = [[int(Fraction(float(v)) * den) for v in row] for row in emb.e]
    gram = [[sum(a * b for a, b in zip(E[i], E[j])) * 8 for j in range(N)] for i in range(N)]
    r2 = int(Fraction(emb.r) ** 2 * scale)
    delta = int(Fraction(emb.delta) * scale)
    out = {}
    for m in ms:
        base = -r2 + int(Fraction(float(emb.f2[m])) * scale) // 2
        offs = [base + int(o * delta) for o in OFFSETS]
        mat = np.empty((N, N), dtype=object)
        for i in range(N):
            gi = gram[i]
            for j in range(N):
                g = gi[j]
                acc = 0
                for off, sign in zip(offs, SIGNS):
                    u = g + off
                    if u > 0:
                        acc += sign * u
                val = Fraction(8 * acc, delta)
                mat[i, j] = int(val) if val.denominator == 1 else val
        out[m] = mat
    return out
