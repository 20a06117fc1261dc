"""Unrolled gradient-descent transformers: builders, encoder/decoder and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..gp import GpSpec, TemporalKernel, TimeEmbeddings, build_embeddings
from ..score import GdPlan, alpha, build_plan, sigma2
from .blocks import (
    AttentionHead,
    AttentionLayer,
    MeanInjection,
    NonFiniteActivation,
    TransformerBlock,
    block_from_dict,
    weight_norm,
)
from .layout import Layout
from .mult import MULT_MODES, _Builder, build_mult_module, linear_ffn
from .trapezoid import build_trapezoid_heads

VARIANTS = ("relu", "softmax")


@dataclass
class UnrolledNet:
    layout: Layout
    blocks: list
    spec: GpSpec
    emb: TimeEmbeddings
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.meta["variant"]

    def eta(self, t: float) -> float:
        m = self.meta
        a2, s2 = float(alpha(t)) ** 2, float(sigma2(t))
        lo = a2 * max(m["g_min"], 0.0) * m["s_min"] + s2
        hi = a2 * m["g_max"] * m["s_max"] + s2
        return 2.0 / (lo + hi)

    def clip_radius(self, t: float) -> float:
        return 1.0 + self.meta["clip_const"] * self.meta["R0"] / math.sqrt(float(sigma2(t)))

    def to_dict(self) -> dict:
        sp_ = self.spec
        return {
            "layout": self.layout.as_dict(),
            "spec": {"d": sp_.d, "N": sp_.N, "nu": sp_.nu, "ell": sp_.ell, "kernel_mode": sp_.kernel_mode,
                     "r": sp_.r, "period": sp_.period, "sigma": sp_.sigma.tolist(), "mu": sp_.mu.tolist()},
            "meta": self.meta,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> UnrolledNet:
        s = d["spec"]
        spec = GpSpec(d=s["d"], N=s["N"], sigma=np.array(s["sigma"]), mu=np.array(s["mu"]), nu=s["nu"],
                      ell=s["ell"], kernel_mode=s["kernel_mode"], r=s["r"], period=s["period"])
        lay = d["layout"]
        layout = Layout(lay["d"], lay["d_e"], lay["softmax"])
        blocks = [block_from_dict(b) for b in d["blocks"]]
        return cls(layout, blocks, spec, build_embeddings(spec), dict(d["meta"]))

    @classmethod
    def load(cls, path) -> UnrolledNet:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- encoder / decoder -------------------------------------------------------


def encode(net: UnrolledNet, t: float, x: np.ndarray) -> np.ndarray:
    """Token state ``(D, B, N)`` for inputs ``x`` of shape ``(B, N d)`` or ``(N d,)``."""
    spec, lay = net.spec, net.layout
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != spec.dim:
        raise ValueError(f"expected inputs of length {spec.dim}, got {x.shape[-1]}")
    B = x.shape[0]
    Y = np.zeros((lay.D, B, spec.N))
    Y[lay.sl("x")] = x.reshape(B, spec.N, spec.d).transpose(2, 0, 1)
    Y[lay.sl("e")] = net.emb.e.T[:, None, :]
    a, s2 = float(alpha(t)), float(sigma2(t))
    Y[lay.phi("eta")] = net.eta(t)
    Y[lay.phi("alpha")] = a
    Y[lay.phi("sigma2")] = s2
    Y[lay.phi("alpha2")] = a * a
    Y[lay.idx("one")] = 1.0
    if lay.softmax:
        Y[lay.idx("idx")] = np.arange(1, spec.N + 1, dtype=np.float64)
    return Y


def decode(net: UnrolledNet, Y: np.ndarray, t: float | None = None, clip: bool = True) -> np.ndarray:
    """Read the score slot as ``(B, N d)``; clip each row to norm ``R_t`` if asked."""
    s = Y[net.layout.sl("s")].transpose(1, 2, 0).reshape(Y.shape[1], -1)
    if clip:
        R = net.clip_radius(t)
        norm = np.linalg.norm(s, axis=1, keepdims=True)
        factor = np.where(norm > R, R / np.where(norm > 0, norm, 1.0), 1.0)
        s = s * factor
    return s


def run_blocks(net: UnrolledNet, Y: np.ndarray) -> np.ndarray:
    for k, block in enumerate(net.blocks):
        Y = block(Y)
        if not np.all(np.isfinite(Y)):
            raise NonFiniteActivation(f"non-finite activation after block {k}")
    return Y


def evaluate(net: UnrolledNet, t: float, x: np.ndarray, clip: bool = True, chunk: int = 512) -> np.ndarray:
    """Score estimate for a batch ``(B, N d)``; a single vector returns a vector."""
    if t < net.meta["t0"] * (1 - 1e-12):
        raise ValueError(f"net was built for t >= {net.meta['t0']}, got {t}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    parts = []
    for a in range(0, len(xb), chunk):
        Y = run_blocks(net, encode(net, t, xb[a:a + chunk]))
        parts.append(decode(net, Y, t, clip))
    out = np.concatenate(parts, axis=0) if parts else np.empty((0, net.spec.dim))
    return out[0] if single else out


# -- builders ----------------------------------------------------------------


def _bounds(spec: GpSpec, plan: GdPlan, t0: float, x_bound: float | None):
    """Magnitude bounds for every multiplication input, valid for all ``t >= t0``."""
    mu_max = float(np.max(np.abs(spec.mu)))
    if x_bound is None:
        x_bound = mu_max + 8.0 * math.sqrt(max(1.0, float(np.max(np.diag(spec.sigma)))))
    r_inf = x_bound + mu_max
    r_two = math.sqrt(spec.dim) * r_inf
    s2_0 = float(sigma2(t0))
    s_bound = 1.1 * 2.0 * r_two / s2_0
    lam_max = plan.g_max * plan.s_max + 1.0
    eta_max = max(plan.eta(t0), 1.0)
    grad_bound = 1.1 * (lam_max * s_bound + r_inf)
    return {"x_bound": x_bound, "mu": max(1.0, mu_max), "s": max(1.0, s_bound),
            "grad": max(eta_max, grad_bound), "eta_max": eta_max}


def _mult_eps(eps: float, eta_max: float, spec: GpSpec) -> float:
    return eps / (eta_max * float(np.linalg.norm(spec.sigma)) * spec.N**1.5 * math.sqrt(spec.d) * 6.0)


def _prefix(lay, spec, bounds, eps_mult, mode):
    blocks = [TransformerBlock(None, MeanInjection(np.array(spec.mu), (lay.sl("mu").start, lay.sl("mu").stop)))]
    blocks += build_mult_module(lay, lay.phi("alpha"), "mu", "mu", bounds["mu"], eps_mult, mode,
                                replace=True, name="mean_scale")
    return blocks


def _first_step(lay, bounds, eps_mult, mode):
    """``s = -eta (x - alpha mu)``."""
    blocks = [TransformerBlock(None, linear_ffn(lay, [("buf_c", "x", -1.0), ("buf_c", "mu", 1.0)], "grad0"))]
    blocks += build_mult_module(lay, lay.phi("eta"), "buf_c", "buf_a", bounds["grad"], eps_mult, mode,
                                name="step0")
    blocks.append(TransformerBlock(None, linear_ffn(
        lay, [("s", "buf_a", 1.0), ("buf_a", "buf_a", -1.0), ("buf_c", "buf_c", -1.0)], "update0")))
    return blocks


def _combine(lay, k):
    """``buf_c <- -(buf_c + buf_b + x - mu)``, clearing ``buf_a`` and ``buf_b``."""
    return linear_ffn(lay, [("buf_c", "buf_c", -2.0), ("buf_c", "buf_b", -1.0), ("buf_c", "x", -1.0),
                            ("buf_c", "mu", 1.0), ("buf_a", "buf_a", -1.0), ("buf_b", "buf_b", -1.0)],
                      f"combine{k}")


def _step(lay, k, bounds, eps_mult, mode):
    blocks = build_mult_module(lay, lay.phi("eta"), "buf_c", "buf_a", bounds["grad"], eps_mult, mode,
                               name=f"step{k}")
    blocks.append(TransformerBlock(None, linear_ffn(
        lay, [("s", "buf_a", 1.0), ("buf_a", "buf_a", -1.0), ("buf_c", "buf_c", -1.0)], f"update{k}")))
    return blocks


def _scale_inputs(lay, k, bounds, eps_mult, mode):
    blocks = build_mult_module(lay, lay.phi("alpha2"), "s", "buf_a", bounds["s"], eps_mult, mode,
                               name=f"a2s{k}")
    blocks += build_mult_module(lay, lay.phi("sigma2"), "s", "buf_b", bounds["s"], eps_mult, mode,
                                name=f"s2s{k}")
    return blocks


def _meta(variant, spec, plan, t0, eps, eps_mult, mode, bounds, clip_const, heads):
    dim = spec.dim
    s0 = math.sqrt(float(sigma2(t0)))
    log_term = math.log(dim / (eps * s0))
    return {
        "variant": variant, "t0": float(t0), "eps": float(eps), "eps_mult": float(eps_mult),
        "mult_mode": mode, "J": plan.J, "K": plan.K, "kappa_t0": plan.kappa(t0), "heads": heads,
        "g_min": plan.g_min, "g_max": plan.g_max, "s_min": plan.s_min, "s_max": plan.s_max,
        "clip_const": float(clip_const), "R0": math.sqrt(dim) * max(log_term, 1.0),
        "bounds": bounds, "L_theory": plan.kappa(t0) * log_term**2,
    }


def build_relu_net(
    spec: GpSpec,
    kernel: TemporalKernel,
    t0: float,
    eps: float,
    mult_mode: str = "constructed",
    J: int | None = None,
    K: int | None = None,
    x_bound: float | None = None,
    clip_const: float = 4.0,
) -> UnrolledNet:
    """ReLU-attention net: ``K`` unrolled steps, ``4 J`` heads per attention layer.

    ``J`` and ``K`` default to the truncation and iteration plan at ``t0``,
    which also covers every later time.
    """
    if mult_mode not in MULT_MODES:
        raise ValueError(f"mult_mode must be one of {MULT_MODES}")
    lay = Layout(spec.d)
    emb = build_embeddings(spec)
    plan = build_plan(spec, kernel, t0, eps, J=J, K=K)
    bounds = _bounds(spec, plan, t0, x_bound)
    eps_mult = _mult_eps(eps, bounds["eta_max"], spec)

    heads = []
    for m in range(plan.J):
        heads += build_trapezoid_heads(lay, m, emb, float(kernel.gamma_diag[m]), spec.sigma)
    attn = AttentionLayer(heads)

    blocks = _prefix(lay, spec, bounds, eps_mult, mult_mode)
    blocks += _first_step(lay, bounds, eps_mult, mult_mode)
    for k in range(1, plan.K):
        blocks += _scale_inputs(lay, k, bounds, eps_mult, mult_mode)
        blocks.append(TransformerBlock(attn, _combine(lay, k)))
        blocks += _step(lay, k, bounds, eps_mult, mult_mode)
    meta = _meta("relu", spec, plan, t0, eps, eps_mult, mult_mode, bounds, clip_const, len(heads))
    return UnrolledNet(lay, blocks, spec, emb, meta)


def softmax_head(lay: Layout, spec: GpSpec) -> AttentionHead:
    """Scores ``(2 e_i^T e_j - 2 r^2) / ell = -||e_i - e_j||^2 / ell``; values ``Sigma buf_a``."""
    D = lay.D
    qk = sp.lil_matrix((D, D))
    for r in lay.rows("e"):
        qk[r, r] = 2.0 / spec.ell
    qk[lay.idx("one"), lay.idx("one")] = -2.0 * spec.r**2 / spec.ell
    v = sp.lil_matrix((D, D))
    for a, ra in enumerate(lay.rows("buf_c")):
        for b, rb in enumerate(lay.rows("buf_a")):
            if spec.sigma[a, b] != 0.0:
                v[ra, rb] = spec.sigma[a, b]
    return AttentionHead(qk.tocsr(), v.tocsr(), "softmax")


def normalizer_ffn(lay: Layout, gamma_diag: np.ndarray, m: int | None = None):
    """Ramp network ``D_i = 1 + sum_k g(k) (1{i >= k+1} + 1{i <= N-k})`` read from the index slot."""
    N = len(gamma_diag)
    m = N - 1 if m is None else m
    b = _Builder(lay.D)
    i_row, out = lay.idx("idx"), lay.idx("dhat")
    for k in range(1, m + 1):
        g = float(gamma_diag[k])
        b.unit([(i_row, 1.0)], -k, [(out, g)])
        b.unit([(i_row, 1.0)], -k - 1.0, [(out, -g)])
        b.unit([(i_row, -1.0)], N - k + 1.0, [(out, g)])
        b.unit([(i_row, -1.0)], float(N - k), [(out, -g)])
    b.b_out[out] = 1.0
    return b.build("normalizer")


def build_softmax_net(
    spec: GpSpec,
    kernel: TemporalKernel,
    t0: float,
    eps: float,
    mult_mode: str = "constructed",
    K: int | None = None,
    x_bound: float | None = None,
    clip_const: float = 4.0,
) -> UnrolledNet:
    """Single softmax head per step, no truncation; needs the squared-exponential embedding kernel."""
    if spec.nu != 2.0 or spec.kernel_mode != "embedding":
        raise ValueError("softmax variant requires nu = 2 in embedding mode")
    if mult_mode not in MULT_MODES:
        raise ValueError(f"mult_mode must be one of {MULT_MODES}")
    lay = Layout(spec.d, softmax=True)
    emb = build_embeddings(spec)
    plan = build_plan(spec, kernel, t0, eps, J=spec.N, K=K)
    bounds = _bounds(spec, plan, t0, x_bound)
    bounds["dhat"] = max(float(spec.N), 1.1 * float(np.max(np.sum(np.abs(spec.sigma), axis=1))) * bounds["s"])
    eps_mult = _mult_eps(eps, bounds["eta_max"], spec)
    attn = AttentionLayer([softmax_head(lay, spec)])

    blocks = _prefix(lay, spec, bounds, eps_mult, mult_mode)
    blocks.append(TransformerBlock(None, normalizer_ffn(lay, kernel.gamma_diag)))
    blocks += _first_step(lay, bounds, eps_mult, mult_mode)
    for k in range(1, plan.K):
        blocks += _scale_inputs(lay, k, bounds, eps_mult, mult_mode)
        blocks.append(TransformerBlock(attn, None))
        blocks += build_mult_module(lay, lay.idx("dhat"), "buf_c", "buf_c", bounds["dhat"], eps_mult,
                                    mult_mode, replace=True, name=f"norm{k}")
        blocks.append(TransformerBlock(None, _combine(lay, k)))
        blocks += _step(lay, k, bounds, eps_mult, mult_mode)
    meta = _meta("softmax", spec, plan, t0, eps, eps_mult, mult_mode, bounds, clip_const, 1)
    return UnrolledNet(lay, blocks, spec, emb, meta)


def net_size_report(net: UnrolledNet) -> dict:
    """Actual architecture sizes next to the constant-free theoretical scalings."""
    norms = [weight_norm(w) for b in net.blocks for w in b.weights()]
    m = net.meta
    widths = [b.ffn.width for b in net.blocks if hasattr(b.ffn, "width")]
    return {
        "variant": m["variant"],
        "D": net.layout.D,
        "L": len(net.blocks),
        "M": max((b.n_heads for b in net.blocks), default=0),
        "B_norm": max(norms, default=0.0),
        "R_t0": net.clip_radius(m["t0"]),
        "ffn_width": max(widths, default=0),
        "J": m["J"],
        "K": m["K"],
        "D_theory": 9 * net.spec.d + net.layout.d_e + 5 + (2 if net.layout.softmax else 0),
        "M_theory": 4 * m["J"] if m["variant"] == "relu" else 1,
        "L_theory": m["L_theory"],
    }
