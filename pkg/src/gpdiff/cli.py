"""Command-line entry point: ``gpdiff <command> [options]``.

Exit status is 0 on success, 2 for invalid input and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import rng
from .config import RunManifest, file_digest, read_csv, spec_from_config, write_csv
from .diffusion import INTEGRATORS, DiffusionSchedule, GdScore, NonFiniteStateError, OracleScore, backward_sample, forward_marginal_sample
from .estimation import SWEEP_COLUMNS, error_vs_n_sweep, estimate_cov, estimate_kernel, kron_frob_distance, relative_error
from .gp import TemporalKernel, build_kernel, sample_gp
from .score import REPORT_COLUMNS, build_plan, error_report, oracle_score
from .unroll import build_relu_net, build_softmax_net, evaluate, net_size_report
from .unroll.blocks import MultRangeError, NonFiniteActivation


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, (int, str, np.integer)) else f"{float(v):.17g}" for v in row])
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _finish(manifest: RunManifest, outputs, anchor) -> None:
    for p in outputs:
        manifest.add_output(p)
    manifest.write(anchor)


def _probe_points(spec, kernel, t, n, seed):
    return forward_marginal_sample(spec, kernel, t, n, rng.seed_path(seed, rng.STREAM_PROBE,
                                                                     int(round(t * 1e9))))


def cmd_gen(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)
    data = sample_gp(spec, kernel, args.n, rng.seed_split(args.seed, rng.STREAM_DATA), args.workers)
    write_csv(args.out, data.reshape(args.n, -1))
    m = RunManifest("gen", spec, args.seed, {"n": args.n})
    _finish(m, [args.out], args.out)


def cmd_score_eval(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)
    rows = []
    for t in args.t:
        if t <= 0:
            raise ValueError("t must be positive")
        plan = build_plan(spec, kernel, t, args.eps)
        for x in _probe_points(spec, kernel, t, args.probes, args.seed):
            rows.append(error_report(plan, spec, kernel, t, x).row())
    _write_rows(args.out, REPORT_COLUMNS, rows)
    if args.out is not None:
        m = RunManifest("score-eval", spec, args.seed, {"t": args.t, "eps": args.eps, "probes": args.probes})
        _finish(m, [args.out], args.out)


def _build_net(spec, kernel, args):
    if args.variant == "relu":
        return build_relu_net(spec, kernel, args.t0, args.eps, args.mult)
    return build_softmax_net(spec, kernel, args.t0, args.eps, args.mult)


def cmd_unroll(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)
    net = _build_net(spec, kernel, args)
    plan = build_plan(spec, kernel, args.t0, args.eps, J=net.meta["J"], K=net.meta["K"])
    rows = []
    for t in args.t:
        if t < args.t0:
            raise ValueError(f"evaluation time {t} is below t0 = {args.t0}")
        xs = _probe_points(spec, kernel, t, args.probes, args.seed)
        s_net = evaluate(net, t, xs)
        s_true = oracle_score(spec, kernel, t, xs)
        for x, a, b in zip(xs, s_net, s_true):
            rep = error_report(plan, spec, kernel, t, x, check=False)
            rows.append([t, net.meta["J"], net.meta["K"], rep.kappa, float(np.linalg.norm(a - b)),
                         rep.bound_e1, rep.bound_e2, rep.contraction_measured])
    _write_rows(args.out, REPORT_COLUMNS, rows)
    outputs = []
    if args.out is not None:
        outputs.append(args.out)
    if args.size_out is not None:
        Path(args.size_out).write_text(json.dumps(net_size_report(net), indent=2, sort_keys=True) + "\n")
        outputs.append(args.size_out)
    if args.net_out is not None:
        net.save(args.net_out)
        outputs.append(args.net_out)
    if outputs:
        m = RunManifest("unroll", spec, args.seed, {"variant": args.variant, "mult": args.mult, "t0": args.t0,
                                                     "eps": args.eps, "t": args.t, "probes": args.probes})
        _finish(m, outputs, outputs[0])


def _score_fn(name, spec, kernel, schedule, eps):
    if name == "oracle":
        return OracleScore(spec, kernel)
    if name == "identity":
        return OracleScore(spec, TemporalKernel.identity(spec.N))
    if name == "gd":
        return GdScore.at_early_stop(spec, kernel, schedule.t0, eps)
    net = (build_relu_net if name == "relu" else build_softmax_net)(spec, kernel, schedule.t0, eps)

    class _NetScore:
        tag = f"unrolled_{name}"
        dim = spec.dim

        def __call__(self, x, t):
            return evaluate(net, t, x)

    return _NetScore()


def cmd_sample(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)
    T = math.log(args.n) if args.T is None else args.T
    schedule = DiffusionSchedule(T=T, t0=args.t0, steps=args.steps)
    score = _score_fn(args.score, spec, kernel, schedule, args.eps)
    out = backward_sample(schedule, score, args.n, rng.seed_split(args.seed, rng.STREAM_BACKWARD),
                          args.integrator, workers=args.workers)
    write_csv(args.out, out)
    params = {"n": args.n, "score": args.score, "integrator": args.integrator, "eps": args.eps,
              "schedule": schedule.as_dict()}
    _finish(RunManifest("sample", spec, args.seed, params), [args.out], args.out)


def cmd_estimate(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)
    gen = read_csv(args.batch)
    if gen.shape[1] != spec.dim:
        raise ValueError(f"batch has {gen.shape[1]} columns, expected {spec.dim}")
    n = len(gen)
    if args.truth is not None:
        truth = read_csv(args.truth)
    else:
        truth = sample_gp(spec, kernel, n, rng.seed_split(args.seed, rng.STREAM_TRUTH)).reshape(n, -1)
    cov = estimate_cov(gen, spec.N, spec.d)
    g_hat = estimate_kernel(cov, spec.sigma)
    write_csv(args.out_gamma, g_hat)
    summary = {
        "n": n,
        "epsilon": relative_error(gen, truth, spec, kernel),
        "raw_frob": kron_frob_distance(g_hat, cov.pooled_sigma, kernel.matrix, spec.sigma),
        "sigma_hat": "pooled mean of diagonal blocks",
        "batch_sha256": file_digest(args.batch),
    }
    Path(args.out_summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    m = RunManifest("estimate", spec, args.seed, {"batch": str(args.batch), "truth": args.truth})
    _finish(m, [args.out_gamma, args.out_summary], args.out_summary)


def cmd_bench(args) -> None:
    spec = spec_from_config(args.config)
    kernel = build_kernel(spec)

    def schedule_for(n):
        return DiffusionSchedule(T=math.log(n), t0=args.t0, steps=args.steps)

    score = _score_fn(args.score, spec, kernel, schedule_for(args.n_list[0]), args.eps)
    rows = []
    for s in args.seeds:
        rows += error_vs_n_sweep(score, spec, kernel, args.n_list, s, schedule_for, args.workers)
    _write_rows(args.out, SWEEP_COLUMNS, rows)
    params = {"n_list": args.n_list, "seeds": args.seeds, "score": args.score, "t0": args.t0, "steps": args.steps}
    _finish(RunManifest("bench", spec, args.seeds[0], params), [args.out], args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="key = value GP configuration file")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="draw GP sequences")
    common(g)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("score-eval", help="gradient-descent score error against its bound")
    common(s)
    s.add_argument("--t", type=_floats, required=True, help="comma-separated times")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--probes", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score_eval)

    u = sub.add_parser("unroll", help="build and probe an unrolled transformer")
    common(u)
    u.add_argument("--variant", choices=["relu", "softmax"], default="relu")
    u.add_argument("--mult", choices=["constructed", "oracle"], default="constructed")
    u.add_argument("--t0", type=float, default=0.1)
    u.add_argument("--eps", type=float, default=1e-3)
    u.add_argument("--t", type=_floats, default=[0.1, 0.5, 1.0])
    u.add_argument("--probes", type=int, default=4)
    u.add_argument("--out")
    u.add_argument("--size-out")
    u.add_argument("--net-out")
    u.set_defaults(func=cmd_unroll)

    sm = sub.add_parser("sample", help="backward diffusion sampling")
    common(sm)
    sm.add_argument("--n", type=int, required=True)
    sm.add_argument("--T", type=float, default=None, help="terminal time (default log n)")
    sm.add_argument("--t0", type=float, default=1e-3)
    sm.add_argument("--steps", type=int, default=500)
    sm.add_argument("--integrator", choices=INTEGRATORS, default="ddpm_exp")
    sm.add_argument("--score", choices=["oracle", "identity", "gd", "relu", "softmax"], default="oracle")
    sm.add_argument("--eps", type=float, default=None, help="score tolerance (default 1/n)")
    sm.add_argument("--workers", type=int, default=1)
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_sample)

    e = sub.add_parser("estimate", help="kernel estimate and relative error of a batch")
    common(e)
    e.add_argument("--batch", required=True)
    e.add_argument("--truth", default=None, help="reference batch (default: fresh draw of equal size)")
    e.add_argument("--out-gamma", required=True)
    e.add_argument("--out-summary", required=True)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="relative error versus sample size")
    common(b, seed=False)
    b.add_argument("--n-list", type=_ints, default=[500, 2000, 8000])
    b.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    b.add_argument("--score", choices=["oracle", "identity", "gd"], default="oracle")
    b.add_argument("--eps", type=float, default=1e-4)
    b.add_argument("--t0", type=float, default=1e-3)
    b.add_argument("--steps", type=int, default=500)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "eps", 0) is None:
        args.eps = 1.0 / args.n
    try:
        args.func(args)
    except (MultRangeError, NonFiniteActivation, NonFiniteStateError, MemoryError) as exc:
        print(f"gpdiff: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"gpdiff: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"gpdiff: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
