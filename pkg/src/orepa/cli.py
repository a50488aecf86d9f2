"""Command-line surface: squeeze, verify, gradcheck, dynamics, bench,
train-toy, analyze.

Exit codes: 0 pass, 1 invariant violation, 2 usage or spec error,
3 internal merge/shape error. Reports are deterministic for a given
(spec, seed, flags); no timestamps are emitted.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .blockspec import SpecError, load_checkpoint, load_spec, save_checkpoint
from .dynamics import (OptimizerConfig, branch_similarity, channel_norm_profile,
                       gradcheck_block, probe_branchwise_gamma,
                       probe_conv_scale_update, probe_multilayer_lemma,
                       probe_shared_gamma, train_toy)
from .okt import read_okt, write_okt
from .squeeze import MergeError, cost_report, expanded_forward, squeeze_block
from .tensor import KernelTensor, ShapeError, Tensor, conv2d_direct

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def _report(doc, body):
    out = {"tool_version": __version__, "seed": doc["seed"],
           "dtype": doc.get("dtype", "f64")}
    out.update(body)
    return out


def _emit(report, json_path):
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _print_table(rows):
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")


def cmd_squeeze(args):
    doc, block = load_spec(args.spec)
    result = squeeze_block(block)
    write_okt(args.out, result.kernel)
    trace_path = args.trace or (args.out + ".trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(result.trace_json_lines() + "\n")
    keh, kew = result.effective_k
    print(f"effective kernel {keh}x{kew}")
    report = _report(doc, {
        "command": "squeeze",
        "effective_k": [keh, kew],
        "kernel_shape": list(result.kernel.shape),
        "out": args.out,
        "trace_steps": len(result.trace),
    })
    _emit(report, args.json)
    return EXIT_OK


def cmd_verify(args):
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    doc, block = load_spec(args.spec)
    kernel = read_okt(args.kernel) if args.kernel else squeeze_block(block).kernel
    rng = np.random.default_rng(doc["seed"])
    geom = block.eval_geometry()
    worst = 0.0
    for _ in range(args.trials):
        x = Tensor(rng.uniform(-1, 1, size=(args.batch, block.in_ch, args.hw[0], args.hw[1])),
                   dtype=doc.get("dtype", "f64"))
        direct = conv2d_direct(x, kernel, geom)
        expanded = expanded_forward(block, x)
        worst = max(worst, float(np.max(np.abs(direct.data - expanded.data))))
    ok = worst <= args.tol
    print(f"max residual {worst:.3e} over {args.trials} trials (tol {args.tol:.1e})")
    report = _report(doc, {
        "command": "verify", "trials": args.trials, "tol": args.tol,
        "max_residual": worst, "pass": ok,
    })
    _emit(report, args.json)
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_gradcheck(args):
    doc, block = load_spec(args.spec)
    rng = np.random.default_rng(doc["seed"])
    x = Tensor(rng.standard_normal((args.batch, block.in_ch, args.hw[0], args.hw[1])),
               dtype=doc.get("dtype", "f64"))
    geom = block.eval_geometry()
    s_h, s_w = geom.stride
    h_out = (args.hw[0] - 1) // s_h + 1
    w_out = (args.hw[1] - 1) // s_w + 1
    upstream = Tensor(rng.standard_normal((args.batch, block.out_ch, h_out, w_out)),
                      dtype=doc.get("dtype", "f64"))
    res = gradcheck_block(block, x, upstream)
    _print_table([("params", res["n_params"]),
                  ("route diff (squeezed vs expanded)", f"{res['route_diff']:.3e}"),
                  ("finite-difference rel err", f"{res['fd_rel_err']:.3e}"),
                  ("ok", res["ok"])])
    report = _report(doc, {"command": "gradcheck", **res})
    _emit(report, args.json)
    return EXIT_OK if res["ok"] else EXIT_VIOLATION


def cmd_dynamics(args):
    doc, _ = load_spec(args.spec)
    rng = np.random.default_rng(doc["seed"])
    eta = args.eta
    if args.probe == "convscale":
        # the canonical scalar instance: residual is exactly eta^2
        rep = probe_conv_scale_update(1.0, 1.0, 1.0, 1.0, eta)
        ok = abs(rep.residual_norm - eta ** 2) <= 1e-12
    elif args.probe == "shared":
        rep = probe_shared_gamma(rng.uniform(0.5, 1.5, size=4), rng.uniform(0.5, 1.5),
                                 rng.uniform(-1, 1, size=4), rng.uniform(0.5, 1.5),
                                 n_branches=3, eta=eta, rng=rng)
        ok = rep.first_order_diff <= 1e-9
    elif args.probe == "branchwise":
        branches = [(rng.uniform(0.5, 1.5), rng.uniform(-1, 1, size=4)) for _ in range(3)]
        rep = probe_branchwise_gamma(branches, rng.uniform(-1, 1, size=4),
                                     rng.uniform(0.5, 1.5), eta)
        ok = (rep.first_order_diff > 1e-6
              and rep.details["min_branch_gradient_gap"] > 0)
    else:
        rep = probe_multilayer_lemma(args.layers, eta, rng=rng)
        ok = rep.details["balanced"] and rep.residual_norm <= 10 * eta ** 2 * args.layers
    rows = [("probe", rep.probe), ("eta", rep.eta),
            ("residual", f"{rep.residual_norm:.3e}")]
    if rep.first_order_diff is not None:
        rows.append(("first_order_diff", f"{rep.first_order_diff:.3e}"))
    if rep.residual_ratio is not None:
        rows.append(("residual_ratio (eta vs eta/2)", f"{rep.residual_ratio:.3f}"))
    _print_table(rows)
    report = _report(doc, {"command": "dynamics", **rep.to_dict(), "pass": ok})
    _emit(report, args.json)
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_bench(args):
    doc, block = load_spec(args.spec)
    costs = cost_report(block, (args.hw[0], args.hw[1]), args.batch)
    off, on = costs["offline"], costs["online"]
    buf_ratio = on["buffer_elems"] / off["buffer_elems"] if off["buffer_elems"] else 0.0
    mult_ratio = on["mults"] / off["mults"] if off["mults"] else 0.0
    _print_table([
        ("offline intermediate buffer elems", off["buffer_elems"]),
        ("online intermediate buffer elems", on["buffer_elems"]),
        ("buffer ratio online/offline", f"{buf_ratio:.4f}"),
        ("offline mults", off["mults"]),
        ("online mults", on["mults"]),
        ("mult ratio online/offline", f"{mult_ratio:.4f}"),
    ])
    report = _report(doc, {"command": "bench", "hw": list(args.hw),
                           "batch": args.batch, **costs,
                           "buffer_ratio": buf_ratio, "mult_ratio": mult_ratio})
    _emit(report, args.json)
    return EXIT_OK


def cmd_train_toy(args):
    doc, block = load_spec(args.spec)
    rng = np.random.default_rng(doc["seed"] + 1)
    keh, kew = block.effective_k
    target_arr = rng.standard_normal((block.out_ch, block.in_ch, keh, kew)) * 0.2
    target = KernelTensor(target_arr, dtype=doc.get("dtype", "f64"))
    cfg = OptimizerConfig(eta=args.eta, weight_decay=args.weight_decay,
                          momentum=args.momentum)
    res = train_toy(block, target, args.steps, cfg, mode=args.mode,
                    seed=doc["seed"], batch=args.batch, hw=tuple(args.hw))
    if res["diverged_at"] is not None:
        print(f"diverged at step {res['diverged_at']}")
        report = _report(doc, {"command": "train_toy", "mode": args.mode,
                               "diverged_at": res["diverged_at"]})
        _emit(report, args.json)
        return EXIT_VIOLATION
    _print_table([("steps", args.steps), ("mode", args.mode),
                  ("first loss", f"{res['losses'][0]:.6e}"),
                  ("final loss", f"{res['final_loss']:.6e}")])
    if args.save:
        save_checkpoint(args.save, doc, block)
    report = _report(doc, {
        "command": "train_toy", "mode": args.mode, "steps": args.steps,
        "eta": args.eta, "first_loss": res["losses"][0],
        "final_loss": res["final_loss"], "loss_curve": res["losses"],
        "diverged_at": None,
    })
    _emit(report, args.json)
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def cmd_analyze(args):
    doc, block = load_checkpoint(args.ckpt)
    sim = branch_similarity(block)
    prof = channel_norm_profile(block)
    names = [b.name or f"branch{i}" for i, b in enumerate(block.branches)]
    _write_csv(args.similarity_csv, ["branch"] + names,
               [[names[i]] + [f"{v:.12g}" for v in sim[i]] for i in range(len(names))])
    _write_csv(args.norms_csv, ["branch"] + [f"ch{c}" for c in range(prof.shape[1])],
               [[names[i]] + [f"{v:.12g}" for v in prof[i]] for i in range(len(names))])
    off_diag = [abs(sim[i, j]) for i in range(len(names)) for j in range(len(names)) if i != j]
    mean_off = float(np.mean(off_diag)) if off_diag else 0.0
    print(f"mean off-diagonal |cosine| {mean_off:.4f}")
    report = _report(doc, {"command": "analyze",
                           "mean_offdiag_abs_cos": mean_off,
                           "similarity_csv": args.similarity_csv,
                           "norms_csv": args.norms_csv})
    _emit(report, args.json)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="orepa", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("spec", help="block-spec JSON path")
        sp.add_argument("--json", help="write the machine-readable report here")

    sp = sub.add_parser("squeeze", help="collapse a block to one kernel")
    common(sp)
    sp.add_argument("--out", required=True, help="output OKT1 kernel path")
    sp.add_argument("--trace", help="trace JSONL path (default: <out>.trace.jsonl)")
    sp.set_defaults(func=cmd_squeeze)

    sp = sub.add_parser("verify", help="squeeze-forward equivalence on random inputs")
    common(sp)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-9)
    sp.add_argument("--kernel", help="check this OKT1 kernel instead of re-squeezing")
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--hw", type=int, nargs=2, default=(12, 12))
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("gradcheck", help="squeezed vs expanded vs finite differences")
    common(sp)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--hw", type=int, nargs=2, default=(6, 6))
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dynamics", help="first-order update probes")
    common(sp)
    sp.add_argument("--probe", required=True,
                    choices=("convscale", "shared", "branchwise", "lemma"))
    sp.add_argument("--eta", type=float, default=1e-2)
    sp.add_argument("--layers", type=int, default=3, help="chain depth for the lemma probe")
    sp.set_defaults(func=cmd_dynamics)

    sp = sub.add_parser("bench", help="analytic buffer and multiply accounting")
    common(sp)
    sp.add_argument("--hw", type=int, nargs=2, default=(56, 56))
    sp.add_argument("--batch", type=int, default=32)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train-toy", help="fit the squeezed kernel to a random target")
    common(sp)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--eta", type=float, default=0.05)
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--momentum", type=float, default=0.0)
    sp.add_argument("--mode", choices=("online", "offline"), default="online")
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--hw", type=int, nargs=2, default=(8, 8))
    sp.add_argument("--save", help="write a checkpoint here after training")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("analyze", help="branch similarity and norm profiles from a checkpoint")
    sp.add_argument("ckpt", help="checkpoint path from train-toy --save")
    sp.add_argument("--similarity-csv", required=True)
    sp.add_argument("--norms-csv", required=True)
    sp.add_argument("--json", help="write the machine-readable report here")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)  # argparse exits 2 on usage errors
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MergeError, ShapeError) as exc:
        print(f"merge/shape error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
