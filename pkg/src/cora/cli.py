"""Command-line frontend: quantize, search, eval, report.

Exit codes: 0 success, 1 usage error, 2 data/model error, 3 numeric failure.
"""
import argparse
import json
import sys
import time

import numpy as np

from . import model_io
from .errors import (CoraError, FormatError, GeometryError, NumericError,
                     ShapeError, UsageError)
from .network import AdaptedQuantModel, forward, quantize_model, top1_accuracy
from .quantizer import ClipScheme, QuantSpec
from .search import (SearchConfig, equivalent_bitwidth, finalize,
                     heuristic_ranks, rank_norm_coeffs, search,
                     write_solution_json, write_trace_csv)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_clip(text):
    if text == "minmax":
        return ClipScheme.minmax()
    if text.startswith("normal:"):
        try:
            return ClipScheme.normal(float(text.split(":", 1)[1]))
        except (ValueError, CoraError):
            pass
    raise UsageError(f"--clip must be 'minmax' or 'normal:K', got {text!r}")


def _quant_spec(args):
    if not 2 <= args.bits <= 8:
        raise UsageError(f"--bits must be in 2..8, got {args.bits}")
    return QuantSpec(bits=args.bits, clip=_parse_clip(args.clip),
                     mode="asymmetric")


def _adapter_spec(args):
    if args.adapter_bits == 0:
        return None
    if not 2 <= args.adapter_bits <= 8:
        raise UsageError("--adapter-bits must be 0 (off) or in 2..8")
    return QuantSpec(bits=args.adapter_bits, clip=ClipScheme.minmax(),
                     mode="asymmetric")


def _add_common(p, with_search=False):
    p.add_argument("--model", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--adapter-bits", type=int, default=8)
    p.add_argument("--clip", default="normal:4.0")
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--json", action="store_true")
    if with_search:
        p.add_argument("--lambda", dest="lam", type=float, default=1.0)
        p.add_argument("--order", type=int, default=4)
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--iters", type=int, default=250)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--grad-clip", type=float, default=0.2)
        p.add_argument("--seed", type=int, default=0)


def _build_parser():
    top = _Parser(prog="cora",
                  description="Low-bit weight quantization with low-rank "
                              "residual adapters and budgeted rank search.")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", parents=[], help="quantize a float model")
    _add_common(p)
    p.add_argument("--mode", choices=["none", "heuristic"], default="none")
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="search optimal adapter ranks")
    _add_common(p, with_search=True)
    p.add_argument("--data", required=True, help="calibration .cora-data")
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("eval", help="evaluate top-1 accuracy")
    p.add_argument("--model", required=True, help=".cora-model or .cora-qmodel")
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("report", help="full desk experiment and run report")
    _add_common(p, with_search=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    return top


def _peek_kind(path):
    import struct
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != model_io.MAGIC:
            raise FormatError("bad_magic", f"{path}: not a container file")
        _, mlen = struct.unpack("<IQ", head[4:16])
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
    return manifest.get("kind")


def _emit(args, payload, text_lines):
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _cmd_quantize(args):
    model = model_io.load_model(args.model)
    spec = _quant_spec(args)
    if args.mode == "none":
        qm = quantize_model(model, spec, adapt=False)
        qm.adapter_mode = "none"
    else:
        qm = quantize_model(model, spec, adapt=True)
        ranks = heuristic_ranks(args.budget, qm.max_ranks())
        finalize(qm, ranks, adapter_spec=_adapter_spec(args), adapter_bits=None)
    model_io.save_quantized(args.out, qm)
    _emit(args, {"out": args.out, "bits": args.bits, "mode": args.mode},
          [f"wrote {args.out}"])
    return 0


def _search_config(args):
    if not 0.0 <= args.budget <= 1.0:
        raise UsageError(f"--budget must be in [0, 1], got {args.budget}")
    return SearchConfig(budget=args.budget, penalty=args.lam, order=args.order,
                        lr=args.lr, iterations=args.iters,
                        batch_size=args.batch, grad_clip=args.grad_clip,
                        seed=args.seed)


def _cmd_search(args):
    model = model_io.load_model(args.model)
    images, labels, _, _ = model_io.load_dataset(args.data)
    spec = _quant_spec(args)
    cfg = _search_config(args)
    qm = quantize_model(model, spec, adapt=True, order=cfg.order)
    heur = heuristic_ranks(cfg.budget, qm.max_ranks())
    qm.ranks = heur.astype(np.float64)
    ranks, omega, trace = search(qm, images, labels, cfg)
    final = finalize(qm, ranks, adapter_spec=_adapter_spec(args),
                     adapter_bits=None)
    model_io.save_quantized(args.out + ".cora-qmodel", qm)
    write_trace_csv(args.out + ".trace.csv", trace)
    write_solution_json(args.out + ".solution.json", qm, heur, ranks, final)
    payload = {
        "out": args.out + ".cora-qmodel",
        "final_ranks": [int(x) for x in final],
        "running_budget": trace.running_budget[-1],
        "equivalent_bits": equivalent_bitwidth(args.bits, args.adapter_bits,
                                               args.budget),
    }
    _emit(args, payload, [f"wrote {payload['out']}",
                          f"final ranks: {payload['final_ranks']}",
                          f"running budget: {payload['running_budget']:.6f}"])
    return 0


def _cmd_eval(args):
    kind = _peek_kind(args.model)
    images, labels, _, _ = model_io.load_dataset(args.data)
    if kind == "model":
        model = model_io.load_model(args.model)
        acc = top1_accuracy(model, images, labels)
        payload = {"accuracy": acc, "kind": "float"}
        lines = [f"top-1 accuracy: {acc:.4f}"]
    else:
        qm = model_io.load_quantized(args.model)
        acc = top1_accuracy(qm, images, labels)
        payload = {"accuracy": acc, "kind": "quantized",
                   "adapter_mode": qm.adapter_mode}
        lines = [f"top-1 accuracy: {acc:.4f}"]
    _emit(args, payload, lines)
    return 0


def _cmd_report(args):
    t0 = time.time()
    model = model_io.load_model(args.model)
    calib_x, calib_y, _, _ = model_io.load_dataset(args.calib)
    val_x, val_y, _, _ = model_io.load_dataset(args.val)
    spec = _quant_spec(args)
    cfg = _search_config(args)
    aspec = _adapter_spec(args)

    acc = {"float": top1_accuracy(model, val_x, val_y)}

    plain = quantize_model(model, spec, adapt=False)
    plain.adapter_mode = "none"
    acc["quantized"] = top1_accuracy(plain, val_x, val_y)

    heur_model = quantize_model(model, spec, adapt=True, order=cfg.order)
    heur = heuristic_ranks(cfg.budget, heur_model.max_ranks())
    finalize(heur_model, heur, adapter_spec=aspec, adapter_bits=None)
    acc["quantized_heuristic"] = top1_accuracy(heur_model, val_x, val_y)

    opt_model = quantize_model(model, spec, adapt=True, order=cfg.order)
    opt_model.ranks = heur.astype(np.float64)
    ranks, omega, trace = search(opt_model, calib_x, calib_y, cfg)
    final = finalize(opt_model, ranks, adapter_spec=aspec, adapter_bits=None)
    acc["quantized_optimal"] = top1_accuracy(opt_model, val_x, val_y)

    bounds = opt_model.max_ranks()
    solution = [
        {"layer": int(lid), "max_rank": int(bounds[i]),
         "heuristic_rank": int(heur[i]), "optimal_rank": float(ranks[i]),
         "final_rank": int(final[i])}
        for i, lid in enumerate(opt_model.conv_ids)
    ]
    report = model_io.make_report(
        quant_bits=args.bits,
        quant_clip={"kind": spec.clip.kind, "k": spec.clip.k},
        adapter_bits=args.adapter_bits,
        budget=args.budget,
        solution=solution,
        accuracy=acc,
        iterations=cfg.iterations,
        wall_time_s=time.time() - t0,
    )
    model_io.write_report(args.out, report)
    payload = dict(acc)
    payload["out"] = args.out
    payload["equivalent_bits"] = report.equivalent_bits
    _emit(args, payload,
          [f"float accuracy:      {acc['float']:.4f}",
           f"quantized accuracy:  {acc['quantized']:.4f}",
           f"heuristic accuracy:  {acc['quantized_heuristic']:.4f}",
           f"optimal accuracy:    {acc['quantized_optimal']:.4f}",
           f"wrote {args.out}"])
    return 0


def run(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "quantize":
            return _cmd_quantize(args)
        if args.command == "search":
            return _cmd_search(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "report":
            return _cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        return _fail(argv, 1, "usage", str(exc))
    except (FormatError, OSError, ShapeError, GeometryError) as exc:
        return _fail(argv, 2, "data", str(exc))
    except NumericError as exc:
        return _fail(argv, 3, "numeric", str(exc))
    except CoraError as exc:
        return _fail(argv, 2, "data", str(exc))


def _fail(argv, code, category, message):
    print(f"cora: {category} error: {message}", file=sys.stderr)
    if "--json" in argv:
        print(json.dumps({"error": message, "category": category,
                          "exit_code": code}, sort_keys=True))
    return code


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
