"""Command-line front end.

JSON results go to stdout, logs to stderr. Exit status: 0 success,
2 validation error, 3 numerical error, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import bitformat, hessian, quantizer, tensorio
from .errors import HVQError, ValidationError
from .layer import QuantConfig, default_lowrank_rank

log = logging.getLogger("hvq")

CSV_HEADER = ["bpw", "loss", "d", "n", "k", "int8", "lowrank_r", "seed"]
AUTO_RANK = -1


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-d", type=int, default=2, help="codebook entry dimension (columns per index)")
    p.add_argument("-n", type=int, default=64, help="codebook entries")
    p.add_argument("-k", type=int, default=1024, help="rows per codebook block")
    p.add_argument("--codebook-int8", action="store_true", help="store codebooks as 8-bit grids")
    p.add_argument(
        "--lowrank-r", type=int, nargs="?", const=AUTO_RANK, default=0, metavar="R",
        help="rank of the residual correction; without a value, ceil(min(N, M)/100)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvq", description="Hessian-guided vector quantization of weight matrices")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize an ATQT weight matrix into an ATQZ layer")
    q.add_argument("weights")
    q.add_argument("calibration")
    q.add_argument("-o", "--output", required=True)
    _config_args(q)
    q.add_argument("--damping", type=float, default=0.01)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--fast-order", action="store_true", help="quantize groups left to right instead of greedily")
    q.add_argument("--kmeans-iters", type=int, default=100)
    q.add_argument("--flip-passes", type=int, default=10)
    q.add_argument("--csv", metavar="PATH", help="append a bpw/loss row")

    dq = sub.add_parser("dequant", help="reconstruct an ATQZ layer as an fp32 ATQT matrix")
    dq.add_argument("layer")
    dq.add_argument("-o", "--output", required=True)

    ev = sub.add_parser("eval", help="proxy loss of an ATQZ layer against the original weights")
    ev.add_argument("layer")
    ev.add_argument("weights")
    ev.add_argument("calibration")
    ev.add_argument("--damping", type=float, default=0.01)
    ev.add_argument("--seed", type=int, default=0, help="seed label written to the CSV row")
    ev.add_argument("--csv", metavar="PATH", help="append a bpw/loss row")

    rb = sub.add_parser("report-bits", help="bits per weight for a layer file or a configuration")
    rb.add_argument("layer", nargs="?", help="ATQZ file; only its header is read")
    _config_args(rb)
    rb.add_argument("--rows", type=int, help="N, for exact accounting")
    rb.add_argument("--cols", type=int, help="M, for exact accounting")
    return parser


def _resolve_rank(r: int, N: int | None, M: int | None) -> int:
    if r != AUTO_RANK:
        return r
    if N is None or M is None:
        raise ValidationError("--lowrank-r without a value needs the matrix dimensions")
    return default_lowrank_rank(N, M)


def _append_csv(path: str, row: list) -> None:
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_HEADER)
        writer.writerow(row)


def _csv_row(report: bitformat.BitReport, loss: float, cfg: QuantConfig, r: int, seed: int) -> list:
    return [repr(report.b_total), repr(loss), cfg.d, cfg.n, cfg.k, int(cfg.codebook_int8), r, seed]


def _read_layer(path: str) -> bitformat.QuantizedLayer:
    with open(path, "rb") as fh:
        return bitformat.deserialize(fh.read())


def _load_hessian(weights_path: str, calib_path: str, damping: float):
    W = tensorio.load_matrix(weights_path)
    batch = tensorio.ingest_calibration(calib_path)
    if batch.shape[1] != W.shape[1]:
        raise ValidationError(
            f"calibration dim {batch.shape[1]} does not match weight columns M={W.shape[1]}"
        )
    return W, hessian.finalize(hessian.accumulate_hessian(batch), damping)


def cmd_quantize(args) -> dict:
    t0 = time.perf_counter()
    W, state = _load_hessian(args.weights, args.calibration, args.damping)
    N, M = W.shape
    cfg = QuantConfig(
        d=args.d, n=args.n, k=args.k, damping_rel=args.damping, codebook_int8=args.codebook_int8,
        lowrank_r=_resolve_rank(args.lowrank_r, N, M), seed=args.seed,
        kmeans_max_iters=args.kmeans_iters, flip_passes=args.flip_passes, fast_order=args.fast_order,
    )
    log.info("quantizing %dx%d with (d, n, k) = (%d, %d, %d)", N, M, cfg.d, cfg.n, cfg.k)
    layer = quantizer.quantize_matrix(W, state, cfg)
    blob = bitformat.serialize(layer)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    report = bitformat.bits_per_weight(cfg, N, M)
    loss = layer.meta["proxy_loss"]
    if args.csv:
        _append_csv(args.csv, _csv_row(report, loss, cfg, cfg.lowrank_r, cfg.seed))
    return {
        "output": args.output,
        "bytes": len(blob),
        "bpw": report.as_dict(),
        "proxy_loss_before": layer.meta["proxy_loss_before_lowrank"],
        "proxy_loss_after": loss,
        "group_order": layer.meta["order"],
        "wall_time_s": time.perf_counter() - t0,
        "seed": cfg.seed,
    }


def cmd_dequant(args) -> dict:
    layer = _read_layer(args.layer)
    tensorio.store_matrix(bitformat.dequantize(layer), args.output, "fp32")
    return {"output": args.output, "rows": layer.N, "cols": layer.M}


def cmd_eval(args) -> dict:
    layer = _read_layer(args.layer)
    W, state = _load_hessian(args.weights, args.calibration, args.damping)
    if W.shape != (layer.N, layer.M):
        raise ValidationError(f"weights are {W.shape[0]}x{W.shape[1]} but layer is {layer.N}x{layer.M}")
    What = bitformat.dequantize(layer)
    loss = quantizer.proxy_loss(W, What, state)
    report = bitformat.bits_per_weight(layer.config, layer.N, layer.M)
    if args.csv:
        _append_csv(args.csv, _csv_row(report, loss, layer.config, layer.lowrank_r, args.seed))
    return {
        "proxy_loss": loss,
        "group_losses": quantizer.group_loss_breakdown(W, What, state, layer.config.d),
        "bpw": report.as_dict(),
    }


def cmd_report_bits(args) -> dict:
    if args.layer:
        with open(args.layer, "rb") as fh:
            cfg, N, M, _ = bitformat.read_header(fh.read(bitformat.HEADER_BYTES))
    else:
        N, M = args.rows, args.cols
        cfg = QuantConfig(d=args.d, n=args.n, k=args.k, codebook_int8=args.codebook_int8,
                          lowrank_r=_resolve_rank(args.lowrank_r, N, M))
    return bitformat.bits_per_weight(cfg, N, M).as_dict()


COMMANDS = {
    "quantize": cmd_quantize,
    "dequant": cmd_dequant,
    "eval": cmd_eval,
    "report-bits": cmd_report_bits,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        result = COMMANDS[args.command](args)
    except HVQError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}), file=sys.stderr)
        return 4
    json.dump(result, sys.stdout, default=_json_default)
    sys.stdout.write("\n")
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
