"""Command line front end.

Subcommands execute in process by default. With --server URL the same
request is POSTed to a running condense.service instance and the reply
rendered identically, so scripts do not care which mode they hit.

Exit codes: 0 success, 1 bad usage, 2 operation failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import service_ops as ops
from .errors import CondenseError
from .tensor import tune_allocator


class RemoteError(Exception):
    """The server rejected or failed a request."""


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _post(server: str, endpoint: str, req, resp_cls):
    import httpx
    url = server.rstrip("/") + "/" + endpoint
    try:
        r = httpx.post(url, json=req.model_dump(), timeout=None)
    except httpx.HTTPError as exc:
        raise RemoteError(f"{url}: {exc}") from exc
    if r.status_code != 200:
        try:
            detail = r.json().get("detail", r.text)
        except ValueError:
            detail = r.text
        raise RemoteError(f"{url}: HTTP {r.status_code}: {detail}")
    return resp_cls.model_validate(r.json())


def _print_epoch(row) -> None:
    print(f"epoch {row.epoch:4d}  lr {row.lr:.5f}  loss {row.train_loss:.6f}  "
          f"test_err {row.test_error:.4f}  frac {row.surviving_fraction:.4f}  "
          f"{row.seconds:.1f}s", flush=True)


def _config_stem(config: str) -> str:
    p = Path(config)
    return p.stem if p.is_file() else config


# -- subcommand handlers ---------------------------------------------------


def _train_request(args) -> ops.TrainRequest:
    overrides = []
    if args.epochs is not None:
        overrides.append(f"epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.batch_size is not None:
        overrides.append(f"batch_size={args.batch_size}")
    overrides.extend(args.set or [])
    out_dir = args.out
    if out_dir is None:
        suffix = "-baseline" if args.command == "prune-baseline" else ""
        out_dir = str(Path("runs") / (_config_stem(args.config) + suffix))
    return ops.TrainRequest(
        config=args.config, overrides=overrides, dataset=args.dataset,
        data_dir=args.data, subset_size=args.subset_size,
        test_subset_size=args.test_subset_size, out_dir=out_dir,
        resume=getattr(args, "resume", None),
        stop_after=getattr(args, "stop_after", None),
    )


def _finish_train(resp: ops.TrainResponse, live: bool) -> int:
    if not live:  # server mode: log arrives with the reply
        for row in resp.log:
            _print_epoch(row)
    if resp.prune_event:
        ev = resp.prune_event
        print(f"one-shot prune: eval loss {ev['pre_prune_loss']:.6f} -> "
              f"{ev['post_prune_loss']:.6f}, error {ev['pre_prune_error']:.4f} "
              f"-> {ev['post_prune_error']:.4f}")
    print(f"{resp.epochs_run} epochs in {resp.seconds:.1f}s; final loss "
          f"{resp.final_train_loss:.6f}, test error {resp.final_test_error:.4f}, "
          f"surviving fraction {resp.surviving_fraction:.4f}")
    if resp.checkpoint:
        print(f"checkpoint: {resp.checkpoint}")
    if resp.log_file:
        print(f"log: {resp.log_file}")
    return 0


def cmd_train(args) -> int:
    req = _train_request(args)
    if args.server:
        return _finish_train(_post(args.server, "train", req, ops.TrainResponse),
                             live=False)
    return _finish_train(ops.run_train(req, on_epoch=_print_epoch), live=True)


def cmd_prune_baseline(args) -> int:
    req = _train_request(args)
    if args.server:
        return _finish_train(
            _post(args.server, "prune-baseline", req, ops.TrainResponse),
            live=False)
    return _finish_train(ops.run_prune_baseline(req, on_epoch=_print_epoch),
                         live=True)


def cmd_convert(args) -> int:
    out = args.out
    if out is None:
        p = Path(args.checkpoint)
        out = str(p.with_name(p.stem + ".test.ckpt"))
    req = ops.ConvertRequest(checkpoint=args.checkpoint, out=out)
    if args.server:
        resp = _post(args.server, "convert", req, ops.ConvertResponse)
    else:
        resp = ops.run_convert(req)
    print(f"params {resp.params_before} -> {resp.params_after} "
          f"({resp.params_after / resp.params_before:.3f}x)")
    print(f"flops  {resp.flops_before} -> {resp.flops_after} "
          f"({resp.flops_after / resp.flops_before:.3f}x)")
    print(f"wrote {resp.out}")
    return 0


def cmd_verify(args) -> int:
    req = ops.VerifyRequest(
        checkpoint_a=args.train_form, checkpoint_b=args.test_form,
        n_inputs=args.inputs, seed=args.seed, batch_size=args.batch_size,
        input_resolution=args.resolution, tolerance=args.tolerance,
    )
    if args.server:
        resp = _post(args.server, "verify", req, ops.VerifyResponse)
    else:
        resp = ops.run_verify(req)
    print(f"inputs {resp.n_inputs}  max |diff| {resp.max_abs_diff:.6e}  "
          f"argmax agreement {resp.argmax_agreement:.4f}  "
          f"tolerance {resp.tolerance:.1e}")
    print("PASS" if resp.passed else "FAIL")
    return 0 if resp.passed else 2


def _keyvalues(resp: ops.CountResponse) -> str:
    lines = [f"total_params={resp.total_params}",
             f"total_flops={resp.total_flops}"]
    for e in resp.entries:
        lines.append(f"{e.name}.params={e.params}")
        lines.append(f"{e.name}.flops={e.flops}")
    return "\n".join(lines)


def cmd_count(args) -> int:
    target = args.checkpoint if args.checkpoint else args.config
    req = ops.CountRequest(target=target, form=args.form,
                           overrides=args.set or [],
                           input_resolution=args.resolution)
    if args.server:
        resp = _post(args.server, "count", req, ops.CountResponse)
    else:
        resp = ops.run_count(req)
    print(f"form {resp.form}  resolution {resp.input_resolution}")
    print(resp.table)
    if args.out:
        Path(args.out).write_text(_keyvalues(resp) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_export_connectivity(args) -> int:
    out = args.out
    if out is None:
        out = str(Path(args.checkpoint).parent / "connectivity.tsv")
    req = ops.ExportConnectivityRequest(checkpoint=args.checkpoint, out=out)
    if args.server:
        resp = _post(args.server, "export-connectivity", req,
                     ops.ExportConnectivityResponse)
    else:
        resp = ops.run_export_connectivity(req)
    print(f"wrote {resp.out} ({resp.n_layers} layers, "
          f"{resp.n_producers} producers)")
    return 0


def cmd_synth_data(args) -> int:
    req = ops.SynthDataRequest(out_dir=args.out, train_count=args.train_count,
                               test_count=args.test_count, seed=args.seed)
    if args.server:
        resp = _post(args.server, "synth-data", req, ops.SynthDataResponse)
    else:
        resp = ops.run_synth_data(req)
    print(f"wrote {resp.train_count} train / {resp.test_count} test images "
          f"to {resp.out_dir}")
    return 0


def cmd_eval(args) -> int:
    req = ops.EvalRequest(checkpoint=args.checkpoint, dataset=args.dataset,
                          data_dir=args.data, subset_size=args.subset_size,
                          test_subset_size=args.test_subset_size,
                          split=args.split)
    if args.server:
        resp = _post(args.server, "eval", req, ops.EvalResponse)
    else:
        resp = ops.run_eval(req)
    print(f"{args.split} split ({resp.n} samples): loss {resp.loss:.6f}, "
          f"error {resp.error:.4f}")
    return 0


# -- parser ----------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10"])
    p.add_argument("--data", default=os.environ.get("CONDENSE_DATA_DIR"),
                   help="data root (default: $CONDENSE_DATA_DIR)")
    p.add_argument("--subset-size", type=int, default=None,
                   help="keep this many training images, class-balanced")
    p.add_argument("--test-subset-size", type=int, default=None)


def _add_train_args(p, baseline: bool):
    p.add_argument("--config", default="cifar-lgc-small",
                   help="preset name or config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any model or training field")
    _add_data_args(p)
    p.add_argument("--out", default=None,
                   help="output directory (default: runs/<config>)")
    if not baseline:
        p.add_argument("--resume", default=None, metavar="CKPT")
        p.add_argument("--stop-after", type=int, default=None, metavar="EPOCH",
                       help="pause after this epoch; resume later")


def build_parser() -> _Parser:
    parser = _Parser(prog="condense",
                     description="Learned group convolutions: train, "
                                 "condense, convert, verify, count.")
    parser.add_argument("--server", default=None, metavar="URL",
                        help="send the request to a running service instead "
                             "of executing locally")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train with staged condensation")
    _add_train_args(p, baseline=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune-baseline",
                       help="train dense, prune once, fine-tune")
    _add_train_args(p, baseline=True)
    p.set_defaults(func=cmd_prune_baseline)

    p = sub.add_parser("convert",
                       help="rewrite a condensed checkpoint as an "
                            "index-layer grouped model")
    p.add_argument("checkpoint")
    p.add_argument("--out", default=None,
                   help="output path (default: <name>.test.ckpt)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify",
                       help="compare two checkpoints on random inputs")
    p.add_argument("--train-form", required=True, metavar="CKPT")
    p.add_argument("--test-form", required=True, metavar="CKPT")
    p.add_argument("--inputs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None,
                   help="max |logit diff| allowed (default set by dtype)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", help="parameter and FLOP accounting")
    p.add_argument("--config", default="cifar-lgc-small")
    p.add_argument("--checkpoint", default=None,
                   help="count a saved model instead of a config")
    p.add_argument("--form", default="converted",
                   choices=["train", "converted"])
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default=None,
                   help="also write a machine-readable key-value file")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("export-connectivity",
                       help="dump learned input-selection strengths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None,
                   help="output file (default: connectivity.tsv beside "
                        "the checkpoint)")
    p.set_defaults(func=cmd_export_connectivity)

    p = sub.add_parser("synth-data",
                       help="write an offline MNIST-format digit dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=6000)
    p.add_argument("--test-count", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("eval", help="loss and error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    tune_allocator()
    try:
        return args.func(args)
    except (CondenseError, RemoteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
