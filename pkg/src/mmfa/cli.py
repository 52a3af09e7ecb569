"""Command-line entry point: gen-synth | train | eval | mmd | export-attention.

Exit codes: 0 success, 1 domain errors (bad manifests, protocol failures...),
2 usage errors. Results go to stdout or --out files; the resolved-config banner
and diagnostics go to stderr so runs are reproducible from the log alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluator, trainer
from .data import SynthConfig, load_manifest, synth_generate
from .errors import DimensionError, MMFAError
from .kernels import FeatureBatch, KernelSpec, mmd2_biased
from .tensor import Tensor, read_tensor_file


def _banner(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "resolved": resolved}, sort_keys=True),
          file=sys.stderr)


def _cmd_gen_synth(args) -> int:
    config = SynthConfig(ids=args.ids, per_id=args.per_id, height=args.height,
                         width=args.width, channels=args.channels,
                         cameras=args.cameras, shift=args.shift, noise=args.noise,
                         attr_bits=args.attr_bits, seed=args.seed)
    _banner("gen-synth", {**dataclasses.asdict(config), "out": str(args.out)})
    src, tgt, sidecar = synth_generate(config, args.out)
    print(json.dumps({"source": str(src), "target": str(tgt),
                      "truth": str(sidecar)}, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    config = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    _banner("train", {"source": args.source, "target": args.target,
                      "out": str(args.out), "resume": args.resume,
                      "config": trainer.config_to_dict(config)})
    result = trainer.train(args.source, args.target, config, args.out,
                           resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint_dir),
                      "log": str(result.log_path)}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    model, _config, _index = trainer.load_checkpoint(args.model)
    protocol = evaluator.EvalProtocol(kind=args.protocol, splits=args.splits,
                                      ratio=args.ratio, seed=args.seed,
                                      max_rank=args.max_rank,
                                      normalize=args.normalize)
    _banner("eval", {"model": str(args.model), **protocol.describe(),
                     "query": args.query, "gallery": args.gallery,
                     "data": args.data, "truth": args.truth})
    if args.protocol == "single_query":
        query = load_manifest(args.query) if args.query else None
        gallery = load_manifest(args.gallery) if args.gallery else None
        report = evaluator.run_protocol(model, protocol, query=query, gallery=gallery)
    else:
        data = load_manifest(args.data) if args.data else None
        if data is not None and args.truth:
            data = evaluator.unseal_target(data, args.truth)
        report = evaluator.run_protocol(model, protocol, data=data)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_mmd(args) -> int:
    alphas = tuple(float(a) for a in args.alphas.split(","))
    spec = KernelSpec(bandwidths=alphas)
    _banner("mmd", {"a": args.file_a, "b": args.file_b, "alphas": list(alphas)})
    a = read_tensor_file(args.file_a).astype(np.float64)
    b = read_tensor_file(args.file_b).astype(np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("mmd expects two [n,d] tensor files")
    value = mmd2_biased(FeatureBatch(Tensor(a), "source"),
                        FeatureBatch(Tensor(b), "target"), spec).item()
    print(f"{value:.12g}")
    return 0


def _cmd_export_attention(args) -> int:
    model, _config, _index = trainer.load_checkpoint(args.model)
    _banner("export-attention", {"model": str(args.model), "image": args.image,
                                 "top": args.top, "out": str(args.out)})
    image = evaluator.load_image_tensor(args.image)
    written = evaluator.export_attention(image, model, args.top, args.out)
    print(json.dumps({"files": [str(p) for p in written]}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfa",
        description="Joint identity/attribute learning with MMD feature alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic two-domain benchmark")
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--per-id", type=int, default=10)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--attr-bits", type=int, default=6)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="run the learn-and-adapt training loop")
    p.add_argument("--source", required=True)
    p.add_argument("--target", default=None,
                   help="omit for a source-only supervised run")
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval on pooled features")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--protocol", choices=("single_query", "random_splits"),
                   default="single_query")
    p.add_argument("--query", default=None)
    p.add_argument("--gallery", default=None)
    p.add_argument("--data", default=None, help="whole-set manifest for random_splits")
    p.add_argument("--truth", default=None, help="sealed target ground-truth sidecar")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rank", type=int, default=evaluator.DEFAULT_MAX_RANK)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("mmd", help="squared MMD between two [n,d] tensor files")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--alphas", default="1,5,10")
    p.set_defaults(func=_cmd_mmd)

    p = sub.add_parser("export-attention", help="dump top-channel heatmaps as PGM")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MMFAError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
