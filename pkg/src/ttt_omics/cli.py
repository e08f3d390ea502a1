"""Command-line entry point: synth, preprocess, train, embed, evaluate.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import load_pipeline_config
from .errors import ConfigError, TttOmicsError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttt-omics",
        description="Multimodal single-cell fusion with test-time-training layers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="pipeline config (TOML)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--output-dir", default=None, help="override [data].output_dir")

    common(sub.add_parser("synth", help="generate a synthetic paired dataset"))
    common(sub.add_parser("preprocess", help="normalize, select genes, sort features"))
    p_train = sub.add_parser("train", help="train one stage")
    common(p_train)
    p_train.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p_embed = sub.add_parser("embed", help="write per-cell embeddings")
    common(p_embed)
    p_embed.add_argument("--checkpoint", default=None,
                         help="checkpoint path (default: newest stage under output dir)")
    p_eval = sub.add_parser("evaluate", help="cluster embeddings and score them")
    common(p_eval)
    p_eval.add_argument("--embeddings", default=None, help="embeddings CSV path")
    p_eval.add_argument("--labels", default=None, help="ground-truth labels CSV path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_pipeline_config(args.config)
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.output_dir is not None:
            cfg.data.output_dir = args.output_dir

        if args.command == "synth":
            paths = pipeline.cmd_synth(cfg)
            print(f"wrote synthetic dataset under {paths['rna'].parent}")
        elif args.command == "preprocess":
            paths = pipeline.cmd_preprocess(cfg)
            print(f"wrote {paths['rna']} and {paths['adt']}")
        elif args.command == "train":
            ckpt, trace = pipeline.cmd_train(cfg, args.stage)
            last = f"{trace[-1]:.6f}" if trace else "n/a"
            print(f"wrote {ckpt} ({len(trace)} epochs, final loss {last})")
        elif args.command == "embed":
            out = pipeline.cmd_embed(cfg, args.checkpoint)
            print(f"wrote {out}")
        elif args.command == "evaluate":
            report, metrics_path, clusters_path = pipeline.cmd_evaluate(
                cfg, args.embeddings, args.labels)
            print(f"wrote {metrics_path} and {clusters_path}")
            for key, value in report.items():
                print(f"  {key}: {value}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TttOmicsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
