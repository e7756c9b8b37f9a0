"""Command-line front end: gem generate|score|init-graph|train|traverse|eval|ablate.

Exit codes: 0 ok, 2 config error, 3 data error, 4 transport error,
5 training divergence.  Failures print one machine-parsable line on stderr:
gem-error: category=<config|data|transport|divergence> detail=<message>
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import pipeline
from .errors import (ConfigError, DataError, DivergenceError, GemError,
                     TransportError)


def _category(exc: GemError) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, DivergenceError):
        return "divergence", 5
    if isinstance(exc, TransportError):
        return "transport", 4
    if isinstance(exc, DataError):
        return "data", 3
    return "data", 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gem",
                                     description="relation-aware disentanglement, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic corpus")
    p.add_argument("--spec", required=True, help="factor spec file (key = value)")
    p.add_argument("--out", required=True, help="corpus container path")
    p.add_argument("--n", type=int, default=5000, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--truth-out", default=None,
                   help="also write the ground-truth relation CSV here")

    p = sub.add_parser("score", help="score every sample's attributes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True, help="config file with predictor.* keys")
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--seed", type=int, default=0, help="mock scorer noise seed")

    p = sub.add_parser("init-graph", help="sketch the relation graph from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True, help="graph base path (writes .csv/.meta)")
    p.add_argument("--config", default=None, help="training config (window, eta)")
    p.add_argument("--init-window", type=int, default=None)

    p = sub.add_parser("train", help="train the model against a corpus and graph")
    p.add_argument("--corpus", required=True)
    p.add_argument("--graph", required=True, help="graph base path")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("traverse", help="decode a sweep along one latent dimension")
    p.add_argument("--checkpoint", required=True, help="checkpoint base path")
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--lo", type=float, default=-3.0)
    p.add_argument("--hi", type=float, default=3.0)
    p.add_argument("--sample-id", type=int, default=0)
    p.add_argument("--out", required=True, help="grid base path (writes .pgm/.png)")

    p = sub.add_parser("eval", help="compute the metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--truth", default=None, help="ground-truth relation CSV")
    p.add_argument("--out", default=None, help="metrics CSV path (default: stdout)")

    p = sub.add_parser("ablate", help="train every ablation variant across seeds")
    p.add_argument("--corpus", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def _load_config(path: str | None) -> pipeline.TrainingConfig:
    return pipeline.load_training_config(path) if path else pipeline.TrainingConfig()


def run(args: argparse.Namespace) -> int:
    if args.command == "generate":
        spec = pipeline.load_factor_spec(args.spec)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        corpus = pipeline.cmd_generate(spec, args.n, args.out, truth_out=args.truth_out)
        print(f"wrote {len(corpus)} samples to {args.out}")
        return 0

    if args.command == "score":
        predictor = pipeline.load_predictor_config(args.config)
        records = pipeline.cmd_score(args.corpus, predictor, args.out, seed=args.seed)
        print(f"scored {len(records)} samples to {args.out}")
        return 0

    if args.command == "init-graph":
        config = _load_config(args.config)
        window = args.init_window if args.init_window is not None else config.init_window
        graph = pipeline.cmd_init_graph(args.scores, window, args.out,
                                        eta=config.eta,
                                        convention=config.somers_convention)
        print(f"sketched a {graph.n}-node graph to {args.out}.csv")
        return 0

    if args.command == "train":
        config = _load_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        result = pipeline.cmd_train(args.corpus, args.graph, config, args.out)
        m = result.metrics
        print(f"trained {len(result.losses)} steps; "
              f"mse {m.reconstruction_mse:.5f} (step0 {m.reconstruction_mse_step0:.5f}), "
              f"relation mae {m.relation_mae:.4f}, "
              f"alignment {m.mean_alignment():.3f}")
        return 0

    if args.command == "traverse":
        pipeline.cmd_traverse(args.checkpoint, args.graph, args.corpus, args.dim,
                              args.steps, (args.lo, args.hi), args.out,
                              sample_id=args.sample_id)
        print(f"wrote traversal grid to {args.out}.pgm and {args.out}.png")
        return 0

    if args.command == "eval":
        metrics = pipeline.cmd_eval(args.checkpoint, args.graph, args.corpus,
                                    args.truth, out_path=args.out)
        if args.out:
            print(f"wrote metrics to {args.out}")
        else:
            print(f"reconstruction_mse = {metrics.reconstruction_mse!r}")
            print(f"relation_mae = {metrics.relation_mae!r}")
            print(f"factor_alignment_mean = {metrics.mean_alignment()!r}")
        return 0

    if args.command == "ablate":
        config = _load_config(args.config)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        if not seeds:
            raise ConfigError("need at least one seed")
        summary = pipeline.cmd_ablate(args.corpus, args.graph, config, seeds, args.out)
        for name, row in summary.items():
            print(f"{name}: mse {row['reconstruction_mse']:.5f}, "
                  f"mae {row['relation_mae']:.4f}, "
                  f"alignment {row['factor_alignment']:.3f}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except GemError as exc:
        category, code = _category(exc)
        print(f"gem-error: category={category} detail={exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"gem-error: category=data detail={exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
