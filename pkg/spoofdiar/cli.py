"""
Command line interface
python -m spoofdiar {generate,train,evaluate,score,ablate,dump-embeddings}
"""

import argparse
import sys
from typing import Dict, List, Optional

import structlog
import torch

from spoofdiar.config import (
    ExperimentConfig,
    apply_overrides,
    env_int,
    load_config,
    load_environment,
    load_grid,
)
from spoofdiar.errors import ConfigError, SpoofDiarError
from spoofdiar.experiment import (
    format_ablation,
    run_ablate,
    run_dir_for,
    run_dump_embeddings,
    run_evaluate,
    run_generate,
    run_score,
    run_train,
)
from spoofdiar.logging_setup import configure_logging
from spoofdiar.metrics import DiarizationReport

logger = structlog.get_logger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}%"


def print_report(report: DiarizationReport, heading: str) -> None:
    print(f"\n📊 {heading}")
    print(f"  JI_bona:   {_pct(report.ji_bona)}")
    print(f"  JER_spoof: {_pct(report.jer_spoof)}")
    print(f"  Frame EER: {_pct(report.eer_frame)}")
    print(f"  Utt. EER:  {_pct(report.eer_utt)}")
    print(f"  Utterances scored: {report.n_utts}")


def _inference_overrides(args) -> Dict[str, str]:
    overrides = {}
    if getattr(args, "threshold", None) is not None:
        overrides["inference.threshold"] = str(args.threshold)
    if getattr(args, "k", None) is not None:
        overrides["inference.k_override"] = str(args.k)
    elif getattr(args, "oracle_k", False):
        overrides["inference.oracle_k"] = "true"
        overrides["inference.k_override"] = "none"
    return overrides


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = _inference_overrides(args)
    if getattr(args, "out", None) and args.command in ("train", "ablate"):
        overrides["experiment.out_dir"] = args.out
    return apply_overrides(config, overrides) if overrides else config


def cmd_generate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = apply_overrides(config, {"corpus.seed": str(args.seed)})
    corpus_dir, checksum, counts = run_generate(config, args.out)
    print(f"✅ Corpus written to {corpus_dir}")
    for partition, n in counts.items():
        print(f"  📝 {partition}: {n} utterances")
    print(f"  🔑 checksum: {checksum}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    for seed in seeds:
        result, dev = run_train(config, seed)
        print(f"✅ Trained {config.name} seed {seed}: best epoch {result.best_epoch}, "
              f"{result.n_params} parameters")
        print(f"  💾 {result.best_checkpoint}")
        print_report(dev, f"dev metrics ({config.name}, seed {seed})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_config(args.config) if args.config else None
    checkpoint = args.checkpoint
    if checkpoint is None:
        if config is None:
            raise ConfigError("--seed needs --config to locate the run directory", "seed")
        checkpoint = str(run_dir_for(config, args.seed) / "best.ckpt")
    report = run_evaluate(checkpoint, args.partition, config, args.out,
                          embeddings=args.embeddings, overrides=_inference_overrides(args))
    print_report(report, f"{args.partition} metrics ({checkpoint})")
    return EXIT_OK


def cmd_score(args) -> int:
    config = _load(args)
    vocab = config.corpus.vocabulary
    threshold = config.inference.threshold
    report = run_score(args.ref, args.hyp, vocab, config.corpus.resolution, args.mask, args.scores,
                       args.out, threshold, config.inference.pooling)
    print_report(report, f"scores for {args.hyp}")
    if args.out:
        print(f"\n💾 Report saved to: {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load(args)
    grid = load_grid(args.grid)
    rows = run_ablate(grid, config, n_jobs=args.n_jobs)
    print(format_ablation(rows, grid.reference))
    failed = sum(len(r.failures) for r in rows)
    if failed:
        print(f"❌ {failed} run(s) failed; see the per-seed table")
    else:
        print(f"✅ {len(rows)} cell(s) completed")
    return EXIT_ERROR if failed and not any(r.per_seed for r in rows) else EXIT_OK


def cmd_dump_embeddings(args) -> int:
    config = load_config(args.config) if args.config else None
    n_rows = run_dump_embeddings(args.checkpoint, args.partition, args.out, config)
    print(f"✅ {n_rows} embedding rows written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofdiar", description="Spoof diarization experiments")
    parser.add_argument("--log-level", help="Override SPOOFDIAR_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="Experiment INI file")
        return p

    def with_inference(p):
        p.add_argument("--threshold", type=float, help="Bona fide score threshold")
        k_group = p.add_mutually_exclusive_group()
        k_group.add_argument("--oracle-k", action="store_true", help="Cluster count from the reference")
        k_group.add_argument("--k", type=int, help="Fixed cluster count")
        return p

    p = with_config(sub.add_parser("generate", help="Generate a synthetic corpus"))
    p.add_argument("--seed", type=int, help="Override corpus.seed")
    p.add_argument("--out", help="Corpus directory")
    p.set_defaults(handler=cmd_generate)

    p = with_config(sub.add_parser("train", help="Train one or all configured seeds"), required=True)
    p.add_argument("--seed", type=int, help="Train only this seed")
    p.add_argument("--out", help="Override experiment.out_dir")
    with_inference(p)
    p.set_defaults(handler=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="Diarize and score a partition"))
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--seed", type=int, help="Evaluate <out_dir>/<name>/seed_<n>/best.ckpt (needs --config)")
    p.add_argument("--partition", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out", help="Output directory (default: next to the checkpoint)")
    p.add_argument("--embeddings", action="store_true", help="Also dump frame embeddings")
    with_inference(p)
    p.set_defaults(handler=cmd_evaluate)

    p = with_config(sub.add_parser("score", help="Score hypothesis label files"))
    p.add_argument("--ref", required=True, help="Reference label file")
    p.add_argument("--hyp", required=True, help="Hypothesis label file")
    p.add_argument("--mask", help="Speech mask file")
    p.add_argument("--scores", help="Bona fide score sidecar (enables EER and the LCM audit)")
    p.add_argument("--out", help="Report path")
    p.add_argument("--threshold", type=float, help="Bona fide score threshold")
    p.set_defaults(handler=cmd_score)

    p = with_config(sub.add_parser("ablate", help="Run an ablation grid"))
    p.add_argument("--grid", required=True, help="Grid INI file")
    p.add_argument("--out", help="Override experiment.out_dir")
    p.add_argument("--n-jobs", type=int, help="Parallel runs (default SPOOFDIAR_N_JOBS or 1)")
    with_inference(p)
    p.set_defaults(handler=cmd_ablate)

    p = with_config(sub.add_parser("dump-embeddings", help="Write per-frame embeddings as TSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out", required=True, help="TSV output path")
    p.set_defaults(handler=cmd_dump_embeddings)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(args.log_level)
    threads = env_int("SPOOFDIAR_TORCH_THREADS", 0)
    if threads > 0:
        torch.set_num_threads(threads)

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("config_error", command=args.command, error=str(e))
        print(f"❌ Configuration error: {e}")
        return EXIT_USAGE
    except SpoofDiarError as e:
        logger.error("command_failed", command=args.command, error_type=type(e).__name__, error=str(e))
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_ERROR
    except FileNotFoundError as e:
        logger.error("file_not_found", command=args.command, error=str(e))
        print(f"❌ {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
