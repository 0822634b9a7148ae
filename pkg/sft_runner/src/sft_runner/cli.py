"""Command line for the fine-tuning runner."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import RunnerError
from .train import TrainingJob, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sft-runner", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("train", help="run supervised fine-tuning on an exported dataset")
    p.add_argument("--dataset", required=True, help="records JSONL from the exporter")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.add_argument("--base-model", default="stub-vlm")
    p.add_argument("--max-steps", type=int, default=50)
    p.add_argument("--micro-batch-size", type=int, default=4)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--patience", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-token-count", type=int, default=8)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command != "train":
        build_parser().print_help(sys.stderr)
        return 2
    job = TrainingJob(
        dataset_path=args.dataset,
        manifest_path=args.manifest,
        output_dir=args.out,
        base_model=args.base_model,
        max_steps=args.max_steps,
        micro_batch_size=args.micro_batch_size,
        eval_every=args.eval_every,
        patience=args.patience,
        seed=args.seed,
        image_token_count=args.image_token_count,
    )
    try:
        result = train(job)
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"trained {result.steps_run} steps; best step {result.best_step} "
          f"(val loss {result.best_val_loss:.4f}); checkpoint at {result.checkpoint_path}")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
