"""Command-line entry point.

    recattack run --attack exclusive --train --seed 0 --out report.csv
    recattack gen-data --seed 0 --count 100 --out val.jsonl
    recattack train --seed 0 --out model.ckpt
"""

import argparse
import logging
import sys

import recattack

from .attacks import ATTACK_KINDS
from .evaluation import ConfigError, ExperimentConfig, derive_seeds, render_report, run_experiment
from .grounder import TrainConfig, init_model, save_checkpoint, train
from .scenegen import generate_dataset, save_dataset
from .tensorio import FormatError

EXIT_CODES = {"config": 2, "io": 3, "format": 4, "numeric": 5}


def _train_args(p):
    p.add_argument("--train-size", type=int, default=ExperimentConfig.train_count, help="training scenes")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recattack", description=recattack.__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate clean and attacked IoU@0.5")
    run.add_argument("--attack", choices=ATTACK_KINDS, default="none")
    run.add_argument("--epsilon", type=float, default=16.0, help="l-inf radius on the 0-255 scale")
    run.add_argument("--alpha", type=float, default=1.0, help="PGD step on the 0-255 scale")
    run.add_argument("--iters", type=int, default=100)
    run.add_argument("--seed", type=int, default=0, help="master seed")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--train", action="store_true", help="train the victim from scratch")
    src.add_argument("--checkpoint", help="load the victim from this checkpoint")
    run.add_argument("--save-checkpoint", help="with --train, also write the trained model here")
    run.add_argument("--dataset-size", type=int, default=100, help="evaluation scenes")
    run.add_argument("--dataset", help="evaluate on this dataset file instead of generated scenes")
    run.add_argument("--out", default="report.csv")
    run.add_argument("--format", choices=("csv", "markdown"), default="csv")
    _train_args(run)

    gen = sub.add_parser("gen-data", help="write a generated split to disk")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--split", choices=("train", "val"), default="val")
    gen.add_argument("--train-size", type=int, default=ExperimentConfig.train_count,
                     help="size of the train split the val scenes follow (matches run)")
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train the victim and save a checkpoint")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    _train_args(tr)
    return parser


def _run(args) -> None:
    cfg = ExperimentConfig(
        attack=args.attack, seed=args.seed, train_count=args.train_size, eval_count=args.dataset_size,
        dataset_path=args.dataset, train_model=args.train,
        checkpoint=args.checkpoint or args.save_checkpoint, train_config=_train_config(args),
        epsilon=args.epsilon, alpha=args.alpha, iters=args.iters, out=args.out, fmt=args.format)
    report = run_experiment(cfg)
    sys.stdout.write(render_report(report, args.format))


def _gen(args) -> None:
    """Same seed stream as ``run``: val scenes are exactly the ones ``run`` evaluates."""
    seed = derive_seeds(args.seed)["dataset"]
    if args.split == "train":
        split, _ = generate_dataset(seed, args.count, 1)
    else:
        _, split = generate_dataset(seed, args.train_size, args.count)
    save_dataset(split, args.out)


def _train(args) -> None:
    seeds = derive_seeds(args.seed)
    train_split, _ = generate_dataset(seeds["dataset"], args.train_size, 1)
    cfg = _train_config(args)
    cfg.seed = seeds["train_shuffle"]
    result = train(init_model(seeds["model_init"]), train_split.scenes, cfg)
    save_checkpoint(result.model, args.out)
    for epoch, loss in enumerate(result.epoch_losses):
        print(f"epoch {epoch} loss {loss:.4f}")


def _category(exc: BaseException) -> str:
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, (ConfigError, ValueError)):
        return "config"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "gen-data": _gen, "train": _train}[args.command]
    try:
        handler(args)
    except Exception as exc:  # noqa: BLE001
        category = _category(exc)
        message = " ".join(str(exc).split())
        print(f"error: {category}: {message}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
