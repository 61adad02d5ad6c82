import argparse
import logging
import os
import sys

from cli import commands
from core.errors import ConfigurationError, DirlError, TrainingAborted
from schemas.config import TrainingMode

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def configure_logging() -> None:
    level = os.environ.get("DIRL_KIT_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dirl-kit", description="Domain-invariant representation learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=False, with_force=True):
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--seed", type=int, help="overrides scenario.seed and train.seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if with_mode:
            p.add_argument("--mode", choices=[m.value for m in TrainingMode])
        if with_force:
            p.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    gen = sub.add_parser("gen-data", help="write the synthetic datasets as CSV")
    common(gen, with_force=False)

    train = sub.add_parser("train", help="train one mode")
    common(train, with_mode=True)
    train.add_argument("--data", help="directory with source/target_train/target_test CSVs")
    train.add_argument("--no-progress", action="store_true")

    compare = sub.add_parser("compare", help="train every compared mode on identical data")
    common(compare)
    compare.add_argument("--data", help="directory with source/target_train/target_test CSVs")
    compare.add_argument("--jobs", type=int, default=1, help="worker processes")

    evaluate = sub.add_parser("eval", help="re-evaluate a finished run directory")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("--data", help="directory with source/target_train/target_test CSVs")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "gen-data":
        commands.cmd_gen_data(args.config, out=args.out, seed=args.seed)
    elif args.command == "train":
        commands.cmd_train(args.config, seed=args.seed, mode=args.mode, out=args.out, force=args.force,
                           data_dir=args.data, progress=not args.no_progress)
    elif args.command == "compare":
        if args.jobs < 1:
            raise ConfigurationError(f"--jobs must be at least 1, got {args.jobs}")
        _, ok = commands.cmd_compare(args.config, seed=args.seed, out=args.out, force=args.force,
                                     jobs=args.jobs, data_dir=args.data)
        if not ok:
            print("❌ Error: at least one comparison run failed; table is partial")
            return EXIT_RUNTIME
    elif args.command == "eval":
        commands.cmd_eval(args.run_dir, data_dir=args.data)
    return EXIT_OK


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigurationError as e:
        print(f"❌ Error: {str(e)}")
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"❌ Training aborted: {str(e)}")
        return EXIT_RUNTIME
    except (DirlError, OSError) as e:
        print(f"❌ Error: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
