import argparse
import logging
import os
import sys

from afrd import pipeline, storage
from afrd.config import build_run_config, settings, write_effective_config
from afrd.errors import AfrdError, ConfigError
from afrd.models import RunStatus
from afrd.services import datagen
from afrd.services.dataset import load_dataset
from afrd.services.scoring import OracleScorer

logger = logging.getLogger(__name__)

ECHO_FILE = "effective_config.ini"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _count(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {raw!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {raw!r}") from None
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"need at least one non-negative seed, got {raw!r}")
    return seeds


def _abs(path: str | None) -> str | None:
    return os.path.abspath(path) if path else None


def _require(value, flag: str):
    if not value:
        raise ConfigError(f"{flag} is required (flag or [paths] entry in --config)")
    return value


def cmd_generate(args: argparse.Namespace) -> int:
    scene = {
        "seed": args.seed,
        "n_lightings": args.lightings,
        "image_size": args.size,
        "category": args.category,
        "n_train": args.train,
        "n_test_normal": args.test_normal,
        "n_test_anomalous": args.test_anomalous,
        "anomaly_rate": args.anomaly_rate,
    }
    config = build_run_config(args.config, {"scene": scene, "paths": {"out": _abs(args.out)}})
    spec = config.scene
    out = _require(config.paths.out, "--out")
    n_normal, n_anomalous = spec.n_test_normal, spec.n_test_anomalous
    if args.test is not None:
        n_normal, n_anomalous = datagen.split_counts(args.test, spec.anomaly_rate)

    datagen.generate(spec, spec.n_train, n_normal, n_anomalous, out, jobs=args.jobs)
    write_effective_config(config, os.path.join(out, ECHO_FILE))
    digest = datagen.tree_hash(out)
    logger.info("Dataset written to %s", out)
    print(digest)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "train": {
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "batch_size": args.batch,
            "seed": args.seed,
        },
        "paths": {"data": [_abs(args.data)] if args.data else None, "out_ckpt": _abs(args.out_ckpt)},
    }
    config = build_run_config(args.config, overrides)
    data = _require(config.paths.data, "--data")[0]
    ckpt = _require(config.paths.out_ckpt, "--out-ckpt")

    train_sets, _ = load_dataset(data)
    if not train_sets:
        raise ConfigError(f"{data} has no training sets")
    first = train_sets[0]
    variant = args.fusion or config.model.fusion
    model_config = pipeline.parse_variant(variant, config.model, first.n_lightings, first.size[0])
    config = config.model_copy(update={"model": model_config})
    write_effective_config(config, os.path.join(os.path.dirname(ckpt), ECHO_FILE))

    _, report = pipeline.run_training(config, model_config.fusion, train_sets, checkpoint_path=ckpt)
    if report.losses:
        logger.info("Final epoch loss %.6f", report.losses[-1])
    print(ckpt)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    overrides = {
        "score": {"smooth_sigma": args.sigma, "image_score": args.image_score, "topk": args.topk},
        "paths": {
            "data": [_abs(args.data)] if args.data else None,
            "ckpt": _abs(args.ckpt),
            "report": _abs(args.report),
            "maps_dir": _abs(args.maps_dir),
        },
    }
    config = build_run_config(args.config, overrides)
    data = _require(config.paths.data, "--data")[0]
    report_dir = _require(config.paths.report, "--report")

    if args.scorer == "oracle":
        scorer = OracleScorer()
    else:
        scorer = storage.load_checkpoint(_require(config.paths.ckpt, "--ckpt"))
        config = config.model_copy(update={"model": scorer.config})
    _, test_sets = load_dataset(data)
    write_effective_config(config, os.path.join(report_dir, ECHO_FILE))

    report = pipeline.run_evaluation(
        scorer, test_sets, config, report_dir=report_dir, maps_dir=config.paths.maps_dir
    )
    print(f"i_auroc {report.i_auroc:.6f}")
    print(f"p_auroc {'n/a' if report.p_auroc is None else f'{report.p_auroc:.6f}'}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    overrides = {
        "train": {"epochs": args.epochs},
        "paths": {"data": [_abs(d) for d in args.data] if args.data else None, "out": _abs(args.out)},
    }
    config = build_run_config(args.config, overrides)
    roots = _require(config.paths.data, "--data")
    out = _require(config.paths.out, "--out")
    write_effective_config(config, os.path.join(out, ECHO_FILE))

    runs = pipeline.run_ablation(config, roots, out, args.seeds, jobs=args.jobs)
    failed = [r for r in runs if r.status is RunStatus.FAILED]
    if failed:
        logger.error("%d of %d ablation runs failed", len(failed), len(runs))
        return 1
    print(os.path.join(out, "summary.md"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afrd", description="Multi-lighting reverse-distillation anomaly detection"
    )
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, help="overrides AFRD_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic multi-lighting dataset")
    gen.add_argument("--config")
    gen.add_argument("--out")
    gen.add_argument("--seed", type=_count)
    gen.add_argument("--lightings", type=int)
    gen.add_argument("--size", type=int)
    gen.add_argument("--category", choices=["dome", "ridge", "ring"])
    gen.add_argument("--train", type=_count)
    gen.add_argument("--test-normal", type=_count)
    gen.add_argument("--test-anomalous", type=_count)
    gen.add_argument("--test", type=_count, help="test total, split by --anomaly-rate")
    gen.add_argument("--anomaly-rate", type=float)
    gen.add_argument("--jobs", type=int)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="distil a model on the normal training sets")
    tr.add_argument("--config")
    tr.add_argument("--data")
    tr.add_argument("--out-ckpt")
    tr.add_argument("--epochs", type=_count)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--seed", type=_count)
    tr.add_argument("--fusion", help="attention | mean | single:<j>")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score the test split and write reports")
    ev.add_argument("--config")
    ev.add_argument("--data")
    ev.add_argument("--ckpt")
    ev.add_argument("--report")
    ev.add_argument("--maps-dir")
    ev.add_argument("--sigma", type=float)
    ev.add_argument("--image-score", choices=["max", "topk"])
    ev.add_argument("--topk", type=int)
    ev.add_argument("--scorer", choices=["model", "oracle"], default="model")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="single-lighting / mean / attention comparison")
    ab.add_argument("--config")
    ab.add_argument("--data", nargs="+")
    ab.add_argument("--out")
    ab.add_argument("--epochs", type=_count)
    ab.add_argument("--seeds", type=_seed_list, default=[0])
    ab.add_argument("--jobs", type=int)
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)

    level = (args.log_level or settings.log_level).upper()
    if level not in LOG_LEVELS:
        print(f"afrd: unknown log level {level!r} (AFRD_LOG_LEVEL)", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return 2
    except (AfrdError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
