import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader
from pydantic import ValidationError

from afrd import storage
from afrd.config import ModelConfig, RunConfig, worker_count
from afrd.errors import ConfigError, TrainingError
from afrd.models import EvalReport, ImageSet, RunStatus, TrainReport, VariantRun
from afrd.services import scoring, trainer
from afrd.services.dataset import load_dataset
from afrd.services.network import AfrdModel, model_init
from afrd.services.scoring import Scorer

logger = logging.getLogger(__name__)

_TEMPLATES = Environment(
    loader=FileSystemLoader(os.path.join(os.path.dirname(__file__), "templates")),
    keep_trailing_newline=True,
)


def parse_variant(
    variant: str, base: ModelConfig, n_dataset_lightings: int, image_size: int | None = None
) -> ModelConfig:
    """Model config for ``attention``, ``mean`` or ``single:<j>`` on an N-lighting dataset."""
    update: dict = {} if image_size is None else {"image_size": image_size}
    if variant in ("attention", "mean"):
        update["fusion"] = variant
        if base.lightings is None:
            update["n_lightings"] = n_dataset_lightings
    elif variant.startswith("single:"):
        raw = variant.split(":", 1)[1]
        try:
            j = int(raw)
        except ValueError:
            raise ConfigError(f"single:<j> needs an integer lighting index, got {raw!r}") from None
        if not 0 <= j < n_dataset_lightings:
            raise ConfigError(f"lighting {j} out of range for a {n_dataset_lightings}-lighting dataset")
        update.update(fusion="attention", n_lightings=1, lightings=[j])
    else:
        raise ConfigError(f"unknown fusion variant {variant!r}; use attention, mean or single:<j>")

    if base.lightings is not None and max(base.lightings) >= n_dataset_lightings:
        raise ConfigError(f"lightings {base.lightings} out of range for a {n_dataset_lightings}-lighting dataset")
    try:
        return ModelConfig.model_validate({**base.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid model config for {variant}: {e}") from e


def run_training(
    config: RunConfig,
    variant: str,
    train_sets: Sequence[ImageSet],
    *,
    seed: int | None = None,
    checkpoint_path: str | None = None,
    progress_callback: Callable[[int, int], None] | None = None,
) -> tuple[AfrdModel, TrainReport]:
    if not train_sets:
        raise TrainingError("training set is empty")
    seed = config.train.seed if seed is None else seed
    first = train_sets[0]
    model_config = parse_variant(variant, config.model, first.n_lightings, first.size[0])
    model = model_init(model_config, seed)
    train_config = config.train.model_copy(update={"seed": seed})
    report, state = trainer.train(model, train_sets, train_config, progress_callback=progress_callback)
    if checkpoint_path:
        storage.save_checkpoint(model, state, checkpoint_path)
        report.checkpoint_path = checkpoint_path
        storage.write_train_report(report, checkpoint_path, model_config.levels)
    return model, report


def run_evaluation(
    model_or_scorer: AfrdModel | Scorer,
    test_sets: Sequence[ImageSet],
    config: RunConfig,
    *,
    report_dir: str | None = None,
    maps_dir: str | None = None,
) -> EvalReport:
    report = scoring.evaluate(model_or_scorer, test_sets, score_config=config.score)
    if report_dir:
        storage.write_eval_report(report, report_dir)
    if maps_dir:
        for result in report.results:
            storage.export_map(result, maps_dir)
    return report


def run_variant(
    run: VariantRun, config: RunConfig, train_sets: Sequence[ImageSet], test_sets: Sequence[ImageSet]
) -> VariantRun:
    """Train then evaluate one ablation cell, recording stage, timings and failures on ``run``."""
    try:
        run.status = RunStatus.TRAINING
        run.stage_detail = "Training..."

        def on_progress(done: int, total: int) -> None:
            run.stage_detail = f"Training... (epoch {done}/{total})"

        t0 = time.monotonic()
        model, report = run_training(
            config, run.variant, train_sets, seed=run.seed, progress_callback=on_progress
        )
        run.train_time = time.monotonic() - t0
        if report.omega:
            run.omega = [w.tolist() for w in report.omega[-1]]

        run.status = RunStatus.EVALUATING
        run.stage_detail = "Scoring test sets..."
        t0 = time.monotonic()
        result = scoring.evaluate(model, test_sets, score_config=config.score, jobs=1)
        run.eval_time = time.monotonic() - t0
        run.i_auroc = result.i_auroc
        run.p_auroc = result.p_auroc

        run.status = RunStatus.COMPLETED
        run.stage_detail = "Done"
        logger.info(
            "Run %s: I-AUROC=%.4f P-AUROC=%s (train %.1fs, eval %.1fs)",
            run.id,
            run.i_auroc,
            "n/a" if run.p_auroc is None else f"{run.p_auroc:.4f}",
            run.train_time,
            run.eval_time,
        )
    except Exception as e:
        logger.exception("Run %s failed", run.id)
        run.status = RunStatus.FAILED
        run.error = str(e)
    return run


def ablation_variants(n_lightings: int) -> list[str]:
    variants = [f"single:{j}" for j in range(n_lightings)]
    if n_lightings >= 2:
        variants.append("mean")
    variants.append("attention")
    return variants


def _mean(values: list[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def _cell(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def summarize_runs(runs: Sequence[VariantRun], variants: Sequence[str]) -> list[dict]:
    """Seed-averaged rows in variant order; failed runs are left out of the averages."""
    rows = []
    for variant in variants:
        done = [r for r in runs if r.variant == variant and r.status is RunStatus.COMPLETED]
        rows.append(
            {
                "variant": variant,
                "i_auroc": _mean([r.i_auroc for r in done]),
                "p_auroc": _mean([r.p_auroc for r in done]),
                "seeds": len(done),
            }
        )
    return rows


def _write_rows(path: str, header: list[str], rows: list[list]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _best(rows: list[dict]) -> dict | None:
    scored = [r for r in rows if r["i_auroc"] is not None]
    return max(scored, key=lambda r: r["i_auroc"]) if scored else None


def _spread(rows: list[dict]) -> float | None:
    singles = [r["i_auroc"] for r in rows if r["variant"].startswith("single:") and r["i_auroc"] is not None]
    return max(singles) - min(singles) if len(singles) >= 2 else None


def run_ablation(
    config: RunConfig,
    roots: Sequence[str],
    out_dir: str,
    seeds: Sequence[int],
    *,
    jobs: int | None = None,
) -> list[VariantRun]:
    """Train/evaluate every single-lighting, mean and attention variant over ``seeds`` on each root.

    Writes ``ablation.csv`` and ``ablation_seeds.csv`` per dataset (in a
    per-category subdirectory when several roots are given), a long-format
    ``categories.csv`` across roots and a ``summary.md``.
    """
    if not roots:
        raise ConfigError("ablation needs at least one dataset root")
    os.makedirs(out_dir, exist_ok=True)
    all_runs: list[VariantRun] = []
    sections = []
    long_rows: list[list] = []
    per_variant: dict[str, list[dict]] = {}

    for root in roots:
        category = os.path.basename(os.path.normpath(root))
        train_sets, test_sets = load_dataset(root)
        if not train_sets:
            raise ConfigError(f"{root}: no training sets")
        n = train_sets[0].n_lightings
        if n < 2:
            logger.warning("%s has a single lighting; ablation reduces to single:0 and attention", root)
        variants = ablation_variants(n)
        runs = [VariantRun(variant=v, seed=s, category=category) for v in variants for s in seeds]
        logger.info("Ablating %s: %d variants x %d seeds", category, len(variants), len(seeds))

        def execute(run: VariantRun) -> VariantRun:
            return run_variant(run, config, train_sets, test_sets)

        workers = worker_count(jobs)
        if workers == 1:
            for run in runs:
                execute(run)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(execute, runs))
        all_runs.extend(runs)

        rows = summarize_runs(runs, variants)
        target = out_dir if len(roots) == 1 else os.path.join(out_dir, category)
        _write_rows(
            os.path.join(target, "ablation.csv"),
            ["variant", "i_auroc", "p_auroc"],
            [[r["variant"], _cell(r["i_auroc"]), _cell(r["p_auroc"])] for r in rows],
        )
        _write_rows(
            os.path.join(target, "ablation_seeds.csv"),
            ["variant", "seed", "status", "i_auroc", "p_auroc"],
            [[r.variant, r.seed, r.status.value, _cell(r.i_auroc), _cell(r.p_auroc)] for r in runs],
        )
        for r in rows:
            long_rows.append([category, r["variant"], _cell(r["i_auroc"]), _cell(r["p_auroc"])])
            per_variant.setdefault(r["variant"], []).append(r)
        sections.append({"category": category, "rows": rows, "best": _best(rows), "spread": _spread(rows)})

    if len(roots) > 1:
        for variant, rows in per_variant.items():
            if len(rows) == len(roots):
                i_avg = _mean([r["i_auroc"] for r in rows])
                p_avg = _mean([r["p_auroc"] for r in rows])
                long_rows.append(["average", variant, _cell(i_avg), _cell(p_avg)])
        _write_rows(
            os.path.join(out_dir, "categories.csv"), ["category", "variant", "i_auroc", "p_auroc"], long_rows
        )

    failed = [r for r in all_runs if r.status is RunStatus.FAILED]
    summary = _TEMPLATES.get_template("ablation_summary.md.j2").render(
        sections=sections, seeds=list(seeds), failed=failed, fmt=_cell
    )
    with open(os.path.join(out_dir, "summary.md"), "w", encoding="utf-8") as f:
        f.write(summary)
    return all_runs
