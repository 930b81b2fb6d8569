import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata
from sklearn.metrics import roc_curve

from afrd.config import ScoreConfig, worker_count
from afrd.errors import AfrdError, DatasetError, MetricUndefinedError, ScoringError, ShapeError
from afrd.models import AnomalyResult, EvalReport, ImageSet, Label
from afrd.services import tensor as T
from afrd.services.network import AfrdModel, forward, stack_sets, teacher_features

logger = logging.getLogger(__name__)


def anomaly_maps(model: AfrdModel, sets: Sequence[ImageSet]) -> np.ndarray:
    """Unsmoothed [B, H, W] maps: sum over levels of upsampled clip(1 - cos, 0, 2)."""
    size = model.config.image_size
    with T.no_grad():
        feats = teacher_features(model, stack_sets(model, sets))
        fused, _, decoded = forward(model, feats)
        total = np.zeros((len(sets), size, size), dtype=np.float64)
        for target, student in zip(fused.levels, decoded.levels):
            distance = np.clip(1.0 - T.cosine_map(target, student).data, 0.0, 2.0)
            up = T.bilinear_upsample(T.Tensor(distance[:, None]), size, size)
            total += up.data[:, 0]
    return total


def smooth(anomaly_map: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur truncated at 4 sigma with reflective borders; sigma 0 is the identity."""
    if sigma <= 0:
        return anomaly_map
    return gaussian_filter(anomaly_map, sigma=sigma, mode="reflect", truncate=4.0)


def image_score(anomaly_map: np.ndarray, mode: str = "max", topk: int = 10) -> float:
    if mode == "max":
        return float(anomaly_map.max())
    if mode == "topk":
        flat = np.sort(anomaly_map, axis=None)
        return float(flat[-min(topk, flat.size) :].mean())
    raise ValueError(f"unknown image score {mode!r}")


class Scorer(ABC):
    @abstractmethod
    def raw_map(self, image_set: ImageSet) -> np.ndarray:
        """[H, W] map before smoothing."""


class ModelScorer(Scorer):
    def __init__(self, model: AfrdModel):
        self.model = model.eval()
        self.bad_param = model.non_finite()

    def raw_map(self, image_set: ImageSet) -> np.ndarray:
        if self.bad_param is not None:
            raise ScoringError(image_set.sample_id, f"parameter {self.bad_param} is not finite")
        return anomaly_maps(self.model, [image_set])[0]


class OracleScorer(Scorer):
    """Returns the ground-truth mask as the map; checks the metric harness, not a model."""

    def raw_map(self, image_set: ImageSet) -> np.ndarray:
        h, w = image_set.size
        if image_set.mask is None:
            return np.zeros((h, w))
        return image_set.mask.astype(np.float64)


def _as_scorer(model_or_scorer) -> Scorer:
    if isinstance(model_or_scorer, Scorer):
        return model_or_scorer
    return ModelScorer(model_or_scorer)


def score(
    model_or_scorer,
    image_set: ImageSet,
    smooth_sigma: float = 4.0,
    *,
    mode: str = "max",
    topk: int = 10,
) -> AnomalyResult:
    scorer = _as_scorer(model_or_scorer)
    raw = scorer.raw_map(image_set)
    if not np.isfinite(raw).all():
        raise ScoringError(image_set.sample_id, "anomaly map contains NaN or inf")
    smoothed = smooth(raw, smooth_sigma)
    return AnomalyResult(
        map=smoothed,
        image_score=image_score(smoothed, mode, topk),
        sample_id=image_set.sample_id,
    )


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with mid-ranks, equal to P(s+ > s-) + P(s+ = s-) / 2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError("auroc", 0, s.shape[0], y.shape[0])
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    positive = y == 1
    n_pos = int(positive.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"AUROC needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(s, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(
    results: Sequence[AnomalyResult], masks: Sequence[np.ndarray | None], labels: Sequence[int]
) -> float:
    """AUROC over every pixel of every map; a normal sample without a mask counts as all-normal."""
    for other in (masks, labels):
        if len(other) != len(results):
            raise ShapeError("pixel_auroc", 0, len(results), len(other))
    scores, pixel_labels = [], []
    for result, mask, label in zip(results, masks, labels):
        if mask is None:
            if label == 1:
                raise DatasetError("anomalous sample has no mask", sample_id=result.sample_id)
            mask = np.zeros(result.map.shape, dtype=bool)
        if mask.shape != result.map.shape:
            raise ShapeError("pixel_auroc", result.sample_id, result.map.shape, mask.shape)
        scores.append(result.map.ravel())
        pixel_labels.append(mask.ravel().astype(np.int8))
    if not scores:
        raise MetricUndefinedError("no maps to pool")
    pooled_labels = np.concatenate(pixel_labels)
    if not pooled_labels.any():
        raise MetricUndefinedError("no anomalous pixels in the pool")
    return auroc(np.concatenate(scores), pooled_labels)


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    fpr, tpr, thresholds = roc_curve(
        np.asarray(labels), np.asarray(scores, dtype=np.float64), drop_intermediate=False
    )
    return fpr, tpr, thresholds


def evaluate(
    model_or_scorer,
    test_sets: Sequence[ImageSet],
    smooth_sigma: float = 4.0,
    *,
    score_config: ScoreConfig | None = None,
    jobs: int | None = None,
) -> EvalReport:
    """Score every test set (in parallel, results in input order) and compute I-/P-AUROC."""
    score_config = score_config or ScoreConfig(smooth_sigma=smooth_sigma)
    sigma = score_config.smooth_sigma
    scorer = _as_scorer(model_or_scorer)

    def run(image_set: ImageSet) -> AnomalyResult:
        try:
            return score(scorer, image_set, sigma, mode=score_config.image_score, topk=score_config.topk)
        except ScoringError:
            raise
        except AfrdError as e:
            raise ScoringError(image_set.sample_id, str(e)) from e

    workers = worker_count(jobs)
    if workers == 1:
        results = [run(s) for s in test_sets]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, test_sets))

    labels = [s.label.as_int for s in test_sets]
    scores = [r.image_score for r in results]
    i_auroc = auroc(scores, labels)

    p_auroc = None
    anomalous = [s for s in test_sets if s.label is Label.ANOMALOUS]
    if anomalous and all(s.mask is not None for s in anomalous):
        p_auroc = pixel_auroc(results, [s.mask for s in test_sets], labels)
    elif anomalous:
        logger.warning("Skipping P-AUROC: %d anomalous samples lack masks", sum(s.mask is None for s in anomalous))

    logger.info(
        "Evaluated %d sets: I-AUROC=%.4f P-AUROC=%s",
        len(test_sets),
        i_auroc,
        "n/a" if p_auroc is None else f"{p_auroc:.4f}",
    )
    return EvalReport(
        i_auroc=i_auroc,
        p_auroc=p_auroc,
        rows=[(s.sample_id, s.label.as_int, r.image_score) for s, r in zip(test_sets, results)],
        roc=roc_points(scores, labels),
        results=results,
    )
