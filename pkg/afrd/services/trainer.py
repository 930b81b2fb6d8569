import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from afrd.config import TrainConfig
from afrd.errors import ConfigError, ShapeError, TrainingError
from afrd.models import AttentionWeights, FeaturePyramid, ImageSet, Label, TrainReport
from afrd.services import tensor as T
from afrd.services.network import AfrdModel, forward, stack_sets, teacher_features
from afrd.services.tensor import Tensor

logger = logging.getLogger(__name__)

ENTROPY_COLLAPSE = 0.05


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def distill_loss(
    fused: FeaturePyramid, decoded: FeaturePyramid, level_weights: Sequence[float] | None = None
) -> Tensor:
    """sum_l w_l * mean_{b,h,w}(1 - cos(F_f^l, F_d^l)) over the channel axis."""
    if len(fused) != len(decoded):
        raise ShapeError("distill_loss", "levels", len(fused), len(decoded))
    weights = list(level_weights) if level_weights is not None else [1.0] * len(fused)
    if len(weights) != len(fused):
        raise ShapeError("distill_loss", "level_weights", len(fused), len(weights))

    total = None
    for l, (target, student, w) in enumerate(zip(fused.levels, decoded.levels, weights)):
        if target.shape != student.shape:
            raise ShapeError("distill_loss", f"level {l}", target.shape, student.shape)
        term = T.mean(1.0 - T.cosine_map(target, student)) * float(w)
        total = term if total is None else total + term
    return total


def adamw_step(
    params: Sequence[tuple[str, Tensor]],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update with decoupled weight decay, applied in place.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves parameters and moments exactly as they were.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    live = []
    for (name, p), g in zip(params, grads):
        if not p.requires_grad:
            continue
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ShapeError("adamw_step", name, p.shape, g.shape)
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in {name} ({bad} of {g.size} entries); step aborted")
        live.append((name, p, g))

    beta1, beta2 = betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, p, g in live:
        m = state.exp_avg.setdefault(name, np.zeros_like(p.data))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        p.data -= (lr * update + lr * weight_decay * p.data).astype(p.data.dtype)


def _check_training_sets(sets: Sequence[ImageSet]) -> None:
    if not sets:
        raise TrainingError("training set is empty")
    for s in sets:
        if s.label is not Label.NORMAL:
            raise TrainingError(f"sample {s.sample_id} is {s.label.value}; training uses normal sets only")
    shapes = {(s.n_lightings, s.size) for s in sets}
    if len(shapes) > 1:
        raise TrainingError(f"training sets disagree on lightings/size: {sorted(shapes)}")


def _cache_teacher(model: AfrdModel, images: np.ndarray, chunk: int) -> list[list[np.ndarray]]:
    """Teacher features for the whole training set, indexed [lighting][level] -> [S, C, H, W]."""
    parts: list[list[list[np.ndarray]]] = [[[] for _ in range(model.config.levels)] for _ in range(model.n_lightings)]
    for start in range(0, len(images), chunk):
        for j, pyramid in enumerate(teacher_features(model, images[start : start + chunk])):
            for l, level in enumerate(pyramid.levels):
                parts[j][l].append(level.data)
    return [[np.concatenate(level) for level in lighting] for lighting in parts]


def train(
    model: AfrdModel,
    train_sets: Sequence[ImageSet],
    config: TrainConfig,
    *,
    state: AdamWState | None = None,
    progress_callback: Callable[[int, int], None] | None = None,
) -> tuple[TrainReport, AdamWState]:
    """Distil the frozen teacher into bottleneck + student (and attention FCs) on normal sets."""
    _check_training_sets(train_sets)
    levels = model.config.levels
    weights = config.level_weights or [1.0] * levels
    if len(weights) != levels:
        raise ConfigError(f"level_weights has {len(weights)} entries, model has {levels} levels")

    state = state or AdamWState()
    report = TrainReport()
    t0 = time.monotonic()
    if config.epochs == 0:
        report.wall_time = time.monotonic() - t0
        return report, state

    images = stack_sets(model, train_sets)
    cache = _cache_teacher(model, images, config.batch_size) if config.cache_teacher else None
    params = model.trainable_parameters()
    rng = np.random.default_rng(config.seed)
    n_sets = len(images)
    n_lightings = model.n_lightings

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n_sets)
        loss_sum = 0.0
        omega_sum = [np.zeros(n_lightings) for _ in range(levels)]
        entropy_sum = [0.0] * levels

        for start in range(0, n_sets, config.batch_size):
            idx = order[start : start + config.batch_size]
            if cache is not None:
                feats = [FeaturePyramid([Tensor(cache[j][l][idx]) for l in range(levels)]) for j in range(n_lightings)]
            else:
                feats = teacher_features(model, images[idx])

            fused, omega, decoded = forward(model, feats)
            loss = distill_loss(fused, decoded, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch + 1}")

            T.zero_grad(p for _, p in params)
            loss.backward()
            adamw_step(
                params,
                [p.grad for _, p in params],
                state,
                config.learning_rate,
                config.betas,
                config.adam_eps,
                config.weight_decay,
            )

            loss_sum += value * len(idx)
            for l, w in enumerate(omega.levels):
                omega_sum[l] += w.sum(axis=0)
            for l, h in enumerate(AttentionWeights(omega.levels).entropy()):
                entropy_sum[l] += h * len(idx)

        report.losses.append(loss_sum / n_sets)
        report.omega.append([s / n_sets for s in omega_sum])
        report.entropy.append([h / n_sets for h in entropy_sum])
        logger.info(
            "Epoch %d/%d loss=%.6f omega entropy=%s",
            epoch + 1,
            config.epochs,
            report.losses[-1],
            " ".join(f"{h:.4f}" for h in report.entropy[-1]),
        )
        if n_lightings > 1 and model.config.fusion == "attention":
            for l, h in enumerate(report.entropy[-1]):
                if h < ENTROPY_COLLAPSE:
                    logger.warning(
                        "Attention weights at level %d collapsed (entropy %.4f, mean omega %s)",
                        l,
                        h,
                        np.round(report.omega[-1][l], 4).tolist(),
                    )
        if progress_callback:
            progress_callback(epoch + 1, config.epochs)

    model.eval()
    report.wall_time = time.monotonic() - t0
    return report, state
