import logging
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Sequence

import numpy as np

from afrd.errors import ShapeError
from afrd.models import AttentionWeights, FeaturePyramid
from afrd.services import tensor as T
from afrd.services.tensor import Tensor

if TYPE_CHECKING:
    from afrd.services.network import AfrdModel

logger = logging.getLogger(__name__)


def attention_weights(model: "AfrdModel", feats: Sequence[FeaturePyramid], level: int) -> Tensor:
    """omega = softmax(FC(concat(flatten(F^j)))) for one pyramid level, shape [B, N].

    In pooled mode each map is globally averaged before flattening, so the FC
    sees N * C_l inputs; literal mode flattens the full maps.
    """
    if len(feats) != model.n_lightings:
        raise ShapeError("attention_weights", "lightings", model.n_lightings, len(feats))
    if not model.attention:
        raise ValueError("model was built without an attention module")
    maps = [f.levels[level] for f in feats]
    if model.config.attention_input == "pooled":
        vectors = [T.global_avg_pool(m) for m in maps]
    else:
        vectors = [T.flatten(m) for m in maps]
    logits = model.attention[level](T.concat(vectors, axis=1))
    return T.softmax(logits, axis=1)


def _as_weight_tensor(weights, batch: int, n: int) -> Tensor:
    if not isinstance(weights, Tensor):
        arr = np.asarray(weights, dtype=T.get_default_dtype())
        if arr.ndim == 1:
            arr = np.broadcast_to(arr, (batch, arr.shape[0])).copy()
        weights = Tensor(arr)
    if weights.shape != (batch, n):
        raise ShapeError("attention_fuse", "weights", (batch, n), weights.shape)
    return weights


def attention_fuse(feats: Sequence[FeaturePyramid], omega: Sequence) -> FeaturePyramid:
    """F_f = sum_j omega_j * F^j, level by level. ``omega`` holds one [B, N] (or [N]) entry per level."""
    n = len(feats)
    if n == 0:
        raise ShapeError("attention_fuse", "lightings", ">= 1", 0)
    ref = feats[0]
    if len(omega) != len(ref):
        raise ShapeError("attention_fuse", "levels", len(ref), len(omega))
    for j, pyramid in enumerate(feats[1:], start=1):
        if len(pyramid) != len(ref):
            raise ShapeError("attention_fuse", f"lighting {j} levels", len(ref), len(pyramid))
        for l, (a, b) in enumerate(zip(ref.levels, pyramid.levels)):
            if a.shape != b.shape:
                raise ShapeError("attention_fuse", f"lighting {j} level {l}", a.shape, b.shape)

    fused = []
    for l in range(len(ref)):
        batch = ref.levels[l].shape[0]
        w = _as_weight_tensor(omega[l], batch, n)
        acc = None
        for j in range(n):
            wj = T.reshape(T.take(w, 1, j), (batch, 1, 1, 1))
            term = T.mul(wj, feats[j].levels[l])
            acc = term if acc is None else T.add(acc, term)
        fused.append(acc)
    return FeaturePyramid(fused)


class Fusion(ABC):
    @abstractmethod
    def weights(self, model: "AfrdModel", feats: Sequence[FeaturePyramid], level: int) -> Tensor:
        ...

    def fuse(
        self, model: "AfrdModel", feats: Sequence[FeaturePyramid]
    ) -> tuple[FeaturePyramid, AttentionWeights]:
        omega = [self.weights(model, feats, l) for l in range(len(feats[0]))]
        fused = attention_fuse(feats, omega)
        return fused, AttentionWeights([w.data.copy() for w in omega])


class AttentionFusion(Fusion):
    def weights(self, model, feats, level):
        return attention_weights(model, feats, level)


class MeanFusion(Fusion):
    """Constant omega = 1/N; no parameters involved."""

    def weights(self, model, feats, level):
        n = len(feats)
        if n != model.n_lightings:
            raise ShapeError("mean_fusion", "lightings", model.n_lightings, n)
        batch = feats[0].levels[level].shape[0]
        return Tensor(np.full((batch, n), 1.0 / n))


_FUSION_MAP = {
    "attention": AttentionFusion,
    "mean": MeanFusion,
}


def get_fusion(name: str) -> Fusion:
    try:
        return _FUSION_MAP[name]()
    except KeyError:
        raise ValueError(f"unknown fusion {name!r}; expected one of {sorted(_FUSION_MAP)}") from None
