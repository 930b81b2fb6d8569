"""Teacher encoder, per-level attention, bottleneck and student decoder.

Level l of every pyramid sits at 1/2^(l+2) of the input resolution: the
teacher stem halves once with a stride-1 conv followed by 2x average pooling,
then each stage halves again with a stride-2 conv.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, Sequence

import numpy as np

from afrd.config import ModelConfig, worker_count
from afrd.errors import ShapeError
from afrd.models import AttentionWeights, FeaturePyramid, ImageSet
from afrd.services import tensor as T
from afrd.services.fusion import get_fusion
from afrd.services.layers import Conv2d, ConvBnRelu, Layer, Linear, Sequential, UpBnRelu
from afrd.services.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1)
IMAGENET_STD = np.array([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1)


class Encoder(Layer):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.stem = self.add_child("stem", ConvBnRelu(3, config.stem_channels, rng=rng))
        self.stages = []
        prev = config.stem_channels
        for l, c in enumerate(config.channels):
            stage = Sequential(ConvBnRelu(prev, c, stride=2, rng=rng), ConvBnRelu(c, c, rng=rng))
            self.stages.append(self.add_child(f"stage{l}", stage))
            prev = c

    def forward(self, x: Tensor) -> list[Tensor]:
        x = T.avg_pool(self.stem(x), 2)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class Bottleneck(Layer):
    """Stride-2 convs bring every level to the coarsest grid; concat; 1x1 conv to the embedding."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        channels = config.channels
        self.branches = []
        for l in range(config.levels):
            convs = []
            c = channels[l]
            for k in range(l + 1, config.levels):
                convs.append(ConvBnRelu(c, channels[k], stride=2, rng=rng))
                c = channels[k]
            self.branches.append(self.add_child(f"branch{l}", Sequential(*convs)))
        self.project = self.add_child(
            "project", ConvBnRelu(config.levels * channels[-1], config.embed, kernel=1, rng=rng)
        )

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        parts = [branch(level) for branch, level in zip(self.branches, pyramid.levels)]
        return self.project(T.concat(parts, axis=1))


class Decoder(Layer):
    """Mirror of the encoder: coarse-to-fine transposed-conv stages, one conv head per level."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        channels = config.channels
        top = config.levels - 1
        self.entry = self.add_child("entry", ConvBnRelu(config.embed, channels[top], rng=rng))
        self.ups: dict[int, Layer] = {}
        for l in reversed(range(top)):
            block = Sequential(
                UpBnRelu(channels[l + 1], channels[l], rng=rng),
                ConvBnRelu(channels[l], channels[l], rng=rng),
            )
            self.ups[l] = self.add_child(f"up{l}", block)
        self.heads = [
            self.add_child(f"head{l}", Conv2d(c, c, 3, padding=1, rng=rng)) for l, c in enumerate(channels)
        ]

    def forward(self, embedding: Tensor) -> FeaturePyramid:
        top = len(self.heads) - 1
        h = self.entry(embedding)
        out: list[Tensor] = [None] * len(self.heads)
        out[top] = self.heads[top](h)
        for l in reversed(range(top)):
            h = self.ups[l](h)
            out[l] = self.heads[l](h)
        return FeaturePyramid(out)


class AfrdModel:
    """Frozen teacher plus the trainable attention / bottleneck / student set.

    The teacher draws from ``teacher_seed`` alone; the three trainable parts
    draw from independent children of ``seed`` so that variants differing only
    in fusion start from identical bottleneck and student weights.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.teacher = Encoder(config, np.random.default_rng(config.teacher_seed)).freeze()

        att_seq, neck_seq, student_seq = np.random.SeedSequence(seed).spawn(3)
        self.attention: list[Linear] = []
        if config.fusion == "attention":
            att_rng = np.random.default_rng(att_seq)
            n = config.n_lightings
            for c, h, w in config.level_shapes():
                n_in = n * c if config.attention_input == "pooled" else n * c * h * w
                self.attention.append(Linear(n_in, n, rng=att_rng))
        self.bottleneck = Bottleneck(config, np.random.default_rng(neck_seq))
        self.student = Decoder(config, np.random.default_rng(student_seq))

    @property
    def n_lightings(self) -> int:
        return self.config.n_lightings

    def _trainable_modules(self) -> Iterator[tuple[str, Layer]]:
        for l, fc in enumerate(self.attention):
            yield f"attention.{l}.", fc
        yield "bottleneck.", self.bottleneck
        yield "student.", self.student

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.teacher.named_parameters("teacher.")
        for prefix, module in self._trainable_modules():
            yield from module.named_parameters(prefix)

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.teacher.named_buffers("teacher.")
        for prefix, module in self._trainable_modules():
            yield from module.named_buffers(prefix)

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for prefix, module in self._trainable_modules():
            named.extend(module.named_parameters(prefix))
        return named

    def parameter_count(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else list(self.named_parameters())
        return int(sum(p.data.size for _, p in params))

    def train(self) -> "AfrdModel":
        self.teacher.eval()
        for _, module in self._trainable_modules():
            module.train()
        return self

    def eval(self) -> "AfrdModel":
        self.teacher.eval()
        for _, module in self._trainable_modules():
            module.eval()
        return self

    def non_finite(self) -> str | None:
        """Name of the first parameter or buffer holding NaN/inf, if any."""
        for name, p in self.named_parameters():
            if not np.isfinite(p.data).all():
                return name
        for name, buf in self.named_buffers():
            if not np.isfinite(buf).all():
                return name
        return None


def model_init(config: ModelConfig, seed: int = 0) -> AfrdModel:
    model = AfrdModel(config, seed)
    if config.teacher_checkpoint:
        # local import: storage builds models from checkpoints
        from afrd.storage import load_teacher_weights

        load_teacher_weights(model, config.teacher_checkpoint)
    logger.debug(
        "Initialised model seed=%d fusion=%s params=%d trainable=%d",
        seed,
        config.fusion,
        model.parameter_count(),
        model.parameter_count(trainable_only=True),
    )
    return model.eval()


def stack_sets(model: AfrdModel, sets: Sequence[ImageSet]) -> np.ndarray:
    """[B, N, 3, H, W] input batch, restricted to the model's lighting selection."""
    cfg = model.config
    batch = []
    for s in sets:
        if s.size != (cfg.image_size, cfg.image_size):
            raise ShapeError("teacher_forward", "image size", (cfg.image_size, cfg.image_size), s.size)
        if cfg.lightings is None:
            if s.n_lightings != cfg.n_lightings:
                raise ShapeError("teacher_forward", "lightings", cfg.n_lightings, s.n_lightings)
        elif max(cfg.lightings) >= s.n_lightings:
            raise ShapeError("teacher_forward", "lightings", f"> {max(cfg.lightings)}", s.n_lightings)
        batch.append(s.stack(cfg.lightings))
    return np.stack(batch)


def _preprocess(model: AfrdModel, images: np.ndarray) -> np.ndarray:
    if model.config.normalize_input:
        images = (images - IMAGENET_MEAN) / IMAGENET_STD
    return images


def teacher_features(model: AfrdModel, images: np.ndarray) -> list[FeaturePyramid]:
    """Teacher pyramids for a [B, N, 3, H, W] batch, one per lighting.

    Lightings go through the teacher independently and may run on separate
    workers; the teacher is read-only in eval mode.
    """
    cfg = model.config
    if images.ndim != 5 or images.shape[2] != 3:
        raise ShapeError("teacher_forward", "input", "[B, N, 3, H, W]", images.shape)
    if images.shape[1] != cfg.n_lightings:
        raise ShapeError("teacher_forward", "lightings", cfg.n_lightings, images.shape[1])
    if images.shape[3:] != (cfg.image_size, cfg.image_size):
        raise ShapeError("teacher_forward", "image size", (cfg.image_size, cfg.image_size), images.shape[3:])

    def run(j: int) -> FeaturePyramid:
        with T.no_grad():
            x = Tensor(_preprocess(model, images[:, j]))
            return FeaturePyramid(model.teacher(x))

    workers = worker_count(cfg.n_lightings)
    if workers == 1:
        return [run(j) for j in range(cfg.n_lightings)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(cfg.n_lightings)))


def teacher_forward(model: AfrdModel, image_set: ImageSet) -> list[FeaturePyramid]:
    return teacher_features(model, stack_sets(model, [image_set]))


def _check_pyramid(op: str, model: AfrdModel, pyramid: FeaturePyramid) -> None:
    expected = model.config.level_shapes()
    if len(pyramid) != len(expected):
        raise ShapeError(op, "levels", len(expected), len(pyramid))
    for l, (want, got) in enumerate(zip(expected, pyramid.shapes)):
        if want != got:
            raise ShapeError(op, f"level {l}", want, got)


def bottleneck_forward(model: AfrdModel, fused: FeaturePyramid) -> Tensor:
    _check_pyramid("bottleneck_forward", model, fused)
    return model.bottleneck(fused)


def student_forward(model: AfrdModel, embedding: Tensor) -> FeaturePyramid:
    cfg = model.config
    _, h, w = cfg.level_shapes()[-1]
    expected = (cfg.embed, h, w)
    if embedding.ndim != 4 or embedding.shape[1:] != expected:
        raise ShapeError("student_forward", "embedding", expected, embedding.shape[1:])
    return model.student(embedding)


def forward(
    model: AfrdModel, feats: Sequence[FeaturePyramid]
) -> tuple[FeaturePyramid, AttentionWeights, FeaturePyramid]:
    """Fuse teacher pyramids, then bottleneck and decode: (F_f, omega, F_d)."""
    fused, omega = get_fusion(model.config.fusion).fuse(model, feats)
    decoded = student_forward(model, bottleneck_forward(model, fused))
    return fused, omega, decoded
