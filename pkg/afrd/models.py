from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from afrd.errors import ShapeError
from afrd.services.tensor import Tensor


class Label(str, Enum):
    NORMAL = "normal"
    ANOMALOUS = "anomalous"

    @property
    def as_int(self) -> int:
        return 1 if self is Label.ANOMALOUS else 0


class RunStatus(str, Enum):
    PENDING = "pending"
    TRAINING = "training"
    EVALUATING = "evaluating"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class ImageSet:
    """One physical sample: N images of the same object under N lightings."""

    images: list[np.ndarray]  # each [3, H, W] in [0, 1]
    label: Label
    sample_id: str
    mask: np.ndarray | None = None  # [H, W] bool

    def __post_init__(self):
        if not self.images:
            raise ValueError(f"image set {self.sample_id} has no images")
        ref = self.images[0].shape
        if len(ref) != 3 or ref[0] != 3:
            raise ShapeError("ImageSet", 0, "[3, H, W]", ref)
        for j, img in enumerate(self.images):
            if img.shape != ref:
                raise ShapeError("ImageSet", f"lighting {j}", ref, img.shape)
        if self.mask is not None:
            if self.mask.shape != ref[1:]:
                raise ShapeError("ImageSet.mask", "shape", ref[1:], self.mask.shape)
            if self.label is Label.NORMAL and self.mask.any():
                raise ValueError(f"normal sample {self.sample_id} carries a non-empty mask")

    @property
    def n_lightings(self) -> int:
        return len(self.images)

    @property
    def size(self) -> tuple[int, int]:
        return self.images[0].shape[1], self.images[0].shape[2]

    def stack(self, lightings: list[int] | None = None) -> np.ndarray:
        """[N, 3, H, W], optionally restricted to the given lighting indices."""
        indices = range(self.n_lightings) if lightings is None else lightings
        return np.stack([self.images[j] for j in indices])


@dataclass
class FeaturePyramid:
    """Per-level feature maps, finest first; every level carries a leading batch axis."""

    levels: list[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(t.shape[1:]) for t in self.levels]


@dataclass
class AttentionWeights:
    """Per-level fusion weights, each [B, N] with rows on the simplex."""

    levels: list[np.ndarray]

    def mean(self) -> list[np.ndarray]:
        return [w.mean(axis=0) for w in self.levels]

    def entropy(self) -> list[float]:
        out = []
        for w in self.levels:
            p = np.clip(w, 1e-12, 1.0)
            out.append(float(-(p * np.log(p)).sum(axis=1).mean()))
        return out


@dataclass
class AnomalyResult:
    map: np.ndarray  # [H, W], smoothed, >= 0
    image_score: float
    sample_id: str


@dataclass
class EvalReport:
    i_auroc: float
    p_auroc: float | None
    rows: list[tuple[str, int, float]]  # sample_id, label, image_score
    roc: tuple[np.ndarray, np.ndarray, np.ndarray]  # fpr, tpr, thresholds
    results: list[AnomalyResult] = field(default_factory=list, repr=False)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    omega: list[list[np.ndarray]] = field(default_factory=list)  # epoch -> level -> [N]
    entropy: list[list[float]] = field(default_factory=list)  # epoch -> level
    wall_time: float = 0.0
    checkpoint_path: str = ""

    @property
    def epochs(self) -> int:
        return len(self.losses)


@dataclass
class IndexEntry:
    sample_id: str
    split: str  # "train" or "test"
    label: Label
    image_paths: list[str]  # relative to the dataset root
    mask_path: str = ""


@dataclass
class DatasetIndex:
    root: str
    entries: list[IndexEntry] = field(default_factory=list)
    lighting_count: int | None = None  # img_path_* columns; known even with no entries

    @property
    def n_lightings(self) -> int:
        if self.lighting_count is not None:
            return self.lighting_count
        return len(self.entries[0].image_paths) if self.entries else 0

    def split(self, name: str) -> list[IndexEntry]:
        return [e for e in self.entries if e.split == name]


@dataclass
class VariantRun:
    variant: str
    seed: int
    category: str = ""
    status: RunStatus = RunStatus.PENDING
    stage_detail: str = ""
    i_auroc: float | None = None
    p_auroc: float | None = None
    omega: list[list[float]] = field(default_factory=list)  # final epoch, per level
    error: str = ""
    # Timing (seconds)
    train_time: float = 0.0
    eval_time: float = 0.0

    @property
    def id(self) -> str:
        prefix = f"{self.category}/" if self.category else ""
        return f"{prefix}{self.variant}@seed{self.seed}"

    @property
    def total_time(self) -> float:
        return self.train_time + self.eval_time
