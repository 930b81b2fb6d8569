import csv
import logging
import os

from afrd.errors import DatasetError
from afrd.models import DatasetIndex, ImageSet, IndexEntry, Label
from afrd.services import imageio

logger = logging.getLogger(__name__)

INDEX_FILE = "index.csv"
_FIXED_COLUMNS = ["sample_id", "split", "label", "mask_path"]
_SPLITS = ("train", "test")


def write_index(index: DatasetIndex, n_lightings: int) -> str:
    path = os.path.join(index.root, INDEX_FILE)
    header = _FIXED_COLUMNS + [f"img_path_{j}" for j in range(n_lightings)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for e in index.entries:
            if len(e.image_paths) != n_lightings:
                raise DatasetError(
                    f"{len(e.image_paths)} image paths, index has {n_lightings} lightings", sample_id=e.sample_id
                )
            writer.writerow([e.sample_id, e.split, e.label.value, e.mask_path, *e.image_paths])
    return path


def read_index(root: str) -> DatasetIndex:
    path = os.path.join(root, INDEX_FILE)
    try:
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise DatasetError("dataset index not found", path=path) from None

    if not rows:
        raise DatasetError("empty index file", path=path)
    header = rows[0]
    image_columns = header[len(_FIXED_COLUMNS) :]
    expected = [f"img_path_{j}" for j in range(len(image_columns))]
    if header[: len(_FIXED_COLUMNS)] != _FIXED_COLUMNS or image_columns != expected or not image_columns:
        raise DatasetError(f"unexpected index header {header}", path=path)

    entries = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(f"line {lineno}: {len(row)} fields, expected {len(header)}", path=path)
        sample_id, split, label, mask_path, *image_paths = row
        if split not in _SPLITS:
            raise DatasetError(f"line {lineno}: unknown split {split!r}", path=path, sample_id=sample_id)
        try:
            label = Label(label)
        except ValueError:
            raise DatasetError(f"line {lineno}: unknown label {label!r}", path=path, sample_id=sample_id) from None
        if sample_id in seen:
            raise DatasetError(f"line {lineno}: duplicate sample id", path=path, sample_id=sample_id)
        seen.add(sample_id)
        for j, p in enumerate(image_paths):
            if not p:
                raise DatasetError("empty image path", path=path, sample_id=sample_id, lighting=j)
        entries.append(IndexEntry(sample_id, split, label, image_paths, mask_path))
    return DatasetIndex(root=os.path.abspath(root), entries=entries, lighting_count=len(image_columns))


def _resolve(root: str, rel: str) -> str:
    return rel if os.path.isabs(rel) else os.path.join(root, rel)


def load_entry(index: DatasetIndex, entry: IndexEntry) -> ImageSet:
    images = []
    for j, rel in enumerate(entry.image_paths):
        full = _resolve(index.root, rel)
        if not os.path.exists(full):
            raise DatasetError("missing image file", path=full, sample_id=entry.sample_id, lighting=j)
        try:
            image = imageio.read_ppm(full)
        except DatasetError as e:
            raise DatasetError(str(e), path=full, sample_id=entry.sample_id, lighting=j) from e
        if images and image.shape != images[0].shape:
            raise DatasetError(
                f"size {image.shape[1:]} differs from lighting 0 {images[0].shape[1:]}",
                path=full,
                sample_id=entry.sample_id,
                lighting=j,
            )
        images.append(image)

    mask = None
    if entry.mask_path:
        full = _resolve(index.root, entry.mask_path)
        if not os.path.exists(full):
            raise DatasetError("missing mask file", path=full, sample_id=entry.sample_id)
        pixels = imageio.read_pgm(full)
        if pixels.shape != images[0].shape[1:]:
            raise DatasetError(
                f"mask size {pixels.shape} differs from image size {images[0].shape[1:]}",
                path=full,
                sample_id=entry.sample_id,
            )
        mask = pixels >= 128
        if entry.label is Label.NORMAL and mask.any():
            raise DatasetError("normal sample has a non-empty mask", path=full, sample_id=entry.sample_id)

    return ImageSet(images=images, label=entry.label, sample_id=entry.sample_id, mask=mask)


def load_dataset(root: str) -> tuple[list[ImageSet], list[ImageSet]]:
    """(train, test) image sets in index order, images as [3, H, W] floats in [0, 1]."""
    index = read_index(root)
    train, test = [], []
    for entry in index.entries:
        (train if entry.split == "train" else test).append(load_entry(index, entry))
    logger.info("Loaded %s: %d train / %d test sets, N=%d", root, len(train), len(test), index.n_lightings)
    return train, test
