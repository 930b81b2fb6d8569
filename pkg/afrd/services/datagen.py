"""Synthetic multi-lighting objects: Lambertian-shaded height fields with defects.

Every sample draws from its own RNG stream derived from (scene seed, sample id),
so rendering order and worker count never change the bytes written.
"""

import hashlib
import json
import logging
import os
import shutil
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from afrd.config import SceneSpec, worker_count
from afrd.errors import DatasetError
from afrd.models import DatasetIndex, IndexEntry, Label
from afrd.services import dataset, imageio

logger = logging.getLogger(__name__)

MASK_FRACTION = 0.15
MAX_DEFECT_ATTEMPTS = 16
GEOMETRIC_KINDS = ("bump", "dent", "scratch")
# everything generate and the CLI echo write under the dataset root
OWNED_ENTRIES = frozenset({"train", "test", "geometry", dataset.INDEX_FILE, "scene.json", "effective_config.ini"})


@dataclass
class Surface:
    height: np.ndarray  # [H, W]
    albedo: np.ndarray  # [3, H, W]


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(sample_id.encode("utf-8"))]))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray, float]:
    coords = np.linspace(-1.0, 1.0, size)
    y, x = np.meshgrid(coords, coords, indexing="ij")
    return x, y, coords[1] - coords[0]


def surface_normals(height: np.ndarray, spacing: float) -> np.ndarray:
    """[3, H, W] unit normals (-dh/dx, -dh/dy, 1) / norm; x runs along columns."""
    dh_dy, dh_dx = np.gradient(height, spacing)
    normals = np.stack([-dh_dx, -dh_dy, np.ones_like(height)])
    return normals / np.linalg.norm(normals, axis=0, keepdims=True)


def shade(surface: Surface, light: tuple[float, float, float], ambient: float, spacing: float) -> np.ndarray:
    """albedo * max(0, n . l) + ambient per channel, clipped to [0, 1]: [3, H, W]."""
    normals = surface_normals(surface.height, spacing)
    lambert = np.maximum(0.0, np.tensordot(np.asarray(light), normals, axes=([0], [0])))
    return np.clip(surface.albedo * lambert[None] + ambient, 0.0, 1.0)


def _base_height(category: str, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    amp = rng.uniform(0.3, 0.4)
    dx, dy = x - cx, y - cy
    if category == "dome":
        radius = rng.uniform(0.7, 0.85)
        return amp * np.clip(1.0 - (dx * dx + dy * dy) / radius**2, 0.0, None) ** 1.5
    if category == "ridge":
        theta = rng.uniform(0, np.pi)
        width = rng.uniform(0.25, 0.35)
        across = dx * np.cos(theta) + dy * np.sin(theta)
        return amp * np.exp(-(across**2) / (2 * width**2))
    radius = rng.uniform(0.45, 0.55)
    width = rng.uniform(0.12, 0.16)
    r = np.sqrt(dx * dx + dy * dy)
    return amp * np.exp(-((r - radius) ** 2) / (2 * width**2))


def base_surface(spec: SceneSpec, rng: np.random.Generator) -> Surface:
    x, y, _ = _grid(spec.image_size)
    size = spec.image_size
    texture = gaussian_filter(rng.normal(size=(size, size)), sigma=2.0, mode="reflect")
    texture /= max(np.abs(texture).max(), 1e-12)
    height = _base_height(spec.category, x, y, rng) + 0.004 * texture

    lo, hi = spec.albedo_range
    base = rng.uniform(lo, hi)
    tint = rng.uniform(0.9, 1.0, size=3)
    grain = gaussian_filter(rng.normal(size=(size, size)), sigma=1.5, mode="reflect")
    grain /= max(np.abs(grain).max(), 1e-12)
    albedo = np.clip(base + 0.02 * grain, lo * 0.9, hi)[None] * tint[:, None, None]
    return Surface(height=height, albedo=albedo)


def _blob(x, y, cx, cy, sx, sy, theta) -> np.ndarray:
    u = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    v = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
    return np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))


def _segment_distance(x, y, p0, p1) -> np.ndarray:
    d = p1 - p0
    t = np.clip(((x - p0[0]) * d[0] + (y - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
    return np.hypot(x - (p0[0] + t * d[0]), y - (p0[1] + t * d[1]))


def apply_defect(
    surface: Surface, kind: str, rng: np.random.Generator, spacing: float
) -> tuple[Surface, np.ndarray]:
    """Perturbed surface and its boolean support mask."""
    size = surface.height.shape[0]
    x, y, _ = _grid(size)
    r = rng.uniform(0.0, 0.45)
    phi = rng.uniform(0, 2 * np.pi)
    cx, cy = r * np.cos(phi), r * np.sin(phi)
    theta = rng.uniform(0, np.pi)
    px = spacing  # one pixel in surface coordinates

    if kind in ("bump", "dent"):
        short = rng.uniform(2.0, 3.0) * px
        long = short * rng.uniform(2.5, 4.0)
        amp = rng.uniform(0.05, 0.08) * (1 if kind == "bump" else -1)
        delta = amp * _blob(x, y, cx, cy, long, short, theta)
        changed = Surface(surface.height + delta, surface.albedo)
    elif kind == "scratch":
        half = rng.uniform(0.2, 0.35)
        offset = half * np.array([np.cos(theta), np.sin(theta)])
        center = np.array([cx, cy])
        dist = _segment_distance(x, y, center - offset, center + offset)
        width = rng.uniform(1.0, 1.5) * px
        delta = -rng.uniform(0.02, 0.035) * np.exp(-(dist**2) / (2 * width**2))
        changed = Surface(surface.height + delta, surface.albedo)
    elif kind == "stain":
        sigma = rng.uniform(3.0, 6.0) * px
        strength = rng.uniform(0.3, 0.5)
        delta = strength * _blob(x, y, cx, cy, sigma, sigma * rng.uniform(0.6, 1.0), theta)
        changed = Surface(surface.height, surface.albedo * (1.0 - delta)[None])
    else:
        raise ValueError(f"unknown defect kind {kind!r}")

    magnitude = np.abs(delta)
    mask = magnitude >= MASK_FRACTION * magnitude.max()
    return changed, mask


def directional_contrast(
    spec: SceneSpec, clean: Surface, defect: Surface, mask: np.ndarray, spacing: float
) -> np.ndarray:
    """Mean in-mask |defective - clean| intensity under each lighting, on the 8-bit images as written."""
    out = []
    for light in spec.light_directions:
        defective = imageio.quantize(shade(defect, light, spec.ambient, spacing)).astype(np.int16)
        reference = imageio.quantize(shade(clean, light, spec.ambient, spacing)).astype(np.int16)
        diff = np.abs(defective - reference) / 255.0  # [H, W, 3]
        out.append(float(diff.mean(axis=2)[mask].mean()))
    return np.array(out)


def _render_sample(
    spec: SceneSpec, sample_id: str, label: Label
) -> tuple[Surface, list[np.ndarray], np.ndarray | None]:
    rng = sample_rng(spec.seed, sample_id)
    _, _, spacing = _grid(spec.image_size)
    surface = base_surface(spec, rng)
    mask = None
    if label is Label.ANOMALOUS:
        kind = str(rng.choice(spec.defect_kinds))
        for _ in range(MAX_DEFECT_ATTEMPTS):
            defect, mask = apply_defect(surface, kind, rng, spacing)
            if kind not in GEOMETRIC_KINDS or spec.n_lightings < 2:
                break
            contrast = directional_contrast(spec, surface, defect, mask, spacing)
            if contrast.max() > 0 and contrast.max() >= spec.min_contrast_ratio * contrast.min():
                break
        else:
            raise DatasetError(
                f"no {kind} placement reached a {spec.min_contrast_ratio}x directional contrast "
                f"in {MAX_DEFECT_ATTEMPTS} attempts",
                sample_id=sample_id,
            )
        surface = defect
    images = [shade(surface, light, spec.ambient, spacing) for light in spec.light_directions]
    return surface, images, mask


def _write_sample(spec: SceneSpec, out_dir: str, split: str, sample_id: str, label: Label) -> IndexEntry:
    surface, images, mask = _render_sample(spec, sample_id, label)
    rel_dir = f"{split}/{sample_id}"
    image_paths = []
    for j, image in enumerate(images):
        rel = f"{rel_dir}/light_{j}.ppm"
        imageio.write_ppm(os.path.join(out_dir, rel), image)
        image_paths.append(rel)
    mask_path = ""
    if mask is not None:
        mask_path = f"{rel_dir}/mask.pgm"
        imageio.write_pgm(os.path.join(out_dir, mask_path), mask.astype(np.uint8) * 255)
    geometry = os.path.join(out_dir, "geometry")
    os.makedirs(geometry, exist_ok=True)
    np.save(os.path.join(geometry, f"{sample_id}_height.npy"), surface.height)
    np.save(os.path.join(geometry, f"{sample_id}_albedo.npy"), surface.albedo)
    return IndexEntry(sample_id=sample_id, split=split, label=label, image_paths=image_paths, mask_path=mask_path)


def split_counts(n_test: int, anomaly_rate: float) -> tuple[int, int]:
    """(normal, anomalous) for a test split of ``n_test`` samples."""
    anomalous = int(round(n_test * anomaly_rate))
    return n_test - anomalous, anomalous


def _prepare_out_dir(out_dir: str) -> None:
    """Create ``out_dir`` or clear a previous dataset from it; anything else there is refused."""
    os.makedirs(out_dir, exist_ok=True)
    existing = sorted(os.listdir(out_dir))
    foreign = [name for name in existing if name not in OWNED_ENTRIES]
    if foreign:
        raise DatasetError(f"output directory is not empty (found {', '.join(foreign[:3])})", path=out_dir)
    for name in existing:
        path = os.path.join(out_dir, name)
        if os.path.isdir(path):
            shutil.rmtree(path)
        else:
            os.remove(path)


def generate(
    spec: SceneSpec,
    n_train: int,
    n_test_normal: int,
    n_test_anomalous: int,
    out_dir: str,
    *,
    jobs: int | None = None,
) -> DatasetIndex:
    """Render and write a dataset tree; train samples are always normal."""
    if min(n_train, n_test_normal, n_test_anomalous) < 0:
        raise ValueError("sample counts must be non-negative")
    _prepare_out_dir(out_dir)

    plan = [("train", f"train_{i:05d}", Label.NORMAL) for i in range(n_train)]
    plan += [("test", f"test_{i:05d}", Label.NORMAL) for i in range(n_test_normal)]
    plan += [
        ("test", f"test_{i:05d}", Label.ANOMALOUS)
        for i in range(n_test_normal, n_test_normal + n_test_anomalous)
    ]

    def run(item) -> IndexEntry:
        split, sample_id, label = item
        return _write_sample(spec, out_dir, split, sample_id, label)

    workers = worker_count(jobs)
    logger.info(
        "Generating %d train + %d/%d test samples (%s, N=%d, %dpx) with %d workers",
        n_train,
        n_test_normal,
        n_test_anomalous,
        spec.category,
        spec.n_lightings,
        spec.image_size,
        workers,
    )
    if workers == 1:
        entries = [run(item) for item in plan]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run, plan))

    index = DatasetIndex(root=os.path.abspath(out_dir), entries=entries, lighting_count=spec.n_lightings)
    dataset.write_index(index, spec.n_lightings)
    scene = {
        "scene": spec.model_dump(mode="json"),
        "pixel_spacing": _grid(spec.image_size)[2],
        "counts": {"train": n_train, "test_normal": n_test_normal, "test_anomalous": n_test_anomalous},
    }
    with open(os.path.join(out_dir, "scene.json"), "w", encoding="utf-8") as f:
        json.dump(scene, f, indent=2, sort_keys=True)
        f.write("\n")
    return index


def tree_hash(root: str) -> str:
    """sha256 over sorted relative paths and file contents."""
    digest = hashlib.sha256()
    files = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            files.append((os.path.relpath(full, root).replace(os.sep, "/"), full))
    for rel, full in sorted(files):
        digest.update(rel.encode("utf-8") + b"\0")
        with open(full, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()
