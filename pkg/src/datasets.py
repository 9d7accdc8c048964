"""Dataset ingestion: image directories and the procedural shape corpora, split 80/10/10."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from matplotlib.colors import hsv_to_rgb
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision import transforms

from src import metrics
from src.errors import ConfigurationError, DataError, IngestionError, UnknownEntryError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")
SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
MANIFEST_NAME = "manifest.json"


# ============ MANIFEST ============

@dataclass(frozen=True)
class DatasetManifest:
    id: str
    source: str  # "directory" or "synthetic"
    class_count: int
    sample_count: int
    splits: Dict[str, List[str]]
    labels: Dict[str, int]
    metric_id: str
    split_seed: int = 0
    class_names: List[str] = field(default_factory=list)
    input_shape: Tuple[int, int, int] = (IMAGE_SIZE, IMAGE_SIZE, 3)
    generator: Optional[Dict[str, Any]] = None
    path: Optional[str] = None
    fid_to_source: Optional[float] = None

    def __post_init__(self):
        members = [i for name in SPLIT_NAMES for i in self.splits.get(name, [])]
        if len(members) != len(set(members)) or set(members) != set(self.labels):
            raise DataError(f"splits of {self.id} must be disjoint and cover every sample")
        if set(self.labels.values()) - set(range(self.class_count)):
            raise DataError(f"class ids of {self.id} must be dense in 0..{self.class_count - 1}")

    def split_sizes(self) -> Tuple[int, int, int]:
        return tuple(len(self.splits[name]) for name in SPLIT_NAMES)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["input_shape"] = list(self.input_shape)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetManifest":
        data = dict(data)
        data["input_shape"] = tuple(data.get("input_shape", (IMAGE_SIZE, IMAGE_SIZE, 3)))
        data["labels"] = {k: int(v) for k, v in data["labels"].items()}
        return cls(**data)

    def content_hash(self) -> str:
        """Identity of the data and its splits; the measured FID is not part of it."""
        data = self.to_dict()
        data.pop("fid_to_source", None)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def make_splits(sample_ids: Sequence[str], split_seed: int) -> Dict[str, List[str]]:
    """Seeded 80/10/10 partition; membership depends only on the ids and the seed."""
    ordered = sorted(sample_ids)
    perm = np.random.default_rng(split_seed).permutation(len(ordered))
    n_train = int(round(SPLIT_FRACTIONS[0] * len(ordered)))
    n_val = int(round(SPLIT_FRACTIONS[1] * len(ordered)))
    cuts = {
        "train": perm[:n_train],
        "val": perm[n_train:n_train + n_val],
        "test": perm[n_train + n_val:],
    }
    return {name: sorted(ordered[i] for i in idx) for name, idx in cuts.items()}


# ============ SYNTHETIC SHAPES ============

SHAPE_NAMES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "saltire", "frame")
SOURCE_TEXTURES = ("solid", "hstripes", "checker")
SWAP_TEXTURES = ("dots", "noise", "diagonal")


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    ady, adx = np.abs(dy), np.abs(dx)
    cheb = np.maximum(ady, adx)
    dist = np.sqrt(dy ** 2 + dx ** 2)
    thin = 0.3 * r
    if shape == "disk":
        return dist <= r
    if shape == "square":
        return cheb <= 0.8 * r
    if shape == "triangle":
        h = 0.8 * r
        return (dy >= -h) & (dy <= h) & (adx <= (dy + h) / 2)
    if shape == "cross":
        return ((adx <= thin) & (ady <= r)) | ((ady <= thin) & (adx <= r))
    if shape == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if shape == "diamond":
        return adx + ady <= r
    if shape == "hbar":
        return (ady <= thin) & (adx <= r)
    if shape == "vbar":
        return (adx <= thin) & (ady <= r)
    if shape == "saltire":
        return ((np.abs(dx - dy) <= thin) | (np.abs(dx + dy) <= thin)) & (cheb <= r)
    return (cheb <= 0.9 * r) & (cheb >= 0.6 * r)


def _texture(name: str, yy: np.ndarray, xx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    period = int(rng.integers(3, 6))
    if name == "solid":
        return np.ones_like(yy, dtype=np.float64)
    if name == "hstripes":
        return ((yy // period) % 2).astype(np.float64)
    if name == "checker":
        return (((yy // period) + (xx // period)) % 2).astype(np.float64)
    if name == "dots":
        return (((yy % period) == 0) & ((xx % period) == 0)).astype(np.float64)
    if name == "noise":
        return rng.random(yy.shape)
    return (((yy + xx) // period) % 2).astype(np.float64)


def render_shape(corpus_seed: int, index: int, shape_class: int, shift: float = 0.0) -> np.ndarray:
    """One (32, 32, 3) uint8 image, a pure function of (corpus_seed, index, class, shift).

    `shift` rotates the foreground hue away from the source palette and swaps in
    unseen textures with probability `shift`.
    """
    rng = np.random.default_rng([corpus_seed, index])
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    r = rng.uniform(7.0, 11.0)
    cy, cx = IMAGE_SIZE / 2 + rng.uniform(-4.0, 4.0, size=2)
    mask = _shape_mask(SHAPE_NAMES[shape_class], yy - cy, xx - cx, r)

    hue = (rng.uniform(0.0, 0.5) + 0.5 * shift) % 1.0
    fg = hsv_to_rgb([hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)])
    bg = hsv_to_rgb([rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5), rng.uniform(0.1, 0.4)])
    swap = rng.random() < shift
    texture_name = rng.choice(SWAP_TEXTURES if swap else SOURCE_TEXTURES)
    texture = _texture(str(texture_name), yy, xx, rng)

    image = np.broadcast_to(bg, (IMAGE_SIZE, IMAGE_SIZE, 3)).copy()
    image[mask] = fg * (0.6 + 0.4 * texture[mask])[:, None]
    image += rng.normal(0.0, 0.03, size=image.shape)
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def _check_generator(spec: Mapping[str, Any]) -> Dict[str, Any]:
    spec = dict(spec)
    name = spec.get("name")
    if name not in SYNTHETIC_CORPORA:
        raise UnknownEntryError(f"unknown synthetic corpus {name!r}; registered: {sorted(SYNTHETIC_CORPORA)}")
    allowed = {"name", "samples", "seed", "shift", "classes"}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown generator key(s): {', '.join(unknown)}")
    spec.setdefault("seed", 0)
    spec.setdefault("classes", len(SHAPE_NAMES))
    spec.setdefault("shift", 0.0 if name == "shapes10" else 0.5)
    if name == "shapes10" and (spec["shift"] != 0.0 or spec["classes"] != len(SHAPE_NAMES)):
        raise ConfigurationError("shapes10 is the unshifted 10-class source corpus")
    if not isinstance(spec.get("samples"), int) or spec["samples"] < 1:
        raise ConfigurationError(f"generator needs a positive integer 'samples', got {spec.get('samples')!r}")
    if not 2 <= spec["classes"] <= len(SHAPE_NAMES):
        raise ConfigurationError(f"classes must lie in 2..{len(SHAPE_NAMES)}, got {spec['classes']}")
    if not 0.0 <= float(spec["shift"]) <= 1.0:
        raise ConfigurationError(f"shift must lie in [0, 1], got {spec['shift']}")
    spec["shift"] = float(spec["shift"])
    return spec


def _synthetic_renderer(spec: Mapping[str, Any]) -> Callable[[str, int], np.ndarray]:
    return lambda sample_id, label: render_shape(spec["seed"], int(sample_id), label, spec["shift"])


SYNTHETIC_CORPORA: Dict[str, Callable[[Mapping[str, Any]], Callable[[str, int], np.ndarray]]] = {
    "shapes10": _synthetic_renderer,
    "shifted": _synthetic_renderer,
}


def _ingest_synthetic(spec: Mapping[str, Any], dataset_id: str, metric_id: str, split_seed: int) -> DatasetManifest:
    spec = _check_generator(spec)
    width = max(6, len(str(spec["samples"])))
    labels = {f"{i:0{width}d}": i % spec["classes"] for i in range(spec["samples"])}
    return DatasetManifest(
        id=dataset_id,
        source="synthetic",
        class_count=spec["classes"],
        sample_count=spec["samples"],
        splits=make_splits(list(labels), split_seed),
        labels=labels,
        metric_id=metric_id,
        split_seed=split_seed,
        class_names=list(SHAPE_NAMES[: spec["classes"]]),
        generator=spec,
    )


# ============ DIRECTORY INGEST ============

def _is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS


def _scan_class_dirs(root: Path) -> Tuple[Dict[str, str], List[str]]:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} has neither class subdirectories nor a labels.csv")
    files: Dict[str, str] = {}
    for class_dir in class_dirs:
        images = sorted(p for p in class_dir.iterdir() if _is_image(p))
        if not images:
            raise DataError(f"class {class_dir.name!r} in {root} has no images")
        for image in images:
            files[image.relative_to(root).as_posix()] = class_dir.name
    return files, [d.name for d in class_dirs]


def _scan_labels_csv(root: Path) -> Tuple[Dict[str, str], List[str]]:
    table = pd.read_csv(root / "labels.csv", dtype=str)
    if list(table.columns[:2]) != ["filename", "label"]:
        raise DataError(f"{root / 'labels.csv'} must have columns filename,label")
    if table.empty:
        raise DataError(f"{root / 'labels.csv'} lists no samples")
    files = dict(zip(table["filename"], table["label"]))
    names = sorted(set(files.values()), key=lambda v: (not v.isdigit(), int(v) if v.isdigit() else 0, v))
    return files, names


def _unreadable(root: Path, rel_paths: Sequence[str]) -> List[str]:
    offenders = []
    for rel in rel_paths:
        try:
            with Image.open(root / rel) as image:
                image.convert("RGB").load()
        except (OSError, UnidentifiedImageError):
            offenders.append(rel)
    return offenders


def _ingest_directory(root: Path, dataset_id: str, metric_id: str, split_seed: int) -> DatasetManifest:
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    if (root / "labels.csv").exists():
        files, class_names = _scan_labels_csv(root)
    else:
        files, class_names = _scan_class_dirs(root)
    offenders = _unreadable(root, sorted(files))
    if offenders:
        raise IngestionError(f"{len(offenders)} unreadable file(s) in {root}", offenders)
    class_ids = {name: i for i, name in enumerate(class_names)}
    labels = {rel: class_ids[name] for rel, name in sorted(files.items())}
    return DatasetManifest(
        id=dataset_id,
        source="directory",
        class_count=len(class_names),
        sample_count=len(labels),
        splits=make_splits(list(labels), split_seed),
        labels=labels,
        metric_id=metric_id,
        split_seed=split_seed,
        class_names=class_names,
        path=str(root.resolve()),
    )


def ingest_dataset(
    source: Union[str, Path, Mapping[str, Any]],
    dataset_id: Optional[str] = None,
    metric_id: str = "accuracy",
    split_seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    fid_to_source: Optional[float] = None,
) -> DatasetManifest:
    """Builds the manifest of a directory or a synthetic corpus and writes it beside the data.

    Synthetic corpora have no data directory; their manifest goes to `out_dir`.
    """
    metrics.check_metric_id(metric_id)
    if isinstance(source, Mapping):
        dataset_id = dataset_id or source.get("name", "synthetic")
        manifest = _ingest_synthetic(source, dataset_id, metric_id, split_seed)
        target = Path(out_dir) if out_dir is not None else None
    else:
        root = Path(source)
        manifest = _ingest_directory(root, dataset_id or root.name, metric_id, split_seed)
        target = root
    if fid_to_source is not None:
        manifest = replace(manifest, fid_to_source=float(fid_to_source))
    if target is not None:
        previous = target / MANIFEST_NAME
        if previous.exists() and manifest.fid_to_source is None:
            old = load_manifest(previous)
            if old.content_hash() == manifest.content_hash():
                manifest = replace(manifest, fid_to_source=old.fid_to_source)
        manifest.save(target / MANIFEST_NAME)
    logger.info(
        "ingested %s (%s): %d classes, splits %s", manifest.id, manifest.source,
        manifest.class_count, manifest.split_sizes(),
    )
    return manifest


# ============ TENSOR VIEWS ============

def build_augmentation(color_jitter: bool = True, flips: bool = True, crop_pad: int = 4) -> Optional[Callable]:
    steps = []
    if crop_pad > 0:
        steps.append(transforms.RandomCrop(IMAGE_SIZE, padding=crop_pad))
    if flips:
        steps += [transforms.RandomHorizontalFlip(), transforms.RandomVerticalFlip()]
    if color_jitter:
        steps.append(transforms.ColorJitter(brightness=0.2, contrast=0.2, saturation=0.2))
    return transforms.Compose(steps) if steps else None


class Corpus:
    """A manifest plus the means to turn its sample ids into images."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: Dict[str, np.ndarray] = {}
        if manifest.source == "synthetic":
            self._render = SYNTHETIC_CORPORA[manifest.generator["name"]](manifest.generator)
        else:
            self._render = None

    @property
    def id(self) -> str:
        return self.manifest.id

    def label(self, sample_id: str) -> int:
        return self.manifest.labels[sample_id]

    def image(self, sample_id: str) -> np.ndarray:
        if self._render is not None:
            return self._render(sample_id, self.label(sample_id))
        if sample_id not in self._cache:
            with Image.open(Path(self.manifest.path) / sample_id) as image:
                image = image.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
                self._cache[sample_id] = np.asarray(image, dtype=np.uint8)
        return self._cache[sample_id]

    def split(self, name: str, augment: Optional[Callable] = None) -> "SplitView":
        if name not in SPLIT_NAMES:
            raise UnknownEntryError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return SplitView(self, self.manifest.splits[name], augment)


class SplitView(Dataset):
    """Yields (image tensor (C, H, W), label, sample id)."""

    def __init__(self, corpus: Corpus, sample_ids: Sequence[str], augment: Optional[Callable] = None):
        self.corpus = corpus
        self.sample_ids = list(sample_ids)
        self.augment = augment

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __getitem__(self, index: int):
        sample_id = self.sample_ids[index]
        x = torch.from_numpy(self.corpus.image(sample_id).copy()).permute(2, 0, 1).float() / 255.0
        if self.augment is not None:
            x = self.augment(x)
        return (x - PIXEL_MEAN) / PIXEL_STD, self.corpus.label(sample_id), sample_id

    def inputs(self) -> torch.Tensor:
        """The whole split stacked into one tensor, unaugmented."""
        return torch.stack([self[i][0] for i in range(len(self))]) if self.sample_ids else torch.empty(0)


def open_corpus(path: Union[str, Path]) -> Corpus:
    return Corpus(load_manifest(path))


def ingest_spec(spec, corpora_dir: Union[str, Path]) -> Corpus:
    """Ingests a config `DatasetSpec`; synthetic manifests land in `corpora_dir/<id>/`."""
    if spec.path is not None:
        manifest = ingest_dataset(spec.path, spec.id, spec.metric_id, spec.split_seed, fid_to_source=spec.fid_to_source)
    else:
        manifest = ingest_dataset(
            spec.generator, spec.id, spec.metric_id, spec.split_seed,
            out_dir=Path(corpora_dir) / spec.id, fid_to_source=spec.fid_to_source,
        )
    return Corpus(manifest)
