"""Synthetic paired image/mask corpus and the on-disk dataset layout.

Layout::

    {root}/manifest              line-delimited JSON: header line, then one line per sample
    {root}/{split}/{id}.img      8-bit RGB, PNG-encoded
    {root}/{split}/{id}.mask     8-bit single-channel label map, PNG-encoded

Images are stored as 8-bit values ``v`` and loaded as ``v / 255 * 2 - 1``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .oracle import GaussianMixtureSpec, normalize_mask

SPLITS = ("score-train", "victim-train", "eval")
SHAPES = ("ellipse", "rectangle", "blob")
MANIFEST_VERSION = 1


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def from_uint8(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) / 255.0 * 2.0 - 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Shapes on a texture background; every class is an i.i.d. Gaussian colour texture.

    ``class_means`` defaults to colours spaced ``separation`` apart per channel
    along an alternating-sign direction; ``sigma`` is the per-pixel texture std.
    """

    image_size: int = 32
    channels: int = 3
    n_classes: int = 2
    shapes: tuple[str, ...] = SHAPES
    separation: float = 0.15
    sigma: float = 0.1
    class_means: tuple[tuple[float, ...], ...] | None = None
    counts: dict = field(default_factory=lambda: {"score-train": 256, "victim-train": 256, "eval": 64})
    objects_per_image: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (0.18, 0.32)

    def __post_init__(self):
        bad = set(self.shapes) - set(SHAPES)
        if bad:
            raise ValueError(f"unknown shape families {sorted(bad)}")
        if any(int(v) < 0 for v in self.counts.values()) or sum(self.counts.values()) < 1:
            raise ValueError("need at least one sample")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=np.float64)
            if m.shape != (self.n_classes, self.channels):
                raise ValueError(f"class_means must be {self.n_classes}x{self.channels}")
            return m
        direction = np.where(np.arange(self.channels) % 2 == 0, 1.0, -1.0)
        offsets = np.arange(self.n_classes) - (self.n_classes - 1) / 2
        return self.separation * offsets[:, None] * direction[None, :]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["objects_per_image"] = list(self.objects_per_image)
        d["radius"] = list(self.radius)
        if self.class_means is not None:
            d["class_means"] = [list(r) for r in self.class_means]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for k in ("shapes", "objects_per_image", "radius"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("class_means") is not None:
            d["class_means"] = tuple(tuple(r) for r in d["class_means"])
        return cls(**d)


# -- shapes ------------------------------------------------------------------------

def _shape_mask(kind: str, size: int, rng: np.random.Generator, radius) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(*radius) * size
    cy, cx = rng.uniform(r * 0.6, size - r * 0.6, size=2)
    if kind == "ellipse":
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        hy, hx = r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # blob: union of a few overlapping discs
    out = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(3, 6)):
        rr = r * rng.uniform(0.4, 0.7)
        oy, ox = rng.normal(0, r * 0.4, size=2)
        out |= (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= rr ** 2
    return out


def _sample(spec: SyntheticSpec, rng: np.random.Generator, means: np.ndarray):
    size = spec.image_size
    while True:
        labels = np.zeros((size, size), dtype=np.int64)
        for _ in range(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1)):
            kind = spec.shapes[rng.integers(len(spec.shapes))]
            cls = 1 if spec.n_classes == 2 else int(rng.integers(1, spec.n_classes))
            labels[_shape_mask(kind, size, rng, spec.radius)] = cls
        frac = np.mean(labels > 0)
        if 0.02 < frac < 0.98:
            break
    noise = rng.standard_normal((size, size, spec.channels)) * spec.sigma
    image = np.clip(means[labels] + noise, -1.0, 1.0)
    return image, labels


def synthesize(spec: SyntheticSpec, seed: int) -> dict[str, list[tuple[str, np.ndarray, np.ndarray]]]:
    """In-memory corpus: split -> list of (id, image in [-1, 1], labels)."""
    rng = np.random.default_rng(seed)
    means = spec.means()
    out: dict[str, list] = {s: [] for s in SPLITS}
    idx = 0
    for split in SPLITS:
        for _ in range(int(spec.counts.get(split, 0))):
            image, labels = _sample(spec, rng, means)
            out[split].append((f"s{idx:06d}", image, labels))
            idx += 1
    return out


# -- manifest ----------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    seed: int | None
    image_size: int
    channels: int
    n_classes: int
    splits: dict[str, list[str]]
    synthetic: dict | None = None
    mixture: dict | None = None

    @property
    def ids(self) -> list[str]:
        return [i for s in SPLITS for i in self.splits.get(s, [])]

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            for i in ids:
                if i in seen:
                    raise ValueError(f"sample {i} in both {seen[i]} and {split}")
                seen[i] = split

    def mixture_spec(self) -> GaussianMixtureSpec:
        """Per-pixel texture model of a synthetic corpus (for analytic oracles/victims)."""
        if self.mixture is None:
            raise ValueError("manifest carries no texture model (not a synthetic corpus)")
        return GaussianMixtureSpec.from_dict(self.mixture)

    def write(self) -> Path:
        path = self.root / "manifest"
        header = {"kind": "scorebreak-manifest", "version": MANIFEST_VERSION, "seed": self.seed,
                  "image_size": self.image_size, "channels": self.channels,
                  "n_classes": self.n_classes, "synthetic": self.synthetic, "mixture": self.mixture}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for split in SPLITS:
                for i in self.splits.get(split, []):
                    fh.write(json.dumps({"id": i, "split": split}, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest"
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("kind") != "scorebreak-manifest":
            raise ValueError(f"{path} is not a dataset manifest")
        head = lines[0]
        splits: dict[str, list[str]] = {s: [] for s in SPLITS}
        for rec in lines[1:]:
            if rec["split"] not in splits:
                raise ValueError(f"unknown split {rec['split']!r} for sample {rec['id']}")
            splits[rec["split"]].append(rec["id"])
        m = cls(root=path.parent, seed=head.get("seed"), image_size=head["image_size"],
                channels=head["channels"], n_classes=head["n_classes"], splits=splits,
                synthetic=head.get("synthetic"), mixture=head.get("mixture"))
        m.check_disjoint()
        return m


def _save_png(array: np.ndarray, path: Path) -> None:
    # pinned encoder settings keep the corpus byte-identical across runs
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def generate(spec: SyntheticSpec, seed: int, root) -> DatasetManifest:
    """Write a synthetic corpus under ``root`` and return its manifest."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            (root / split).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    corpus = synthesize(spec, seed)
    counts = np.zeros(spec.n_classes)
    splits = {}
    for split, items in corpus.items():
        splits[split] = [i for i, _, _ in items]
        for sid, image, labels in items:
            _save_png(to_uint8(image), root / split / f"{sid}.img")
            _save_png(labels.astype(np.uint8), root / split / f"{sid}.mask")
            counts += np.bincount(labels.ravel(), minlength=spec.n_classes)
    weights = counts / counts.sum()
    mixture = {"means": spec.means().tolist(), "sigma2": spec.sigma ** 2, "weights": weights.tolist()}
    manifest = DatasetManifest(root=root, seed=seed, image_size=spec.image_size, channels=spec.channels,
                               n_classes=spec.n_classes, splits=splits, synthetic=spec.to_dict(),
                               mixture=mixture)
    manifest.write()
    return manifest


# -- loading -----------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    image: np.ndarray   # H x W x C in [-1, 1]
    labels: np.ndarray  # H x W class ids
    mask: np.ndarray    # H x W x K condition in [-0.5, 0.5]


class Dataset:
    """Read-only view of an on-disk corpus."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def read_sample(self, split: str, sid: str) -> Sample:
        m = self.manifest
        img_path = m.root / split / f"{sid}.img"
        mask_path = m.root / split / f"{sid}.mask"
        for p in (img_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(f"sample {sid}: missing file {p}")
        try:
            with Image.open(img_path) as im:
                raw = np.asarray(im.convert("RGB") if m.channels == 3 else im)
            with Image.open(mask_path) as im:
                labels = np.asarray(im).astype(np.int64)
        except OSError as exc:
            raise ValueError(f"sample {sid}: unreadable image ({exc})") from exc
        if raw.ndim == 2:
            raw = raw[..., None]
        if labels.ndim != 2 or raw.shape[:2] != labels.shape:
            raise ValueError(f"sample {sid}: image {raw.shape} and mask {labels.shape} sizes differ")
        if labels.min() < 0 or labels.max() >= m.n_classes:
            raise ValueError(f"sample {sid}: mask values outside 0..{m.n_classes - 1}")
        return Sample(sid, from_uint8(raw), labels, normalize_mask(labels, m.n_classes))

    def iter_split(self, split: str) -> Iterator[Sample]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        for sid in self.manifest.splits.get(split, []):
            yield self.read_sample(split, sid)

    def arrays(self, split: str, limit: int | None = None):
        """Stacked (ids, images N x H x W x C, labels N x H x W, masks N x H x W x K)."""
        ids, images, labels, masks = [], [], [], []
        for i, s in enumerate(self.iter_split(split)):
            if limit is not None and i >= limit:
                break
            ids.append(s.id)
            images.append(s.image)
            labels.append(s.labels)
            masks.append(s.mask)
        if not ids:
            m = self.manifest
            k = 1 if m.n_classes == 2 else m.n_classes
            sz = m.image_size
            return [], np.zeros((0, sz, sz, m.channels)), np.zeros((0, sz, sz), np.int64), np.zeros((0, sz, sz, k))
        return ids, np.stack(images), np.stack(labels), np.stack(masks)


def load(manifest_path) -> Dataset:
    return Dataset(DatasetManifest.read(manifest_path))


def default_cache_dir() -> Path:
    return Path(os.environ.get("SCOREBREAK_CACHE", Path.home() / ".cache" / "scorebreak"))
