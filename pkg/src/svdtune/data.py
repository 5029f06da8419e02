"""Synthetic shape corpora for text-prompted segmentation, plus an on-disk format.

Every image is paired with every label in the label set: present classes get
their true mask, absent ones get a blank mask. The target domain differs
from the source by intensity inversion, smooth texture noise, a background
ramp and shape stretching (see :class:`DomainShiftSpec`).

On-disk layout::

    root/labels.txt              # "class_name<TAB>class_id" per line, UTF-8
    root/images/<id>.png
    root/masks/<id>/<class>.png  # binary; a missing file means a blank mask
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

LABELS = ("circle", "square", "triangle", "ring")

# Each class is painted in its own intensity band, like tissue classes in
# medical images; labels outside this table get the union band.
CLASS_INTENSITY = {"circle": (0.40, 0.50), "square": (0.55, 0.65), "triangle": (0.70, 0.80), "ring": (0.85, 0.95)}
DEFAULT_INTENSITY = (0.40, 0.95)


class DataError(Exception):
    pass


class GenerationError(DataError):
    pass


class IngestError(DataError):
    pass


@dataclass(frozen=True)
class DomainShiftSpec:
    invert: bool = False
    noise: float = 0.0        # amplitude of a smooth zero-mean texture field
    gradient: float = 0.0     # left-to-right background ramp from 0 to this value
    deform: float = 0.0       # anisotropic stretch of rendered shapes, 0 = none
    gamma: float = 1.0        # intensity power curve, 1 = none

    def is_identity(self) -> bool:
        return (not self.invert and self.noise == 0 and self.gradient == 0 and self.deform == 0
                and self.gamma == 1)

    def to_dict(self) -> dict:
        return asdict(self)


SOURCE = DomainShiftSpec()
TARGET = DomainShiftSpec(noise=0.05, deform=0.3, gamma=2.0)


@dataclass
class SegSample:
    image: np.ndarray      # H x W x C float32 in [0, 1]
    prompt: str
    mask: np.ndarray       # H x W bool
    sample_id: str
    domain: str = "source"

    @property
    def blank(self) -> bool:
        return not self.mask.any()


@dataclass
class SegDataset:
    samples: List[SegSample]
    label_map: Dict[str, int]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]

    @property
    def labels(self) -> List[str]:
        return sorted(self.label_map, key=self.label_map.get)

    def image_ids(self) -> List[str]:
        return list(dict.fromkeys(s.sample_id for s in self.samples))

    def blank_fraction(self) -> float:
        return float(np.mean([s.blank for s in self.samples]))


# --------------------------------------------------------------------------- rendering


def _shape_mask(kind: str, yy, xx, cx, cy, r, angle, stretch) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / stretch
    v = (-s * dx + c * dy) * stretch
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "square":
        h = 0.85 * r
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if kind == "triangle":
        # equilateral, circumradius r: three half-planes at distance r/2 from the center
        out = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = math.pi / 2 + 2 * math.pi * k / 3
            out &= (u * math.cos(a) + v * math.sin(a)) <= r / 2
        return out
    raise ValueError(f"unknown shape {kind!r}")


def _texture(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    fine = ndimage.zoom(coarse, size / cells, order=1, mode="nearest")
    return fine[:size, :size]


def apply_shift(image: np.ndarray, spec: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """Intensity-level part of the domain shift. Masks are never touched here."""
    img = image.astype(np.float32, copy=True)
    size = img.shape[1]
    if spec.invert:
        img = 1.0 - img
    if spec.gamma != 1:
        img = np.clip(img, 0.0, 1.0) ** np.float32(spec.gamma)
    if spec.gradient:
        img = img + spec.gradient * np.linspace(0.0, 1.0, size, dtype=np.float32)[None, :]
    if spec.noise:
        img = img + spec.noise * _texture(rng, size).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def render_image(rng: np.random.Generator, size: int, labels: Sequence[str], deform: float = 0.0,
                 max_tries: int = 200, count_weights=(0.1, 0.2, 0.3, 0.4), radius=(0.11, 0.17)):
    """Draw 1-4 non-overlapping shapes of distinct classes.

    Returns a grayscale image and a dict class -> bool mask for present classes.
    The default count weights give 3 shapes on average, so a quarter of the
    (image, label) pairs are blank for the four-class label set. A layout that
    cannot be completed is redrawn from scratch, ``max_tries`` times at most.
    """
    n_max = min(len(labels), len(count_weights))
    w = np.asarray(count_weights[:n_max], dtype=float)
    k = int(rng.choice(np.arange(1, n_max + 1), p=w / w.sum()))
    kinds = [labels[int(i)] for i in rng.choice(len(labels), size=k, replace=False)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for _ in range(max_tries):
        layout = _layout(rng, size, len(kinds), deform, radius)
        if layout is not None:
            break
    else:
        raise GenerationError(f"could not place {k} shapes on a {size}px canvas after {max_tries} tries")
    img = np.full((size, size), rng.uniform(0.05, 0.2), dtype=np.float32)
    masks: Dict[str, np.ndarray] = {}
    for kind, (cx, cy, r, stretch) in zip(kinds, layout):
        m = _shape_mask(kind, yy, xx, cx, cy, r, rng.uniform(0, 2 * math.pi), stretch)
        img[m] = rng.uniform(*CLASS_INTENSITY.get(kind, DEFAULT_INTENSITY))
        masks[kind] = m
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), masks


def _layout(rng, size, k, deform, radius, attempts=20):
    """Centers, radii and stretches for ``k`` disjoint shapes, or None."""
    placed = []
    for _ in range(k):
        r = rng.uniform(*radius) * size
        stretch = 1.0 + rng.uniform(0.0, deform) if deform else 1.0
        reach = r * stretch + max(1.0, size / 64)
        if 2 * reach >= size:
            return None
        for _ in range(attempts):
            cx, cy = rng.uniform(reach, size - reach, size=2)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (reach + pr) ** 2 for px, py, pr, _ in placed):
                placed.append((cx, cy, reach, (r, stretch)))
                break
        else:
            return None
    return [(cx, cy, r, st) for cx, cy, _, (r, st) in placed]


def generate(spec: DomainShiftSpec = SOURCE, n_samples: int = 100, seed: int = 0, image_size: int = 128,
             labels: Sequence[str] = LABELS, domain: Optional[str] = None, channels: int = 3) -> SegDataset:
    """Generate ``n_samples`` images, each emitted once per label."""
    if n_samples < 1:
        raise GenerationError("n_samples must be >= 1")
    domain = domain or ("source" if spec.is_identity() else "target")
    label_map = {name: i for i, name in enumerate(labels)}
    samples: List[SegSample] = []
    children = np.random.SeedSequence(seed).spawn(n_samples)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        gray, masks = render_image(rng, image_size, labels, deform=spec.deform)
        gray = apply_shift(gray, spec, rng)
        image = np.broadcast_to(gray[..., None], (image_size, image_size, channels))
        sid = f"{domain}-{seed}-{i:05d}"
        blank = np.zeros((image_size, image_size), dtype=bool)
        for name in labels:
            samples.append(SegSample(image, name, masks.get(name, blank), sid, domain))
    meta = {"spec": spec.to_dict(), "seed": seed, "n_images": n_samples, "image_size": image_size}
    return SegDataset(samples, label_map, meta)


# --------------------------------------------------------------------------- disk format


def read_label_map(path) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, idx = line.split("\t")
            out[name] = int(idx)
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: expected 'name<TAB>id', got {line!r}") from exc
    return out


def write_label_map(path, label_map: Dict[str, int]) -> None:
    lines = [f"{name}\t{idx}" for name, idx in sorted(label_map.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_dataset(dataset: SegDataset, root) -> Path:
    """Write in the ingest layout. Blank masks are not written."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    write_label_map(root / "labels.txt", dataset.label_map)
    for s in dataset:
        img_path = root / "images" / f"{s.sample_id}.png"
        mask_dir = root / "masks" / s.sample_id
        if not img_path.exists():
            arr = np.round(np.asarray(s.image) * 255).astype(np.uint8)
            Image.fromarray(arr if arr.shape[-1] != 1 else arr[..., 0]).save(img_path)
            mask_dir.mkdir(parents=True, exist_ok=True)
        if s.mask.any():
            Image.fromarray(s.mask.astype(np.uint8) * 255).save(mask_dir / f"{s.prompt}.png")
    return root


def ingest(root, domain: str = "target") -> SegDataset:
    root = Path(root)
    labels_file = root / "labels.txt"
    if not labels_file.exists():
        raise IngestError(f"missing labels file {labels_file}")
    label_map = read_label_map(labels_file)
    samples: List[SegSample] = []
    for img_path in sorted((root / "images").glob("*.png")):
        sid = img_path.stem
        mask_dir = root / "masks" / sid
        if not mask_dir.is_dir():
            raise IngestError(f"image {img_path} has no mask directory {mask_dir}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        h, w = image.shape[:2]
        for name in sorted(label_map, key=label_map.get):
            mpath = mask_dir / f"{name}.png"
            if mpath.exists():
                mask = np.asarray(Image.open(mpath).convert("L")) > 127
                if mask.shape != (h, w):
                    raise IngestError(f"mask {mpath} has shape {mask.shape}, image is {(h, w)}")
            else:
                mask = np.zeros((h, w), dtype=bool)
            samples.append(SegSample(image, name, mask, sid, domain))
    return SegDataset(samples, label_map, {"root": str(root)})


# --------------------------------------------------------------------------- batching


def collate(samples: Sequence[SegSample]):
    """(images B,C,H,W float32, prompts, masks B,H,W float32)."""
    images = torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
    return images.contiguous(), [s.prompt for s in samples], masks


@dataclass
class Batch:
    images: torch.Tensor        # (N, C, H, W), each distinct image once
    image_index: torch.Tensor   # (B,) row of ``images`` each query belongs to
    prompts: List[str]          # (B,)
    masks: torch.Tensor         # (B, H, W) float

    def query_images(self) -> torch.Tensor:
        return self.images[self.image_index]


class PromptBalancedSampler:
    """Endless batches of ``batch_size`` queries at a fixed present:absent ratio (default 3:1).

    Queries are taken from a few images at a time, so one training step can
    encode each image once and decode several prompts against it. Images are
    visited in a fresh random order every epoch.
    """

    def __init__(self, dataset: SegDataset, batch_size: int, rng: np.random.Generator, present_fraction: float = 0.75):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        groups: Dict[str, Tuple[List[int], List[int]]] = {}
        for i, s in enumerate(dataset):
            groups.setdefault(s.sample_id, ([], []))[int(s.blank)].append(i)
        self.groups = list(groups.values())
        self.all_present = [i for g in self.groups for i in g[0]]
        self.all_absent = [i for g in self.groups for i in g[1]]
        if not self.all_present:
            self.n_present = 0
        elif not self.all_absent:
            self.n_present = batch_size
        else:
            self.n_present = int(round(batch_size * present_fraction))
        self._order: List[int] = []

    def __iter__(self):
        return self

    def _next_group(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.groups)))
        return int(self._order.pop())

    def _pick(self, pool: List[int], fallback: List[int], n: int) -> List[int]:
        if n == 0:
            return []
        if not pool:
            pool = fallback
        return [int(i) for i in self.rng.choice(pool, n, replace=len(pool) < n)]

    def __next__(self) -> Batch:
        n_present, n_absent = self.n_present, self.batch_size - self.n_present
        present: List[int] = []
        absent: List[int] = []
        for _ in range(min(self.batch_size, len(self.groups))):
            g = self.groups[self._next_group()]
            present += g[0]
            absent += g[1]
            if len(present) >= n_present and len(absent) >= n_absent:
                break
        idx = self._pick(present, self.all_present, n_present) + self._pick(absent, self.all_absent, n_absent)
        self.rng.shuffle(idx)
        samples = [self.dataset[i] for i in idx]
        rows: Dict[str, int] = {}
        firsts: List[SegSample] = []
        for s in samples:
            if s.sample_id not in rows:
                rows[s.sample_id] = len(firsts)
                firsts.append(s)
        images = collate(firsts)[0]
        index = torch.tensor([rows[s.sample_id] for s in samples], dtype=torch.long)
        masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
        return Batch(images, index, [s.prompt for s in samples], masks)
