"""ShapeFashion: a procedural, hierarchically labelled image+text dataset.

Each sub-category owns a fixed silhouette. Sub-categories of the same main
category share a horizontal band of the canvas (the first main category sits
at the top, the last at the bottom), so the two ontology layers are visible
in the pixels. Color and texture vary per example and are named in the
templated description.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .ontology import Ontology, parent_of

log = logging.getLogger(__name__)

__all__ = [
    "DatasetSpec",
    "LabeledExample",
    "Batch",
    "DatasetError",
    "DEFAULT_COLORS",
    "DEFAULT_TEXTURES",
    "TEMPLATES",
    "render_example",
    "template_text",
    "example_seed",
    "generate_dataset",
    "load_dataset",
    "ManifestDataset",
    "silhouette_template",
    "nearest_template_classify",
]

VALID_RESOLUTIONS = (4, 8, 16, 32, 64)
SUPERSAMPLE = 4
BACKGROUND = np.array([0.5, 0.5, 0.5])

DEFAULT_COLORS = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.30, 0.85),
    "green": (0.15, 0.65, 0.20),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.50, 0.10),
}
DEFAULT_TEXTURES = {"solid": 0, "striped": 1, "checked": 2, "dotted": 3}

TEMPLATES = (
    "{color} {texture} {sub}",
    "a {color} {sub} with a {texture} pattern",
    "long sleeve {color} {texture} {sub} with ribbed collar",
    "{texture} {sub} in {color}",
    "classic {sub} made of {color} {texture} fabric",
    "relaxed fit {sub} {color} and {texture}",
)

N_SHAPES = 8
# outline order for siblings; block and diamond first so two-child mains differ strongly
SHAPE_SEQUENCE = (0, 4, 6, 2, 5, 1, 3, 7)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    ontology: Ontology
    num_examples: int
    resolution: int = 32
    seed: int = 0
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    textures: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURES))

    def __post_init__(self):
        if self.resolution not in VALID_RESOLUTIONS:
            raise DatasetError(f"resolution must be one of {VALID_RESOLUTIONS}, got {self.resolution}")
        if self.num_examples <= 0:
            raise DatasetError(f"num_examples must be positive, got {self.num_examples}")
        if not self.colors or not self.textures:
            raise DatasetError("colors and textures palettes must be non-empty")
        for m in range(self.ontology.num_main):
            if len(self.ontology.children(m)) < 2:
                warnings.warn(
                    f"main category {self.ontology.main_categories[m]!r} has fewer than "
                    "2 sub-categories",
                    stacklevel=3,
                )

    def to_dict(self) -> dict:
        return {
            "ontology": self.ontology.to_dict(),
            "num_examples": self.num_examples,
            "resolution": self.resolution,
            "seed": self.seed,
            "colors": {k: list(v) for k, v in self.colors.items()},
            "textures": dict(self.textures),
        }


@dataclass
class LabeledExample:
    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    sub_index: int
    text: str


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, 3) float32 in [-1, 1]
    sub: np.ndarray
    main: np.ndarray
    texts: list


def _shape_mask(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r2 = u * u + v * v
    if shape_id == 0:  # block
        return (au <= 0.9) & (av <= 0.9)
    if shape_id == 1:  # ellipse
        return r2 <= 0.95**2
    if shape_id == 2:  # apex up
        return (av <= 0.9) & (au <= 0.95 * (v + 0.9) / 1.8)
    if shape_id == 3:  # apex down
        return (av <= 0.9) & (au <= 0.95 * (0.9 - v) / 1.8)
    if shape_id == 4:  # diamond
        return au + av <= 0.95
    if shape_id == 5:  # plus
        return ((au <= 0.3) & (av <= 0.9)) | ((av <= 0.3) & (au <= 0.9))
    if shape_id == 6:  # ring
        return (r2 <= 0.95**2) & (r2 >= 0.5**2)
    if shape_id == 7:  # hourglass
        return (av <= 0.9) & (au <= 0.15 + 0.75 * av)
    raise ValueError(shape_id)


def _grid(resolution: int):
    n = resolution * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def _band_coords(ontology: Ontology, sub_index: int, x, y):
    """Local coordinates in [-1, 1]^2 of the sub-category's bounding box."""
    main = parent_of(ontology, sub_index)
    siblings = ontology.children(main)
    local = siblings.index(sub_index)
    band_h = 1.0 / ontology.num_main
    cy = (main + 0.5) * band_h
    hh = 0.46 * band_h
    # beyond N_SHAPES siblings, reuse outlines at a narrower width
    hw = 0.42 * (0.75 ** (local // N_SHAPES))
    u = (x - 0.5) / hw
    v = (y - cy) / hh
    return SHAPE_SEQUENCE[(local + 2 * main) % N_SHAPES], u, v


@lru_cache(maxsize=256)
def _supersampled_mask(ontology: Ontology, sub_index: int, resolution: int) -> np.ndarray:
    x, y = _grid(resolution)
    shape_id, u, v = _band_coords(ontology, sub_index, x, y)
    mask = _shape_mask(shape_id, u, v)
    mask.setflags(write=False)
    return mask


def silhouette_template(ontology: Ontology, sub_index: int, resolution: int) -> np.ndarray:
    """Anti-aliased coverage map (H, W) in [0, 1] of a sub-category's silhouette."""
    m = _supersampled_mask(ontology, sub_index, resolution).astype(np.float64)
    return m.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))


def _texture_selector(texture_id: int, x, y, phase: float) -> np.ndarray:
    """Boolean map: True where the secondary (darker) shade is drawn."""
    period = 0.125
    if texture_id == 0:
        return np.zeros_like(x, dtype=bool)
    if texture_id == 1:
        return np.floor((y + phase) / period) % 2 == 1
    if texture_id == 2:
        return (np.floor((x + phase) / period) + np.floor((y + phase) / period)) % 2 == 1
    if texture_id == 3:
        px = np.mod(x + phase, period) - period / 2
        py = np.mod(y + phase, period) - period / 2
        return px * px + py * py <= (0.3 * period) ** 2
    raise ValueError(texture_id)


def template_text(ontology: Ontology, sub_index: int, color: str, texture: str,
                  template_seed: int) -> str:
    sub = ontology.sub_categories[sub_index][0]
    k = int(np.random.default_rng(template_seed).integers(len(TEMPLATES)))
    return TEMPLATES[k].format(color=color, texture=texture, sub=sub)


def example_seed(dataset_seed: int, index: int) -> int:
    """Per-example seed mixed from (dataset seed, index); independent of generation order."""
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1)[0])


def _render(spec: DatasetSpec, seed: int):
    rng = np.random.default_rng(seed)
    ont = spec.ontology
    sub = int(rng.integers(ont.num_sub))
    color_names = list(spec.colors)
    texture_names = list(spec.textures)
    color = color_names[int(rng.integers(len(color_names)))]
    texture = texture_names[int(rng.integers(len(texture_names)))]
    phase = float(rng.uniform(0.0, 0.125))
    tseed = int(rng.integers(2**31))

    x, y = _grid(spec.resolution)
    inside = _supersampled_mask(ont, sub, spec.resolution)
    primary = np.asarray(spec.colors[color], dtype=np.float64)
    secondary = 0.55 * primary
    dark = _texture_selector(int(spec.textures[texture]), x, y, phase)
    rgb = np.where(dark[..., None], secondary, primary)
    rgb = np.where(inside[..., None], rgb, BACKGROUND)
    r = spec.resolution
    img = rgb.reshape(r, SUPERSAMPLE, r, SUPERSAMPLE, 3).mean(axis=(1, 3))
    text = template_text(ont, sub, color, texture, tseed)
    return img, sub, text


def render_example(spec: DatasetSpec, example_seed: int) -> LabeledExample:
    img, sub, text = _render(spec, example_seed)
    return LabeledExample((img * 2.0 - 1.0).astype(np.float32), sub, text)


def _to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img01 * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Render ``spec.num_examples`` examples to ``out_dir``.

    Writes ``img/NNNNNN.png``, ``manifest.jsonl``, ``ontology.json`` and
    ``dataset.json``. Returns per-sub-category counts keyed by name.
    """
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    ont = spec.ontology
    counts = {name: 0 for name in ont.sub_names}
    lines = []
    for i in range(spec.num_examples):
        img, sub, text = _render(spec, example_seed(spec.seed, i))
        rel = f"img/{i:06d}.png"
        Image.fromarray(_to_uint8(img), mode="RGB").save(out / rel, optimize=False)
        counts[ont.sub_names[sub]] += 1
        rec = {"file": rel, "sub": sub, "main": parent_of(ont, sub), "text": text}
        lines.append(json.dumps(rec))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "ontology.json").write_text(json.dumps(ont.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d examples to %s", spec.num_examples, out)
    return counts


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"corrupt image file: {path} ({exc})") from None
    return arr


class ManifestDataset:
    """All examples of a manifest held in memory as uint8 arrays.

    Batch order for epoch ``k`` is a permutation drawn from
    ``SeedSequence([seed, k])`` so a consumer can resume at any
    (epoch, cursor) without replaying earlier epochs.
    """

    def __init__(self, manifest_path):
        manifest_path = Path(manifest_path)
        if not manifest_path.exists():
            raise DatasetError(f"missing manifest: {manifest_path}")
        root = manifest_path.parent
        self.root = root
        self.records = []
        for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                self.records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{manifest_path}:{lineno}: {exc.msg}") from None
        if not self.records:
            raise DatasetError(f"{manifest_path}: manifest has no records")
        self.images = np.stack([_read_png(root / r["file"]) for r in self.records])
        self.sub = np.array([r["sub"] for r in self.records], dtype=np.int64)
        self.main = np.array([r["main"] for r in self.records], dtype=np.int64)
        self.texts = [r["text"] for r in self.records]
        ont_path = root / "ontology.json"
        self.ontology = None
        if ont_path.exists():
            self.ontology = Ontology.from_dict(json.loads(ont_path.read_text(encoding="utf-8")))

    def __len__(self):
        return len(self.records)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    def float_images(self, idx) -> np.ndarray:
        return self.images[idx].astype(np.float32) / 127.5 - 1.0

    def permutation(self, seed: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
        return rng.permutation(len(self))

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.float_images(idx), self.sub[idx], self.main[idx],
                     [self.texts[i] for i in idx])

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0,
                shuffle: bool = True) -> Iterator[Batch]:
        order = self.permutation(seed, epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def load_dataset(manifest_path, batch_size: int = 32, seed: int = 0,
                 shuffle: bool = True) -> Iterator[Batch]:
    """One seeded pass over a manifest in batches; the last batch may be short."""
    if batch_size <= 0:
        raise DatasetError("batch_size must be positive")
    ds = ManifestDataset(manifest_path)
    yield from ds.batches(batch_size, seed=seed, shuffle=shuffle)


def nearest_template_classify(images: np.ndarray, ontology: Ontology) -> np.ndarray:
    """Classify images (N, H, W, 3) in [-1, 1] by nearest silhouette template.

    The foreground is any pixel whose color departs from the neutral
    background; coverage maps are compared in L2.
    """
    images = np.asarray(images, dtype=np.float64)
    res = images.shape[1]
    bg = BACKGROUND * 2.0 - 1.0
    fg = (np.abs(images - bg).max(axis=-1) > 0.1).astype(np.float64)
    templates = np.stack([silhouette_template(ontology, k, res) for k in range(ontology.num_sub)])
    d = ((fg[:, None] - templates[None]) ** 2).sum(axis=(2, 3))
    return d.argmin(axis=1)
