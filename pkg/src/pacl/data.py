"""Seeded synthetic image/caption/label-map scenes and their on-disk layout.

Scenes are flat-colored shapes on a grey canvas.  Every object pixel is
painted with its class's canonical color and recorded in the label map;
background pixels carry the ignore id 255.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import formats
from .text import PROMPTS, extract_nouns, fill_prompt

IGNORE = 255

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 60, 180),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "pink": (240, 130, 190),
}
SHAPES = ("square", "circle", "triangle")


@dataclass
class SceneSpec:
    canvas: int = 32
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 10
    max_size: int = 16
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    # "color": one class per color, shape is a nuisance variable.
    # "shape_color": one class per (color, shape) pair.
    class_mode: str = "color"
    background: tuple[int, int, int] = (128, 128, 128)
    seed: int = 0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.colors = tuple(self.colors)
        self.background = tuple(self.background)
        if not self.shapes or not self.colors:
            raise ValueError("shape and color vocabularies must be non-empty")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shapes: {unknown}")
        unknown = [c for c in self.colors if c not in COLORS]
        if unknown:
            raise ValueError(f"unknown colors: {unknown}")
        if self.class_mode not in ("color", "shape_color"):
            raise ValueError(f"class_mode must be 'color' or 'shape_color', got {self.class_mode!r}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size <= self.canvas:
            raise ValueError("need 1 <= min_size <= max_size <= canvas")

    @property
    def classes(self) -> list[tuple[str, str, str | None]]:
        """(name, color, shape) per class id; shape is None in color mode."""
        if self.class_mode == "color":
            return [(c, c, None) for c in self.colors]
        return [(f"{c} {s}", c, s) for c in self.colors for s in self.shapes]

    @property
    def class_names(self) -> list[str]:
        return [name for name, _, _ in self.classes]

    def lexicon(self) -> list[str]:
        """Words treated as nouns when augmenting captions with prompts."""
        if self.class_mode == "color":
            return list(self.colors)
        return list(self.shapes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ImageTextPair:
    image: torch.Tensor           # 3 x H x W, values k/255
    caption: str
    labels: np.ndarray | None = None   # H x W int64, IGNORE on background
    classes: list[int] = field(default_factory=list)


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        return np.abs(xx - size / 2) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng: np.random.Generator, spec: SceneSpec, count: int):
    boxes: list[tuple[int, int, int]] = []
    for _ in range(count):
        for _attempt in range(200):
            s = int(rng.integers(spec.min_size, spec.max_size + 1))
            y = int(rng.integers(0, spec.canvas - s + 1))
            x = int(rng.integers(0, spec.canvas - s + 1))
            # one pixel of clearance between boxes
            if all(y + s < by or by + bs < y or x + s < bx or bx + bs < x for by, bx, bs in boxes):
                boxes.append((y, x, s))
                break
    return boxes


def generate_scene(spec: SceneSpec, index: int) -> ImageTextPair:
    rng = np.random.default_rng([spec.seed, index])
    classes = spec.classes
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = _place(rng, spec, count)
    canvas = np.empty((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    canvas[:] = spec.background
    labels = np.full((spec.canvas, spec.canvas), IGNORE, dtype=np.int64)
    phrases, present = [], []
    for y, x, s in boxes:
        cid = int(rng.integers(len(classes)))
        _, color, shape = classes[cid]
        if shape is None:
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        m = shape_mask(shape, s)
        canvas[y:y + s, x:x + s][m] = COLORS[color]
        labels[y:y + s, x:x + s][m] = cid
        phrases.append(f"a {color} {shape}")
        present.append(cid)
    caption = "a photo of " + " and ".join(phrases)
    image = torch.from_numpy(canvas).permute(2, 0, 1).float() / 255
    return ImageTextPair(image=image, caption=caption, labels=labels, classes=present)


def generate_dataset(spec: SceneSpec, n: int) -> list[ImageTextPair]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return [generate_scene(spec, i) for i in range(n)]


def prompt_augment(
    pair: ImageTextPair,
    lexicon: Sequence[str],
    rng: np.random.Generator,
    prompts: Sequence[str] = PROMPTS,
) -> list[ImageTextPair]:
    """One extra pair per caption noun, captioned by a randomly chosen prompt."""
    extra = []
    for noun in extract_nouns(pair.caption, lexicon):
        template = prompts[int(rng.integers(len(prompts)))]
        extra.append(dataclasses.replace(pair, caption=fill_prompt(template, noun)))
    return extra


def augment_dataset(
    pairs: Sequence[ImageTextPair], lexicon: Sequence[str], seed: int, prompts: Sequence[str] = PROMPTS
) -> list[ImageTextPair]:
    rng = np.random.default_rng(seed)
    out = list(pairs)
    for p in pairs:
        out.extend(prompt_augment(p, lexicon, rng, prompts))
    return out


# -- directory layout --------------------------------------------------------

def write_dataset(root, pairs: Sequence[ImageTextPair], spec: SceneSpec | None = None,
                  class_names: Sequence[str] | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    names = list(class_names if class_names is not None else spec.class_names)
    with open(root / "captions.tsv", "w", encoding="utf-8") as fh:
        for i, p in enumerate(pairs):
            formats.save_ppm(root / "images" / f"{i:06d}.ppm", p.image)
            if p.labels is not None:
                formats.save_pgm(root / "labels" / f"{i:06d}.pgm", p.labels)
            fh.write(f"{i}\t{p.caption}\n")
    (root / "classes.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    manifest = {
        "count": len(pairs),
        "labelled": sum(p.labels is not None for p in pairs),
        "classes": len(names),
        "spec": spec.to_dict() if spec else None,
        "seed": spec.seed if spec else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return root


def read_classes(path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise ValueError(f"{path}: duplicate class names")
    return names


def read_dataset(root) -> tuple[list[ImageTextPair], list[str], dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    classes = read_classes(root / "classes.txt")
    pairs = []
    for line in (root / "captions.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        idx, caption = line.split("\t", 1)
        i = int(idx)
        lab_path = root / "labels" / f"{i:06d}.pgm"
        labels = formats.load_pgm(lab_path) if lab_path.exists() else None
        present = sorted({int(v) for v in np.unique(labels) if v != IGNORE}) if labels is not None else []
        pairs.append(ImageTextPair(formats.load_ppm(root / "images" / f"{i:06d}.ppm"), caption, labels, present))
    return pairs, classes, manifest
