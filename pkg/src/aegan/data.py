"""Image datasets, PNG grid output and the ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import math
import os
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SHAPE_KINDS = ("ellipse", "rectangle", "triangle", "ring")
PALETTES = ("warm", "cool")
CACHE_LIMIT_BYTES = 1 << 30


class DataError(Exception):
    """Raised for unreadable, empty or malformed data sources."""


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float32 CHW in [-1, 1]."""
    return (pixels.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def to_pixels(images: np.ndarray) -> np.ndarray:
    """float CHW (or BCHW) in [-1, 1] -> uint8 HWC (or BHWC)."""
    images = np.asarray(images)
    q = np.clip(np.rint((images.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(q, -3, -1)


class DatasetHandle:
    """Indexable image collection with deterministic per-epoch shuffling.

    Images are produced on demand by ``loader(index) -> (3, R, R) float32``;
    labels are optional (synthetic sources carry them).
    """

    def __init__(
        self, length: int, resolution: int, loader, seed: int = 0, labels=None, source: str = "", cache: bool = True
    ):
        if length < 1:
            raise DataError("dataset is empty")
        self.length = length
        self.resolution = resolution
        self.seed = seed
        self.source = source
        self.labels = None if labels is None else np.asarray(labels)
        self._loader = loader
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return self.length

    def image(self, index: int) -> np.ndarray:
        if not 0 <= index < self.length:
            raise IndexError(index)
        if self._cache is None:
            return self._loader(index)
        img = self._cache.get(index)
        if img is None:
            img = self._loader(index)
            self._cache[index] = img
        return img

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        if indices is None:
            indices = range(self.length)
        out = np.empty((len(indices), 3, self.resolution, self.resolution), dtype=np.float32)
        for k, i in enumerate(indices):
            out[k] = self.image(int(i))
        return out

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.length)

    def batches(self, epoch: int, batch_size: int, drop_last: bool = False) -> Iterator[np.ndarray]:
        order = self.epoch_order(epoch)
        for start in range(0, self.length, batch_size):
            idx = order[start : start + batch_size]
            if drop_last and len(idx) < batch_size:
                return
            yield self.images(idx)

    def subset(self, indices: Sequence[int]) -> "DatasetHandle":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return DatasetHandle(
            len(indices),
            self.resolution,
            lambda i: self.image(int(indices[i])),
            seed=self.seed,
            labels=labels,
            source=f"{self.source}[subset]",
            cache=False,
        )

    def split(self, holdout: int) -> tuple["DatasetHandle", "DatasetHandle"]:
        """Deterministic (train, held-out) split; the held-out part is the tail."""
        if not 0 < holdout < self.length:
            raise DataError(f"cannot hold out {holdout} of {self.length} images")
        cut = self.length - holdout
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, self.length))


def _decode(path: Path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return to_unit_range(np.asarray(im))


def load_dataset(path: str | os.PathLike, resolution: int, seed: int = 0) -> DatasetHandle:
    """Folder of images -> dataset resized (bilinear) to ``resolution`` x ``resolution`` RGB."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    bad = []
    for p in files:
        try:
            with Image.open(p) as im:
                im.verify()
        except (UnidentifiedImageError, OSError, SyntaxError):
            bad.append(p.name)
    if bad:
        raise DataError(f"undecodable images in {root}: {', '.join(bad)}")
    if not files:
        raise DataError(f"no images found in {root}")
    cache = len(files) * 3 * resolution * resolution * 4 <= CACHE_LIMIT_BYTES
    return DatasetHandle(
        len(files), resolution, lambda i: _decode(files[i], resolution), seed=seed, source=str(root), cache=cache
    )


# -- synthetic sources --------------------------------------------------------


def _palette_color(rng: np.random.Generator, palette: str) -> np.ndarray:
    if palette == "warm":
        return np.array([rng.uniform(0.75, 1.0), rng.uniform(0.1, 0.6), rng.uniform(0.0, 0.25)])
    return np.array([rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.8), rng.uniform(0.75, 1.0)])


def _background(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    c0 = rng.uniform(0.3, 0.6, 3)
    c1 = rng.uniform(0.3, 0.6, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy)
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.04 * np.sin(2 * np.pi * freq * (xx * np.sin(angle) - yy * np.cos(angle)) + phase)
    return c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp + texture


def _shape_mask(kind: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cy, cx = rng.uniform(-0.35, 0.35, 2)
    ry, rx = rng.uniform(0.3, 0.55, 2)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= rx * 0.8) & (np.abs(v) <= ry * 0.8)
    if kind == "triangle":
        r = max(rx, ry)
        return (v >= -0.5 * r) & (v <= r - 1.7 * np.abs(u))
    if kind == "ring":
        d = (u / rx) ** 2 + (v / ry) ** 2
        return (d <= 1.0) & (d >= 0.35)
    raise ValueError(kind)


def _shapes_image(index: int, seed: int, resolution: int, num_classes: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    label = index % num_classes
    kind = SHAPE_KINDS[label % len(SHAPE_KINDS)]
    palette = PALETTES[(label // len(SHAPE_KINDS)) % len(PALETTES)]
    axis = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    img = _background(rng, yy, xx)
    mask = _shape_mask(kind, rng, yy, xx)
    color = _palette_color(rng, palette)
    shade = 1.0 - 0.15 * (yy + 1) / 2
    img = np.where(mask[None], color[:, None, None] * shade, img)
    return (np.clip(img, 0, 1) * 2 - 1).astype(np.float32)


def _gradients_image(index: int, seed: int, resolution: int, num_classes: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    label = index % num_classes
    angle = (label + rng.uniform(-0.3, 0.3)) * 2 * np.pi / num_classes
    axis = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    ramp = 0.5 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy) / np.sqrt(2)
    c0 = rng.uniform(0.0, 0.4, 3)
    c1 = rng.uniform(0.6, 1.0, 3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    return (np.clip(img, 0, 1) * 2 - 1).astype(np.float32)


SYNTHETIC_KINDS = {"shapes": (_shapes_image, len(SHAPE_KINDS) * len(PALETTES)), "gradients": (_gradients_image, 8)}


def synthetic_dataset(kind: str = "shapes", count: int = 2000, resolution: int = 64, seed: int = 0) -> DatasetHandle:
    """Procedural labelled images, reproducible from ``seed``.

    ``shapes``: ellipse/rectangle/triangle/ring in a warm or cool palette over a
    textured gradient background (8 classes).  ``gradients``: two-colour linear
    ramps whose direction encodes one of 8 classes.  Labels cycle through the
    classes so every class holds ``count // K`` or ``count // K + 1`` images.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {sorted(SYNTHETIC_KINDS)}")
    if count < 1:
        raise DataError("synthetic dataset needs count >= 1")
    make, num_classes = SYNTHETIC_KINDS[kind]
    labels = np.arange(count) % num_classes
    return DatasetHandle(
        count,
        resolution,
        lambda i: make(i, seed, resolution, num_classes),
        seed=seed,
        labels=labels,
        source=f"synthetic:{kind}",
    )


def num_classes(dataset: DatasetHandle) -> int:
    if dataset.labels is None:
        raise DataError("dataset has no labels")
    return int(dataset.labels.max()) + 1


# -- PNG output ---------------------------------------------------------------


def write_grid(images: np.ndarray, columns: int, path: str | os.PathLike) -> None:
    """Tile (N, 3, R, R) images in [-1, 1] row-major into one PNG."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n = len(images)
    if n < 1:
        raise DataError("write_grid needs at least one image")
    if columns < 1:
        raise ValueError("columns must be positive")
    columns = min(columns, n)
    rows = math.ceil(n / columns)
    _, _, h, w = images.shape
    canvas = np.zeros((rows * h, columns * w, 3), dtype=np.uint8)
    pixels = to_pixels(images)
    for k in range(n):
        r, c = divmod(k, columns)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = pixels[k]
    try:
        Image.fromarray(canvas).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(to_pixels(image)).save(path, format="PNG")


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return to_unit_range(np.asarray(im.convert("RGB")))


# -- config files -------------------------------------------------------------


def _coerce(text: str, kind):
    text = text.strip()
    if text.lower() == "none":
        return None
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _field_types(cls) -> dict[str, type]:
    hints = {}
    for f in dataclasses.fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        t = t.replace(" ", "")
        if t.startswith("bool"):
            hints[f.name] = bool
        elif t.startswith("int"):
            hints[f.name] = int
        elif t.startswith("float"):
            hints[f.name] = float
        else:
            hints[f.name] = str
    return hints


def parse_config_text(text: str, sections: dict[str, type]) -> dict[str, dict[str, object]]:
    """Parse ``key = value`` lines into per-section dictionaries.

    ``sections`` maps a prefix to a dataclass.  The empty prefix is matched by
    bare keys; other prefixes by ``prefix.key``.  A bare key that belongs to a
    non-empty section only is applied to every such section.  Unknown keys raise.
    """
    types = {prefix: _field_types(cls) for prefix, cls in sections.items()}
    out: dict[str, dict[str, object]] = {prefix: {} for prefix in sections}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        targets = []
        if "." in key:
            prefix, name = key.split(".", 1)
            if prefix in types and prefix and name in types[prefix]:
                targets.append((prefix, name))
        else:
            if "" in types and key in types[""]:
                targets.append(("", key))
            else:
                targets.extend((p, key) for p in types if p and key in types[p])
        if not targets:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        for prefix, name in targets:
            try:
                out[prefix][name] = _coerce(value, types[prefix][name])
            except ValueError as exc:
                raise DataError(f"config line {lineno}: bad value for {key!r}: {exc}") from exc
    return out


def format_config(values: dict[str, object], prefix: str = "") -> str:
    lines = []
    for key, value in values.items():
        name = f"{prefix}.{key}" if prefix else key
        lines.append(f"{name} = {value}")
    return "\n".join(lines)
