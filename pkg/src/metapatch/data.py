"""Datasets: class-folder ingestion and procedurally rendered shapes.

Folder layout::

    root/
      <class_a>/img0.ppm, img1.ppm, ...
      <class_b>/...

Class indices follow the sorted directory names.  Binary PPM (P6) and PGM
(P5) are decoded natively; PNG/JPEG are read through Pillow when installed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "cross", "stripes", "triangle", "ring", "checker", "diamond")
_NATIVE = {".ppm", ".pgm", ".pnm"}
_PILLOW = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def validate(self) -> None:
        """Check every class is populated and pixels lie in [0, 1]."""
        counts = np.bincount(self.labels, minlength=self.num_classes)
        empty = [self.class_name(c) for c in range(self.num_classes) if counts[c] == 0]
        if empty:
            raise ValueError(f"empty classes: {empty}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values outside [0, 1]")

    def class_name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else str(c)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        manifest = dict(self.manifest)
        if tag is not None:
            manifest["split"] = tag
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, list(self.class_names), manifest)

    def split(self, seed: int, eval_fraction: float = 0.2) -> tuple["Dataset", "Dataset"]:
        """Stratified (train, eval) split, a pure function of (index, seed)."""
        tags = split_tags(self.labels, seed, eval_fraction)
        train, ev = np.flatnonzero(tags == 0), np.flatnonzero(tags == 1)
        tr, te = self.subset(train, "train"), self.subset(ev, "eval")
        tr.manifest.update(split_seed=seed, eval_fraction=eval_fraction)
        te.manifest.update(split_seed=seed, eval_fraction=eval_fraction)
        return tr, te

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def split_tags(labels, seed: int, eval_fraction: float) -> np.ndarray:
    """0 = train, 1 = eval.  Each class contributes round(fraction * size) eval samples."""
    if not 0 <= eval_fraction < 1:
        raise ValueError("eval_fraction must lie in [0, 1)")
    labels = np.asarray(labels)
    tags = np.zeros(len(labels), dtype=np.int8)
    rng = np.random.default_rng(seed)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_eval = int(round(eval_fraction * len(idx)))
        tags[rng.permutation(idx)[:n_eval]] = 1
    return tags


# -- image I/O ----------------------------------------------------------------


def _read_netpbm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P5") or not 0 < maxval < 65536:
        raise ValueError(f"unsupported netpbm variant {magic!r}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, offset=pos + 1, count=w * h * channels)
    img = data.reshape(h, w, channels).astype(np.float32) / np.float32(maxval)
    return img.transpose(2, 0, 1)


def read_image(path) -> np.ndarray:
    """Decode to (C, H, W) float32 in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in _NATIVE:
            return _read_netpbm(path)
        if suffix in _PILLOW:
            try:
                from PIL import Image
            except ImportError as exc:  # pragma: no cover - depends on env
                raise ValueError("Pillow is required for non-PPM images") from exc
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255)
            return arr.transpose(2, 0, 1)
    except (ValueError, OSError) as exc:
        raise ValueError(f"cannot decode {path}: {exc}") from exc
    raise ValueError(f"cannot decode {path}: unsupported extension {suffix!r}")


def write_ppm(image, path) -> None:
    image = np.asarray(image)
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def _resize(image, resolution):
    _, H, W = image.shape
    h, w = resolution
    rows = ((np.arange(h) + 0.5) * H / h).astype(np.int64)
    cols = ((np.arange(w) + 0.5) * W / w).astype(np.int64)
    return image[:, rows][:, :, cols]


def load_folder(path, resolution=(32, 32)) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ValueError(f"{root}: need at least 2 class directories")
    images, labels = [], []
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.is_file() and not f.name.startswith("."))
        if not files:
            raise ValueError(f"class directory {name!r} is empty")
        for f in files:
            img = read_image(f)
            if img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            images.append(_resize(img, resolution))
            labels.append(label)
    ds = Dataset(
        np.stack(images),
        np.array(labels),
        len(classes),
        classes,
        {"source": str(root), "resolution": list(resolution), "kind": "folder"},
    )
    ds.validate()
    return ds


# -- procedural shapes ------------------------------------------------------


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask on shape-local coordinates u, v in [-1, 1]."""
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    r = np.sqrt(u * u + v * v)
    if kind == "disk":
        return r <= 1
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if kind == "cross":
        return inside & ((np.abs(u) <= 0.28) | (np.abs(v) <= 0.28))
    if kind == "stripes":
        return inside & (np.floor((v + 1) * 3).astype(int) % 2 == 0)
    if kind == "triangle":
        return inside & (np.abs(u) <= (v + 1) / 2)
    if kind == "ring":
        return (r <= 1) & (r >= 0.6)
    if kind == "checker":
        return inside & ((np.floor((u + 1) * 2) + np.floor((v + 1) * 2)).astype(int) % 2 == 0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, resolution, rng: np.random.Generator, contrast=(0.15, 0.35),
                 noise: float = 0.05) -> np.ndarray:
    """One (3, H, W) image: a large, faint, slightly brighter shape on a noisy background.

    The background is ``U(0.2, 0.6)`` per channel and the foreground is brighter
    by ``d * u`` with ``d ~ U(contrast)`` and ``u ~ U(0.5, 1)``.  Keeping the
    sign fixed lets class evidence survive pixel averaging; low contrast
    keeps the task easy on clean data while a small bright patch can still
    dominate the evidence, which is the regime where patch robustness matters.
    """
    H, W = resolution
    size = rng.uniform(0.78, 0.95)  # half-extent fraction; box covers > 50% of the image
    half_h, half_w = size * H / 2, size * W / 2
    cy = H / 2 + rng.uniform(-0.5, 0.5) * (H - 2 * half_h)
    cx = W / 2 + rng.uniform(-0.5, 0.5) * (W - 2 * half_w)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    mask = _shape_mask(kind, (xx - cx) / half_w, (yy - cy) / half_h)
    bg = rng.uniform(0.2, 0.6, size=3)
    d = rng.uniform(*contrast)
    fg = np.clip(bg + d * rng.uniform(0.5, 1.0, size=3), 0.0, 1.0)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, noise, size=(3, H, W))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_per_class: int, num_classes: int = 4, resolution=(32, 32), seed: int = 0) -> Dataset:
    """Balanced shapes dataset; class c renders ``SHAPES[c]``."""
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}], got {num_classes}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    resolution = tuple(int(v) for v in resolution)
    n = n_per_class * num_classes
    labels = np.tile(np.arange(num_classes), n_per_class)
    images = np.stack([render_shape(SHAPES[c], resolution, rng) for c in labels])
    ds = Dataset(
        images,
        labels,
        num_classes,
        list(SHAPES[:num_classes]),
        {
            "source": "synthetic",
            "n_per_class": n_per_class,
            "num_classes": num_classes,
            "resolution": list(resolution),
            "seed": seed,
            "size": n,
        },
    )
    ds.validate()
    return ds


def export_folder(ds: Dataset, root) -> None:
    """Write a dataset in the class-folder layout as PPM files."""
    root = Path(root)
    for c in range(ds.num_classes):
        (root / ds.class_name(c)).mkdir(parents=True, exist_ok=True)
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        write_ppm(img, root / ds.class_name(int(y)) / f"{i:05d}.ppm")
