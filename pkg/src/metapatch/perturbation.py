"""Threat models: pasted patches and additive L-inf perturbations.

A patch of shape (C, h, w) overwrites a window of the image whose top-left
corner sits at the centered position shifted by an integer offset (dy, dx).
Additive perturbations have the full image shape and are added then clipped
to [0, 1].  All functions return new arrays; inputs are never mutated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import write_ppm

PATCH_MAGIC = b"MPATCH\x00\x01"
_MODES = ("patch", "additive")


@dataclass(frozen=True)
class PerturbationSpec:
    """Feasible set S together with the placement distribution R."""

    mode: str
    image_shape: tuple[int, int, int]
    patch_size: tuple[int, int] = (0, 0)
    max_translation: tuple[int, int] = (0, 0)
    epsilon: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        object.__setattr__(self, "max_translation", tuple(int(v) for v in self.max_translation))
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        _, H, W = self.image_shape
        if self.mode == "patch":
            h, w = self.patch_size
            if not (0 < h <= H and 0 < w <= W):
                raise ValueError(f"patch {self.patch_size} does not fit image {(H, W)}")
            dy, dx = self.max_translation
            if dy < 0 or dx < 0:
                raise ValueError("max_translation must be non-negative")
            top, left = (H - h) // 2, (W - w) // 2
            if top - dy < 0 or top + dy + h > H or left - dx < 0 or left + dx + w > W:
                raise ValueError(
                    f"translation {self.max_translation} can move a {h}x{w} patch outside a {H}x{W} image"
                )
        elif not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @classmethod
    def patch(cls, image_shape, patch_size, max_translation=(0, 0)) -> "PerturbationSpec":
        return cls("patch", tuple(image_shape), tuple(patch_size), tuple(max_translation))

    @classmethod
    def additive(cls, image_shape, epsilon) -> "PerturbationSpec":
        return cls("additive", tuple(image_shape), epsilon=float(epsilon))

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of a perturbation tensor xi."""
        if self.mode == "patch":
            return (self.image_shape[0],) + self.patch_size
        return self.image_shape

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.mode == "patch" else (-self.epsilon, self.epsilon)

    @property
    def origin(self) -> tuple[int, int]:
        """Top-left corner of the centered (zero-offset) window."""
        _, H, W = self.image_shape
        return (H - self.patch_size[0]) // 2, (W - self.patch_size[1]) // 2

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "image_shape": list(self.image_shape),
            "patch_size": list(self.patch_size),
            "max_translation": list(self.max_translation),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(
            d["mode"],
            tuple(d["image_shape"]),
            tuple(d.get("patch_size", (0, 0))),
            tuple(d.get("max_translation", (0, 0))),
            float(d.get("epsilon", 0.0)),
        )


class Placement(NamedTuple):
    dy: int = 0
    dx: int = 0


def sample_randomness(spec: PerturbationSpec, rng: np.random.Generator) -> Placement:
    """Uniform integer offset in the translation box; (0, 0) in additive mode."""
    dy, dx = sample_offsets(spec, rng, 1)[0]
    return Placement(int(dy), int(dx))


def sample_offsets(spec: PerturbationSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` placements as an (n, 2) integer array."""
    if spec.mode == "additive":
        return np.zeros((n, 2), dtype=np.int64)
    dy, dx = spec.max_translation
    return np.stack(
        [rng.integers(-dy, dy + 1, size=n), rng.integers(-dx, dx + 1, size=n)], axis=1
    ).astype(np.int64)


def _windows(spec, offsets):
    top, left = spec.origin
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    h, w = spec.patch_size
    _, H, W = spec.image_shape
    ys, xs = top + offsets[:, 0], left + offsets[:, 1]
    if (ys < 0).any() or (xs < 0).any() or (ys + h > H).any() or (xs + w > W).any():
        raise ValueError("patch placement falls outside the image")
    return ys, xs


def apply(x, xi, r, spec: PerturbationSpec) -> np.ndarray:
    """Perturb one image (C, H, W) with ``xi`` at placement ``r``."""
    return apply_batch(np.asarray(x)[None], np.asarray(xi)[None], [tuple(r)], spec)[0]


def apply_batch(x, xi, offsets, spec: PerturbationSpec) -> np.ndarray:
    """Perturb a batch (N, C, H, W).

    ``xi`` is either one perturbation shared by the batch or one per sample;
    ``offsets`` is an (N, 2) array of placements.
    """
    x = np.asarray(x)
    xi = np.asarray(xi)
    if xi.shape == spec.shape:
        xi = np.broadcast_to(xi, (len(x),) + spec.shape)
    if xi.shape != (len(x),) + spec.shape:
        raise ValueError(f"perturbation shape {xi.shape[1:]} does not match {spec.shape}")
    if spec.mode == "additive":
        return np.clip(x + xi, 0.0, 1.0).astype(x.dtype)
    out = x.copy()
    ys, xs = _windows(spec, offsets)
    h, w = spec.patch_size
    for i in range(len(x)):
        out[i, :, ys[i]:ys[i] + h, xs[i]:xs[i] + w] = xi[i]
    return out


def perturbation_grad(grad_x, x, xi, offsets, spec: PerturbationSpec) -> np.ndarray:
    """Pull per-sample image gradients back to per-sample perturbation gradients.

    Patch mode: the gradient on the overwritten window.  Additive mode: the
    image gradient, zeroed where the clip to [0, 1] is active.
    """
    grad_x = np.asarray(grad_x)
    if spec.mode == "additive":
        z = np.asarray(x) + np.asarray(xi)
        return grad_x * ((z > 0.0) & (z < 1.0))
    ys, xs = _windows(spec, offsets)
    h, w = spec.patch_size
    out = np.empty((len(grad_x),) + spec.shape, dtype=grad_x.dtype)
    for i in range(len(grad_x)):
        out[i] = grad_x[i, :, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
    return out


def project(xi, spec: PerturbationSpec) -> np.ndarray:
    """Clip onto the feasible box. Accepts one tensor or a leading batch axis."""
    xi = np.asarray(xi)
    if xi.shape[-len(spec.shape):] != spec.shape:
        raise ValueError(f"expected trailing shape {spec.shape}, got {xi.shape}")
    lo, hi = spec.bounds
    return np.clip(xi, lo, hi)


def random_perturbation(spec: PerturbationSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draw from the feasible box, float32."""
    lo, hi = spec.bounds
    shape = spec.shape if n is None else (n,) + spec.shape
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


def resize_nearest(image, size) -> np.ndarray:
    """Center-crop (C, H, W) to the target aspect ratio, then nearest-neighbor resample."""
    image = np.asarray(image)
    _, H, W = image.shape
    h, w = size
    # largest centered crop with aspect h:w
    if H * w > W * h:
        ch, cw = (W * h) // w, W
    else:
        ch, cw = H, (H * w) // h
    ch, cw = max(ch, 1), max(cw, 1)
    top, left = (H - ch) // 2, (W - cw) // 2
    crop = image[:, top:top + ch, left:left + cw]
    rows = ((np.arange(h) + 0.5) * ch / h).astype(np.int64)
    cols = ((np.arange(w) + 0.5) * cw / w).astype(np.int64)
    return crop[:, rows][:, :, cols]


def from_datapoint(image, spec: PerturbationSpec) -> np.ndarray:
    """Turn a datapoint into a feasible perturbation (data initialization)."""
    if spec.mode == "patch":
        return project(resize_nearest(image, spec.patch_size), spec).astype(np.float32)
    # rescale intensities [0, 1] -> [-eps, eps]
    xi = spec.epsilon * (2.0 * np.asarray(image, dtype=np.float64) - 1.0)
    return project(xi, spec).astype(np.float32)


def save_patch(xi, spec: PerturbationSpec, path) -> None:
    """Binary layout: magic(8) | mode u8 | ndim u8 | dims u32 LE... | float32 LE payload."""
    xi = np.asarray(xi)
    if xi.shape != spec.shape:
        raise ValueError(f"patch shape {xi.shape} does not match {spec.shape}")
    header = PATCH_MAGIC + struct.pack("<BB", _MODES.index(spec.mode), xi.ndim)
    header += struct.pack(f"<{xi.ndim}I", *xi.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(xi, dtype="<f4").tobytes())


def load_patch(path) -> tuple[str, np.ndarray]:
    """Return (mode, values) from a file written by :func:`save_patch`."""
    raw = Path(path).read_bytes()
    if raw[:8] != PATCH_MAGIC:
        raise ValueError(f"{path}: not a patch file")
    mode, ndim = struct.unpack_from("<BB", raw, 8)
    if mode >= len(_MODES):
        raise ValueError(f"{path}: unknown mode byte {mode}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 10)
    offset = 10 + 4 * ndim
    values = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)
    return _MODES[mode], values


def export_ppm(xi, spec: PerturbationSpec, path) -> None:
    """Visual export; additive perturbations are mapped from [-eps, eps] to [0, 1]."""
    xi = np.asarray(xi, dtype=np.float64)
    if spec.mode == "additive":
        xi = (xi / spec.epsilon + 1.0) / 2.0
    write_ppm(xi, path)
