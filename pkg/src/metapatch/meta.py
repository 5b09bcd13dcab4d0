"""Meta-patch collection: initialization, worst-of-F selection, REPTILE updates."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .perturbation import (
    PerturbationSpec,
    apply_batch,
    from_datapoint,
    project,
    random_perturbation,
    sample_offsets,
)

ALPHA_RANGE = (1e-4, 0.1)
METASET_FORMAT = "metapatch-metaset"
METASET_VERSION = 1


@dataclass
class MetaEntry:
    patch: np.ndarray
    target: int
    step_size: float


class MetaSet:
    """Fixed-size list of meta-patches, each with its own target class and I-FGSM step size."""

    def __init__(self, entries: list[MetaEntry], spec: PerturbationSpec):
        if not entries:
            raise ValueError("a meta-set needs at least one entry")
        self.entries = entries
        self.spec = spec

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i) -> MetaEntry:
        return self.entries[i]

    @property
    def targets(self) -> np.ndarray:
        return np.array([e.target for e in self.entries], dtype=np.int64)

    @property
    def step_sizes(self) -> np.ndarray:
        return np.array([e.step_size for e in self.entries], dtype=np.float64)

    def patches(self, idx) -> np.ndarray:
        return np.stack([self.entries[i].patch for i in idx])

    def copy(self) -> "MetaSet":
        return MetaSet([MetaEntry(e.patch.copy(), e.target, e.step_size) for e in self.entries], self.spec)

    def update(self, index: int, finals, sigma: float) -> None:
        e = self.entries[index]
        e.patch = reptile_update(e.patch, finals, sigma, self.spec)

    def save(self, path, extra: dict | None = None) -> Path:
        """``<path>.json`` manifest plus ``<path>.bin`` concatenated float32 patches."""
        path = Path(path)
        manifest_path, payload_path = path.with_suffix(".json"), path.with_suffix(".bin")
        payload = b"".join(np.ascontiguousarray(e.patch, dtype="<f4").tobytes() for e in self.entries)
        manifest = {
            "format": METASET_FORMAT,
            "version": METASET_VERSION,
            "P": len(self.entries),
            "spec": self.spec.to_dict(),
            "patch_shape": list(self.spec.shape),
            "targets": [int(e.target) for e in self.entries],
            # float.hex keeps the step sizes bit-exact through JSON
            "step_sizes": [float(e.step_size).hex() for e in self.entries],
            "payload": payload_path.name,
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        if extra:
            manifest["extra"] = extra
        payload_path.write_bytes(payload)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest_path

    @classmethod
    def load(cls, path) -> "MetaSet":
        manifest_path = Path(path).with_suffix(".json")
        m = json.loads(manifest_path.read_text())
        if m.get("format") != METASET_FORMAT or m.get("version") != METASET_VERSION:
            raise ValueError(f"{manifest_path}: unsupported meta-set format/version")
        payload = (manifest_path.parent / m["payload"]).read_bytes()
        if hashlib.sha256(payload).hexdigest() != m["sha256"]:
            raise ValueError(f"{manifest_path}: payload checksum mismatch")
        spec = PerturbationSpec.from_dict(m["spec"])
        patches = np.frombuffer(payload, dtype="<f4").reshape((m["P"],) + spec.shape)
        entries = [
            MetaEntry(patches[i].astype(np.float32), int(t), float.fromhex(a))
            for i, (t, a) in enumerate(zip(m["targets"], m["step_sizes"]))
        ]
        return cls(entries, spec)


def sample_step_sizes(rng: np.random.Generator, n: int | None = None, low=ALPHA_RANGE[0], high=ALPHA_RANGE[1]):
    """Log-uniform draws on [low, high]."""
    return np.exp(rng.uniform(np.log(low), np.log(high), size=n))


def init_meta_set(P: int, dataset, mode: str, spec: PerturbationSpec, rng: np.random.Generator) -> MetaSet:
    """Entry i (1-based) targets class ``i mod C``; random or data-initialized patch; log-uniform step size."""
    if P < 1:
        raise ValueError("P must be >= 1")
    if mode not in ("random", "data"):
        raise ValueError(f"init mode must be 'random' or 'data', got {mode!r}")
    C = dataset.num_classes
    entries = []
    for i in range(1, P + 1):
        target = i % C
        if mode == "random":
            patch = random_perturbation(spec, rng)
        else:
            pool = dataset.indices_of(target)
            if len(pool) == 0:
                raise ValueError(f"data initialization needs a datapoint of class {dataset.class_name(target)!r}")
            patch = from_datapoint(dataset.images[pool[rng.integers(len(pool))]], spec)
        alpha = float(sample_step_sizes(rng))
        entries.append(MetaEntry(patch, target, alpha))
    return MetaSet(entries, spec)


def select(meta: MetaSet, x, y, model, F: int, rng: np.random.Generator):
    """Pick (entry index, offset) per sample: uniform for F == 1, worst-of-F otherwise.

    ``x``/``y`` are a batch.  For every trial one entry index and one
    placement are drawn per sample (entry indices first, then offsets), and
    the candidate with the strictly largest untargeted loss wins, so ties go
    to the earliest trial.  F trials cost F forward passes per sample.
    Returns (indices (N,), offsets (N, 2)).
    """
    if F < 1:
        raise ValueError("F must be >= 1")
    x, y = np.asarray(x), np.asarray(y)
    n = len(x)
    best_idx = rng.integers(len(meta), size=n)
    best_off = sample_offsets(meta.spec, rng, n)
    if F == 1:
        return best_idx, best_off
    best_loss = model.losses(apply_batch(x, meta.patches(best_idx), best_off, meta.spec), y)
    for _ in range(F - 1):
        idx = rng.integers(len(meta), size=n)
        off = sample_offsets(meta.spec, rng, n)
        loss = model.losses(apply_batch(x, meta.patches(idx), off, meta.spec), y)
        better = loss > best_loss
        best_idx = np.where(better, idx, best_idx)
        best_off = np.where(better[:, None], off, best_off)
        best_loss = np.where(better, loss, best_loss)
    return best_idx, best_off


def reptile_update(patch, finals, sigma: float, spec: PerturbationSpec) -> np.ndarray:
    """(1 - sigma) * patch + sigma * mean(finals), projected onto the feasible set."""
    if not 0 <= sigma <= 1:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    finals = [np.asarray(f) for f in finals]
    if not finals:
        raise ValueError("reptile_update needs at least one adapted patch")
    patch = np.asarray(patch)
    for f in finals:
        if f.shape != patch.shape:
            raise ValueError(f"adapted patch shape {f.shape} differs from {patch.shape}")
    mean = finals[0] if len(finals) == 1 else np.mean(finals, axis=0)
    out = (1.0 - sigma) * patch + sigma * mean
    return project(out, spec).astype(patch.dtype)
