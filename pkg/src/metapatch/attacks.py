"""Universal attacks: I-FGSM inner maximization and the S-PGD evaluation suite.

Every attack talks to the model through three methods, so stub models work
in tests:

* ``losses(x, y)`` -> per-sample cross-entropy (forward only)
* ``input_gradient(x, labels, targeted)`` -> (per-sample objective, d objective / d x)
* ``predict(x)`` -> class labels
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .perturbation import (
    PerturbationSpec,
    apply_batch,
    from_datapoint,
    perturbation_grad,
    project,
    random_perturbation,
    sample_offsets,
)

FAMILIES = ("RI", "DI", "LF", "Tr")


@dataclass(frozen=True)
class AttackConfig:
    init: str = "random"
    steps: int = 500
    step_size: float = 0.01
    momentum: float = 0.0
    total_decay: float = 0.01
    cutoff: float | None = None
    batch_size: int = 32
    target: int | None = None  # None: untargeted
    data_candidates: int = 16

    def __post_init__(self):
        if self.init not in ("random", "data"):
            raise ValueError(f"init must be 'random' or 'data', got {self.init!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.total_decay <= 1:
            raise ValueError("total_decay must lie in (0, 1]")
        if self.cutoff is not None and self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")
        if self.batch_size < 1 or self.data_candidates < 1:
            raise ValueError("batch_size and data_candidates must be >= 1")

    @property
    def family(self) -> str:
        if self.cutoff is not None:
            return "LF"
        return "DI" if self.init == "data" else "RI"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)

    @property
    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class AttackResult:
    config: AttackConfig
    patch: np.ndarray
    trajectory: list[float]
    init_source: str = "random"
    accuracy: float | None = None
    epoch: int | None = None
    spec: PerturbationSpec | None = field(default=None, repr=False)

    @property
    def applied_patch(self) -> np.ndarray:
        """The perturbation actually pasted onto images (low-passed for LF configs)."""
        if self.config.cutoff is None:
            return self.patch
        return low_pass(self.patch, self.config.cutoff, self.spec)

    @property
    def loss_final(self) -> float:
        return self.trajectory[-1]

    def to_dict(self) -> dict:
        return {
            "config_id": self.config.config_id,
            "config": self.config.to_dict(),
            "trajectory": [float(v) for v in self.trajectory],
            "init_source": self.init_source,
            "accuracy": self.accuracy,
            "epoch": self.epoch,
            "loss_final": float(self.loss_final),
        }


# -- inner maximization -------------------------------------------------------


def ifgsm(patch, x, labels, model, step_size, offsets, K: int, spec: PerturbationSpec, targeted: bool = False):
    """K projected sign-gradient ascent steps on one fixed (x, labels, offsets) sample.

    Works on a single perturbation (``patch.shape == spec.shape``, ``x`` one
    image) or on a batch with one perturbation, label, step size and offset
    per sample.  ``targeted`` makes ``labels`` target classes.
    """
    patch = np.asarray(patch)
    single = patch.shape == spec.shape
    if single:
        patch, x = patch[None], np.asarray(x)[None]
        labels = np.atleast_1d(labels)
        offsets = np.asarray(offsets).reshape(1, 2)
    xi = patch.copy()
    alpha = np.asarray(step_size, dtype=np.float64).reshape(-1, *([1] * len(spec.shape)))
    for _ in range(K):
        adv = apply_batch(x, xi, offsets, spec)
        _, gx = model.input_gradient(adv, labels, targeted)
        g = perturbation_grad(gx, x, xi, offsets, spec)
        xi = project(xi + alpha * np.sign(g), spec).astype(patch.dtype)
    return xi[0] if single else xi


# -- estimates and filters ----------------------------------------------------


def estimate_rho(model, xi, x, y, offsets, spec: PerturbationSpec, cutoff=None) -> float:
    """Mean loss of one shared perturbation over the samples (x_i, y_i, r_i)."""
    x = np.asarray(x)
    if len(x) == 0:
        raise ValueError("estimate_rho needs at least one sample")
    applied = xi if cutoff is None else low_pass(xi, cutoff, spec)
    return float(np.mean(model.losses(apply_batch(x, applied, offsets, spec), y)))


def radial_mask(h: int, w: int, cutoff: float) -> np.ndarray:
    """Binary mask in fftshift layout keeping bins within ``cutoff`` of zero frequency."""
    fy = np.arange(h) - h // 2
    fx = np.arange(w) - w // 2
    return np.hypot(fy[:, None], fx[None, :]) <= cutoff


def low_pass_linear(xi, cutoff: float) -> np.ndarray:
    """Per-channel radial frequency mask, without projection.

    The mask is symmetric under frequency negation, so the operator is real,
    self-adjoint and idempotent; it doubles as its own gradient map.
    """
    xi = np.asarray(xi)
    h, w = xi.shape[-2:]
    spectrum = np.fft.fftshift(np.fft.fft2(xi, axes=(-2, -1)), axes=(-2, -1))
    spectrum *= radial_mask(h, w, cutoff)
    out = np.fft.ifft2(np.fft.ifftshift(spectrum, axes=(-2, -1)), axes=(-2, -1))
    return out.real.astype(xi.dtype)


def low_pass(xi, cutoff: float, spec: PerturbationSpec) -> np.ndarray:
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    return project(low_pass_linear(xi, cutoff), spec).astype(np.asarray(xi).dtype)


def step_sizes(config: AttackConfig) -> np.ndarray:
    """Geometric schedule from step_size down to step_size * total_decay."""
    if config.steps == 0:
        return np.zeros(0)
    if config.steps == 1:
        return np.array([config.step_size])
    k = np.arange(config.steps)
    return config.step_size * config.total_decay ** (k / (config.steps - 1))


# -- S-PGD and friends --------------------------------------------------------


def _draw(dataset, spec, rng, n):
    idx = rng.integers(len(dataset), size=n)
    return dataset.images[idx], dataset.labels[idx], sample_offsets(spec, rng, n)


def data_init(model, dataset, spec: PerturbationSpec, n_candidates: int, probe, rng: np.random.Generator):
    """Convert ``n_candidates`` random datapoints into perturbations and keep the strongest.

    ``probe`` is an (x, y, offsets) triple used for the estimate; returns
    (patch, estimate or None when only one candidate was drawn).
    """
    if len(dataset) == 0:
        raise ValueError("data initialization needs a non-empty dataset")
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    picks = rng.integers(len(dataset), size=n_candidates)
    candidates = [from_datapoint(dataset.images[i], spec) for i in picks]
    if n_candidates == 1:
        return candidates[0], None
    x, y, off = probe
    scores = [estimate_rho(model, c, x, y, off, spec) for c in candidates]
    best = int(np.argmax(scores))
    return candidates[best], scores[best]


def spgd(model, dataset, spec: PerturbationSpec, config: AttackConfig, rng: np.random.Generator, init=None) -> AttackResult:
    """Stochastic PGD on the mean loss, with a fresh batch and placements every step.

    ``init`` overrides the configured initialization (used by the transfer
    attack).  The trajectory holds the batch estimate before each step plus
    a final estimate on one more fresh batch, so it has ``steps + 1`` entries.
    """
    B = config.batch_size
    targeted = config.target is not None
    source = "given"
    if init is not None:
        xi = project(np.asarray(init, dtype=np.float32), spec)
    elif config.init == "data":
        xi, _ = data_init(model, dataset, spec, config.data_candidates, _draw(dataset, spec, rng, B), rng)
        source = "data"
    else:
        xi = random_perturbation(spec, rng)
        source = "random"
    lo, hi = spec.bounds
    momentum = np.zeros(spec.shape, dtype=np.float64)
    trajectory = []
    for alpha in step_sizes(config):
        x, y, off = _draw(dataset, spec, rng, B)
        labels = np.full(B, config.target) if targeted else y
        if config.cutoff is None:
            z = applied = xi
        else:
            z = low_pass_linear(xi, config.cutoff)
            applied = project(z, spec).astype(np.float32)
        shared = np.broadcast_to(applied, (B,) + spec.shape)
        obj, gx = model.input_gradient(apply_batch(x, shared, off, spec), labels, targeted)
        g = perturbation_grad(gx, x, shared, off, spec).sum(axis=0)
        if config.cutoff is not None:
            g = low_pass_linear(g * ((z > lo) & (z < hi)), config.cutoff)
        trajectory.append(float(np.mean(obj)))
        momentum = config.momentum * momentum + np.sign(g)
        xi = project(xi + alpha * momentum, spec).astype(np.float32)
    x, y, off = _draw(dataset, spec, rng, B)
    final = estimate_rho(model, xi, x, y, off, spec, config.cutoff)
    trajectory.append(-final if targeted else final)
    return AttackResult(config, xi, trajectory, init_source=source, spec=spec)


def transfer_attack(pool: list, model, dataset, spec: PerturbationSpec, config: AttackConfig, epoch: int,
                    rng: np.random.Generator, restart_every: int = 5) -> list[AttackResult]:
    """Per-epoch attack seeded from the strongest earlier patch; extra random restart every few epochs.

    The pool is extended in place with every final patch.
    """
    results = []
    if pool:
        x, y, off = _draw(dataset, spec, rng, config.batch_size)
        scores = [estimate_rho(model, p, x, y, off, spec, config.cutoff) for p in pool]
        seed_patch = pool[int(np.argmax(scores))]
        res = spgd(model, dataset, spec, config, rng, init=seed_patch)
        res.init_source = "pool"
    else:
        res = spgd(model, dataset, spec, replace(config, init="random"), rng)
        res.init_source = "empty-pool"
    res.epoch = epoch
    results.append(res)
    if restart_every and epoch % restart_every == 0:
        restart = spgd(model, dataset, spec, replace(config, init="random"), rng)
        restart.init_source = "restart"
        restart.epoch = epoch
        results.append(restart)
    pool.extend(r.patch for r in results)
    return results
