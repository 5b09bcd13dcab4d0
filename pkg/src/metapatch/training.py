"""Meta adversarial training and the baselines it degenerates to.

``standard`` trains on clean batches.  ``AT`` draws a fresh random patch and
step size per sample and runs untargeted I-FGSM.  ``UAT`` keeps one patch
(P=1, K=1, sigma=1, fixed step size).  ``MAT`` selects meta-patches with
worst-of-F, adapts them with targeted I-FGSM and moves them by REPTILE.

Cost per outer step and sample: ``(K + 1)`` forward/backward pairs, plus
``F`` forwards when F > 1 (see :class:`~metapatch.model.CostCounters`).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, ifgsm, transfer_attack
from .evaluation import accuracy_under
from .meta import MetaSet, init_meta_set, sample_step_sizes, select
from .model import Architecture, Classifier, CostCounters, ModelParams, build_model
from .perturbation import PerturbationSpec, apply_batch, random_perturbation, sample_offsets

METHODS = ("standard", "AT", "UAT", "MAT")

_DEFAULTS = {
    "standard": dict(K=0, P=0, F=1, sigma=0.0, init_mode="random", alpha=None, targeted=False),
    "AT": dict(K=5, P=0, F=1, sigma=0.0, init_mode="random", alpha=None, targeted=False),
    "UAT": dict(K=1, P=1, F=1, sigma=1.0, init_mode="random", alpha=0.01, targeted=False),
    "MAT": dict(K=5, P=64, F=5, sigma=0.25, init_mode="data", alpha=None, targeted=True),
}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "MAT"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.033
    momentum: float = 0.9
    weight_decay: float = 1e-4
    sigma: float = 0.25
    K: int = 5
    P: int = 64
    F: int = 5
    init_mode: str = "data"
    alpha: float | None = None  # None: log-uniform per entry (MAT) or per sample (AT)
    targeted: bool = True
    transfer: AttackConfig | None = None
    transfer_restart_every: int = 5

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        return cls(method=method, **{**_DEFAULTS[method], **overrides})

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")
        if self.F < 1:
            raise ValueError("F must be >= 1")
        if self.init_mode not in ("random", "data"):
            raise ValueError("init_mode must be 'random' or 'data'")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        m = self.method
        if m == "standard" and self.K != 0:
            raise ValueError("standard training runs no attack: K must be 0")
        if m == "AT" and (self.sigma != 0 or self.K < 1):
            raise ValueError("AT requires sigma = 0 and K >= 1")
        if m == "UAT" and (self.P != 1 or self.K != 1 or self.sigma != 1 or self.alpha is None):
            raise ValueError("UAT requires P = 1, K = 1, sigma = 1 and a fixed alpha")
        if m == "MAT" and (self.P < 1 or self.K < 1 or not 0 < self.sigma <= 1):
            raise ValueError("MAT requires P >= 1, K >= 1 and 0 < sigma <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer"] = self.transfer.to_dict() if self.transfer else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("transfer") is not None:
            d["transfer"] = AttackConfig.from_dict(d["transfer"])
        return cls(**d)


class SGD:
    """Momentum SGD with cosine learning-rate decay and decay on kernel weights."""

    def __init__(self, params: ModelParams, lr: float, momentum: float, weight_decay: float, total_steps: int):
        self.params = params
        self.lr0, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.total_steps = max(total_steps, 1)
        self.t = 0
        self.velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    @property
    def lr(self) -> float:
        return 0.5 * self.lr0 * (1.0 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))

    def step(self, grads: dict) -> None:
        lr = np.float32(self.lr)
        mu = np.float32(self.momentum)
        for name, p in self.params.tensors.items():
            g = grads[name]
            if name.endswith("kernel") and self.weight_decay:
                g = g + np.float32(self.weight_decay) * p
            v = self.velocity[name]
            v *= mu
            v += g
            p -= lr * v  # in place: every Classifier bound to these params sees the update
        self.t += 1


def mat_step(model: Classifier, opt: SGD, x, y, meta: MetaSet | None, config: TrainConfig,
             spec: PerturbationSpec, rng: np.random.Generator) -> dict:
    """One outer step on a batch; returns metrics including pass-count deltas."""
    start = model.counters.snapshot()
    n = len(x)
    if config.method == "standard":
        loss, grads = model.param_gradient(x, y)
        opt.step(grads)
        used = model.counters - start
        return {"adv_loss": None, "clean_loss": loss, "n_fp": used.n_fp, "n_bp": used.n_bp, "entries": 0}
    idx = None
    if config.method == "AT":
        xi0 = random_perturbation(spec, rng, n)
        offsets = sample_offsets(spec, rng, n)
        alphas = np.full(n, config.alpha) if config.alpha is not None else sample_step_sizes(rng, n)
        labels = y
    else:
        idx, offsets = select(meta, x, y, model, config.F, rng)
        xi0 = meta.patches(idx)
        alphas = meta.step_sizes[idx]
        labels = meta.targets[idx] if config.targeted else y
    finals = ifgsm(xi0, x, labels, model, alphas, offsets, config.K, spec, targeted=config.targeted)
    loss, grads = model.param_gradient(apply_batch(x, finals, offsets, spec), y)
    opt.step(grads)
    touched = 0
    if idx is not None and config.sigma > 0:
        # one REPTILE update per entry, averaging all of its adapted patches in this batch
        for entry in np.unique(idx):
            meta.update(int(entry), list(finals[idx == entry]), config.sigma)
            touched += 1
    used = model.counters - start
    return {"adv_loss": loss, "clean_loss": None, "n_fp": used.n_fp, "n_bp": used.n_bp, "entries": touched}


def accuracy(model, x, y, batch_size: int = 256) -> float:
    hits = 0
    for s in range(0, len(x), batch_size):
        hits += int((model.predict(x[s:s + batch_size]) == y[s:s + batch_size]).sum())
    return hits / max(len(x), 1)


def train(dataset, config: TrainConfig, spec: PerturbationSpec, seed: int, arch: Architecture | None = None,
          eval_data=None, on_epoch=None):
    """Run ``config.epochs`` epochs; returns (params, meta-set or None, history).

    All training randomness comes from one stream seeded by ``seed``; the
    optional transfer attack uses its own stream so enabling it does not
    change the trained model.  ``on_epoch(epoch, params, meta, record)`` is
    called after every epoch.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    if tuple(dataset.image_shape) != tuple(spec.image_shape):
        raise ValueError(f"dataset images {dataset.image_shape} do not match threat model {spec.image_shape}")
    arch = arch or Architecture(num_classes=dataset.num_classes, input_shape=dataset.image_shape)
    rng = np.random.default_rng(seed)
    params = build_model(arch, seed)
    model = Classifier(params)
    monitor = Classifier(params)  # evaluation passes stay out of the training counters
    meta = None
    if config.method in ("UAT", "MAT") or (config.method == "AT" and config.P > 0):
        meta = init_meta_set(config.P, dataset, config.init_mode, spec, rng)
        if config.alpha is not None:
            for e in meta.entries:
                e.step_size = float(config.alpha)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    opt = SGD(params, config.lr, config.momentum, config.weight_decay, steps_per_epoch * config.epochs)
    transfer_rng = np.random.default_rng([seed, 1])
    pool: list = []
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), config.batch_size):
            b = order[s:s + config.batch_size]
            m = mat_step(model, opt, dataset.images[b], dataset.labels[b], meta, config, spec, rng)
            losses.append(m["clean_loss"] if m["adv_loss"] is None else m["adv_loss"])
        record = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": float(np.mean(losses)),
            "n_fp": model.counters.n_fp,
            "n_bp": model.counters.n_bp,
        }
        if eval_data is not None:
            record["clean_accuracy"] = accuracy(monitor, eval_data.images, eval_data.labels)
        if config.transfer is not None:
            results = transfer_attack(pool, monitor, dataset, spec, config.transfer, epoch, transfer_rng,
                                      config.transfer_restart_every)
            attacks = []
            for r in results:
                if eval_data is not None:
                    r.accuracy = accuracy_under(monitor, eval_data, r.applied_patch, spec, seed=seed,
                                                key=f"transfer-{epoch}-{r.init_source}")
                attacks.append({"init_source": r.init_source, "accuracy": r.accuracy, "loss_final": r.loss_final})
            record["transfer"] = attacks
        history.append(record)
        if on_epoch is not None:
            on_epoch(epoch, params, meta, record)
    return params, meta, history


def write_history(history: list[dict], path) -> None:
    """JSON lines, one record per epoch."""
    with Path(path).open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

