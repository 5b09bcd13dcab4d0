"""Desk-scale convolutional classifier.

Each stage is ``conv3x3 (weight-standardized) -> group norm -> relu``,
followed by 2x2 average pooling between stages and global average pooling
before a dense head.  Images enter as (N, C, H, W) in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import Graph

CHECKPOINT_FORMAT = "metapatch-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 4
    input_shape: tuple[int, int, int] = (3, 32, 32)
    groups: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.widths) < 2:
            raise ValueError("architecture needs at least 2 conv stages")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.widths) or self.groups < 1:
            raise ValueError("widths and groups must be positive")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        factor = 2 ** (len(self.widths) - 1)
        if self.input_shape[1] % factor or self.input_shape[2] % factor:
            raise ValueError(f"input resolution must be divisible by {factor}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        for w in self.widths:
            g = min(self.groups, w)
            if w % g:
                raise ValueError(f"width {w} is not divisible into {g} groups")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.input_shape[0]
        k = self.kernel_size
        for i, cout in enumerate(self.widths):
            shapes[f"conv{i}/kernel"] = (k, k, cin, cout)
            shapes[f"conv{i}/gn_scale"] = (cout,)
            shapes[f"conv{i}/gn_offset"] = (cout,)
            cin = cout
        shapes["head/kernel"] = (cin, self.num_classes)
        shapes["head/bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def build_graph(arch: Architecture, dtype=np.float32) -> tuple[Graph, int, int]:
    """Return (graph, logits handle, per-sample loss handle)."""
    g = Graph(dtype)
    h = g.input("x")
    last = len(arch.widths) - 1
    for i, _ in enumerate(arch.widths):
        w = g.weight_standardize(g.param(f"conv{i}/kernel", arch.param_shapes()[f"conv{i}/kernel"]))
        h = g.conv2d(h, w, name=f"conv{i}")
        c = arch.widths[i]
        h = g.group_norm(h, g.param(f"conv{i}/gn_scale", (c,)), g.param(f"conv{i}/gn_offset", (c,)), arch.groups)
        h = g.relu(h)
        h = g.avg_pool(h, None if i == last else 2)
    logits = g.add(
        g.dense(h, g.param("head/kernel", (arch.widths[-1], arch.num_classes))),
        g.param("head/bias", (arch.num_classes,)),
        name="logits",
    )
    labels = g.input("labels", differentiable=False)
    loss = g.softmax_cross_entropy(logits, labels, name="loss")
    return g, logits, loss


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if list(self.tensors) != list(shapes):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return h.hexdigest()


def param_count(arch: Architecture) -> int:
    return sum(int(np.prod(s)) for s in arch.param_shapes().values())


def build_model(arch: Architecture, seed: int) -> ModelParams:
    """He-normal conv kernels, unit group-norm scales, zero offsets and bias."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("kernel"):
            fan_in = int(np.prod(shape[:-1]))
            t = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("gn_scale"):
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(np.float32)
    return ModelParams(arch, tensors)


@dataclass
class CostCounters:
    """Forward/backward passes, counted per sample."""

    n_fp: int = 0
    n_bp: int = 0

    def snapshot(self) -> "CostCounters":
        return CostCounters(self.n_fp, self.n_bp)

    def __sub__(self, other: "CostCounters") -> "CostCounters":
        return CostCounters(self.n_fp - other.n_fp, self.n_bp - other.n_bp)


@dataclass
class Classifier:
    """A parameter set bound to its evaluation graph.

    All model passes go through this object so they are counted.  Inputs are
    (N, C, H, W) batches; objectives are per-sample and un-reduced.
    """

    params: ModelParams
    dtype: type = np.float32
    counters: CostCounters = field(default_factory=CostCounters)

    def __post_init__(self):
        self.graph, self._logits, self._loss = build_graph(self.params.arch, self.dtype)

    @property
    def num_classes(self) -> int:
        return self.params.arch.num_classes

    def _bind(self, x, labels=None):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.params.arch.input_shape:
            raise ValueError(f"expected batch of shape (N, {self.params.arch.input_shape}), got {x.shape}")
        values = dict(self.params.tensors)
        values["x"] = x.transpose(0, 2, 3, 1)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (len(x),):
                raise ValueError("one label per sample required")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
            values["labels"] = labels
        return values

    def logits(self, x) -> np.ndarray:
        out = self.graph.forward(self._bind(x), output=self._logits, keep_cols=False)
        self.counters.n_fp += len(x)
        return out

    def predict(self, x) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lower class index
        return np.argmax(self.logits(x), axis=1)

    def losses(self, x, labels) -> np.ndarray:
        """Per-sample cross-entropy (forward pass only)."""
        out = self.graph.forward(self._bind(x, labels), output=self._loss, keep_cols=False)
        self.counters.n_fp += len(x)
        return out.astype(np.float64)

    def input_gradient(self, x, labels, targeted: bool = False):
        """Per-sample attack objective and its gradient w.r.t. ``x``.

        Untargeted: the objective is the cross-entropy to ``labels``.
        Targeted: ``labels`` are target classes and the objective is the
        negated cross-entropy, so ascending it pulls predictions toward them.
        """
        loss = self.graph.forward(self._bind(x, labels), output=self._loss, keep_cols=False)
        sign = -1.0 if targeted else 1.0
        grads = self.graph.backward(np.full(loss.shape, sign), inputs=("x",), param_grads=False)
        self.counters.n_fp += len(x)
        self.counters.n_bp += len(x)
        return sign * loss.astype(np.float64), grads["x"].transpose(0, 3, 1, 2)

    def param_gradient(self, x, labels):
        """Mean cross-entropy of the batch and its gradient w.r.t. every parameter."""
        loss = self.graph.forward(self._bind(x, labels), output=self._loss)
        grads = self.graph.backward(np.full(loss.shape, 1.0 / len(loss)), param_grads=True)
        self.counters.n_fp += len(x)
        self.counters.n_bp += len(x)
        return float(loss.mean(dtype=np.float64)), grads

    def loss(self, x, labels, target=None, wrt=("input",)):
        """Mean loss plus gradients; ``target`` switches to targeted mode.

        Returns (mean objective, {"input": ..., "params": {...}}) restricted
        to the requested ``wrt`` entries.
        """
        targeted = target is not None
        y = np.asarray(target if targeted else labels)
        if y.ndim == 0:
            y = np.full(len(x), int(y))
        values = self._bind(x, y)
        loss = self.graph.forward(values, output=self._loss)
        sign = -1.0 if targeted else 1.0
        grads = self.graph.backward(
            np.full(loss.shape, sign / len(loss)),
            inputs=("x",) if "input" in wrt else (),
            param_grads="params" in wrt,
        )
        self.counters.n_fp += len(x)
        self.counters.n_bp += len(x)
        out = {}
        if "input" in wrt:
            out["input"] = grads.pop("x").transpose(0, 3, 1, 2)
        if "params" in wrt:
            out["params"] = grads
        return sign * float(loss.mean(dtype=np.float64)), out


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    manifest_path, payload_path = path.with_suffix(".json"), path.with_suffix(".bin")
    entries, offset, chunks = [], 0, []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "payload": payload_path.name,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    payload_path.write_bytes(payload)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_checkpoint(path) -> ModelParams:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format/version")
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{manifest_path}: payload checksum mismatch")
    arch_d = manifest["arch"]
    arch = Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in arch_d.items()})
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float32)
    return ModelParams(arch, tensors)
