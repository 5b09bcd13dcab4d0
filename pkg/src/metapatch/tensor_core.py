"""Static-graph reverse-mode differentiation over numpy arrays.

A :class:`Graph` is an ordered list of primitive nodes built once per model.
Values (inputs and parameters) are bound by name at :meth:`Graph.forward`
time, so the same graph can be evaluated with different parameter sets.
Image tensors flow through the graph channels-last (N, H, W, C).

Convolution and dense products run in the storage dtype of the graph.
Group-norm statistics are per-channel BLAS sums in the storage dtype,
combined per group in float64; weight-standardization moments and softmax
are computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray


class GraphError(ValueError):
    """Raised for malformed graphs, unbound inputs and shape mismatches."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    name: str
    attrs: dict = field(default_factory=dict)


# -- primitive kernels --------------------------------------------------------
# Each forward returns (value, saved); each backward maps the upstream
# gradient to one gradient per input (None for non-differentiable inputs).


def _conv2d_forward(x, w, need_cols):
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("SAME padding requires odd kernel sizes")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, kh * kw * c)
    out = (cols @ w.reshape(kh * kw * c, cout)).reshape(n, h, wd, cout)
    return out, (xp, cols if need_cols else None)


def _conv2d_backward(g, x, w, saved, needs):
    xp, cols = saved
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    g2 = g.reshape(-1, cout)
    dx = dw = None
    if needs[1]:
        if cols is not None:
            dw = (cols.T @ g2).reshape(w.shape)
        else:
            dw = np.empty_like(w)
            for i in range(kh):
                for j in range(kw):
                    dw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, c).T @ g2
    if needs[0]:
        # scatter one shifted product per kernel tap; cheaper than col2im here
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + h, j:j + wd, :] += (g2 @ w[i, j].T).reshape(n, h, wd, c)
        dx = dxp[:, ph:ph + h, pw:pw + wd, :]
    return dx, dw


def _moments(z, axes):
    """Mean and variance over ``axes`` in float64, keepdims."""
    mu = z.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((z - mu) ** 2).mean(axis=axes, keepdims=True, dtype=np.float64)
    return mu, var


def _normalize_backward(dzhat, zhat, inv_std, axes, count):
    s1 = dzhat.sum(axis=axes, keepdims=True, dtype=np.float64)
    s2 = (dzhat * zhat).sum(axis=axes, keepdims=True, dtype=np.float64)
    return inv_std * (dzhat - (s1 + zhat * s2) / count)


def _channel_sums(x3):
    """Sum (N, K, C) over K with a BLAS product; result in float64."""
    ones = np.ones(x3.shape[1], dtype=x3.dtype)
    return (ones @ x3).astype(np.float64)


def _group_sums(x3, groups):
    """Per-(sample, group) sums of (N, K, C), shape (N, 1, groups)."""
    n, _, c = x3.shape
    return _channel_sums(x3).reshape(n, 1, groups, c // groups).sum(axis=3)


def _expand(stat, c):
    """Broadcast a per-group statistic (N, 1, G) to per-channel (N, 1, C)."""
    n, _, groups = stat.shape
    return np.repeat(stat, c // groups, axis=2)


class Graph:
    """Fixed computation graph with cached activations.

    Nodes are appended by the builder methods, which return integer handles,
    so construction order is a valid topological order.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._values: list | None = None
        self._saved: list | None = None
        self._bound: dict[str, Tensor] | None = None
        self._output: int | None = None

    # -- construction --------------------------------------------------------
    def _add(self, op, inputs=(), name=None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: unknown input handle {i}")
        self.nodes.append(Node(op, tuple(inputs), name or f"{op}_{len(self.nodes)}", attrs))
        return len(self.nodes) - 1

    def input(self, name: str, differentiable: bool = True) -> int:
        return self._add("input", (), name, differentiable=differentiable)

    def param(self, name: str, shape) -> int:
        return self._add("param", (), name, shape=tuple(shape))

    def conv2d(self, x, w, name=None):
        return self._add("conv2d", (x, w), name)

    def dense(self, x, w, name=None):
        return self._add("dense", (x, w), name)

    def group_norm(self, x, gamma, beta, groups, eps=1e-5, name=None):
        return self._add("group_norm", (x, gamma, beta), name, groups=groups, eps=eps)

    def weight_standardize(self, w, eps=1e-10, name=None):
        return self._add("weight_standardize", (w,), name, eps=eps)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def avg_pool(self, x, size=None, name=None):
        """Average pooling; ``size=None`` pools globally to (N, C)."""
        return self._add("avg_pool", (x,), name, size=size)

    def softmax_cross_entropy(self, logits, labels, name=None):
        """Per-sample cross-entropy, shape (N,)."""
        return self._add("softmax_cross_entropy", (logits, labels), name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def scale(self, x, c: float, name=None):
        return self._add("scale", (x,), name, c=float(c))

    @property
    def param_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "param"]

    def handle(self, name: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise GraphError(f"no node named {name!r}")

    # -- evaluation ----------------------------------------------------------
    def forward(self, values: dict, output: int | None = None, keep_cols: bool = True) -> Tensor:
        """Evaluate the graph up to ``output`` (default: last node).

        ``values`` binds every input and param node by name.  Activations
        are cached for :meth:`backward`.  ``keep_cols=False`` skips caching
        the convolution unfoldings, which are only needed for kernel grads.
        """
        if not self.nodes:
            raise GraphError("empty graph")
        out = len(self.nodes) - 1 if output is None else output
        vals: list = [None] * (out + 1)
        saved: list = [None] * (out + 1)
        for idx in range(out + 1):
            node = self.nodes[idx]
            try:
                vals[idx], saved[idx] = self._eval(node, [vals[i] for i in node.inputs], values, keep_cols)
            except GraphError:
                raise
            except (ValueError, IndexError) as exc:
                raise GraphError(f"node {idx} ({node.op} {node.name!r}): {exc}") from exc
        result = vals[out]
        if np.issubdtype(result.dtype, np.floating) and not np.all(np.isfinite(result)):
            raise FloatingPointError(f"non-finite output at node {out} ({self.nodes[out].name!r})")
        self._values, self._saved, self._output, self._bound = vals, saved, out, values
        return result

    def value(self, handle: int) -> Tensor:
        if self._values is None or handle > self._output:
            raise GraphError("value requested before forward")
        return self._values[handle]

    def _eval(self, node, args, values, keep_cols):
        op = node.op
        if op in ("input", "param"):
            if node.name not in values:
                raise GraphError(f"{op} {node.name!r} is not bound")
            v = np.asarray(values[node.name])
            if op == "param":
                if v.shape != node.attrs["shape"]:
                    raise GraphError(f"param {node.name!r}: expected shape {node.attrs['shape']}, got {v.shape}")
                v = v.astype(self.dtype, copy=False)
            elif node.attrs["differentiable"]:
                v = v.astype(self.dtype, copy=False)
            return v, None
        if op == "conv2d":
            x, w = args
            if x.ndim != 4 or w.ndim != 4:
                raise ValueError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape} and {w.shape}")
            return _conv2d_forward(x, w, keep_cols)
        if op == "dense":
            x, w = args
            if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
                raise ValueError(f"dense shape mismatch {x.shape} @ {w.shape}")
            return x @ w, None
        if op == "group_norm":
            x, gamma, beta = args
            n, h, w, c = x.shape
            groups = min(node.attrs["groups"], c)
            if c % groups:
                raise ValueError(f"{c} channels not divisible into {groups} groups")
            if gamma.shape != (c,) or beta.shape != (c,):
                raise ValueError(f"scale/offset must have shape ({c},)")
            count = h * w * (c // groups)
            x3 = x.reshape(n, h * w, c)
            mu = _group_sums(x3, groups) / count
            d = x3 - _expand(mu, c).astype(x.dtype)
            var = _group_sums(d * d, groups) / count
            inv_std = 1.0 / np.sqrt(var + node.attrs["eps"])
            xhat = d * _expand(inv_std, c).astype(x.dtype)
            out = (xhat * gamma + beta).reshape(x.shape)
            return out, (xhat, inv_std, groups)
        if op == "weight_standardize":
            (w,) = args
            axes = tuple(range(w.ndim - 1))
            mu, var = _moments(w, axes)
            inv_std = 1.0 / np.sqrt(var + node.attrs["eps"])
            what = ((w - mu) * inv_std).astype(self.dtype)
            return what, (what, inv_std.astype(self.dtype))
        if op == "relu":
            (x,) = args
            mask = x > 0
            return np.maximum(x, 0), mask
        if op == "avg_pool":
            (x,) = args
            size = node.attrs["size"]
            if size is None:
                return x.mean(axis=(1, 2), dtype=np.float64).astype(self.dtype), x.shape
            n, h, w, c = x.shape
            if h % size or w % size:
                raise ValueError(f"spatial size {(h, w)} not divisible by pool size {size}")
            out = np.zeros((n, h // size, w // size, c), dtype=x.dtype)
            for i in range(size):
                for j in range(size):
                    out += x[:, i::size, j::size, :]
            return out * self.dtype.type(1.0 / (size * size)), x.shape
        if op == "softmax_cross_entropy":
            logits, labels = args
            labels = np.asarray(labels)
            if logits.ndim != 2 or labels.shape != (logits.shape[0],):
                raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
            if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
                raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
            z = logits.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            logsum = np.log(np.exp(z).sum(axis=1))
            rows = np.arange(len(labels))
            loss = logsum - z[rows, labels]
            probs = np.exp(z - logsum[:, None])
            return loss.astype(self.dtype), (probs, labels)
        if op == "add":
            a, b = args
            return a + b, (a.shape, b.shape)
        if op == "scale":
            (x,) = args
            return x * self.dtype.type(node.attrs["c"]), None
        raise GraphError(f"unknown op {op!r}")

    def backward(self, seed, inputs=(), param_grads: bool = True) -> dict[str, Tensor]:
        """Propagate ``seed`` (d objective / d output) back through the graph.

        Returns a dict of gradients keyed by node name: every parameter when
        ``param_grads`` is set, plus every input named in ``inputs``.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        out = self._output
        seed = np.asarray(seed, dtype=self.dtype)
        if seed.shape != self._values[out].shape:
            raise GraphError(f"seed shape {seed.shape} does not match output shape {self._values[out].shape}")
        wanted = set(inputs)
        for name in wanted:
            idx = self.handle(name)
            if self.nodes[idx].op != "input":
                raise GraphError(f"{name!r} is not an input node")
        # which nodes lie on a path to something we need a gradient for
        needed = [False] * (out + 1)
        for idx in range(out + 1):
            node = self.nodes[idx]
            if node.op == "param":
                needed[idx] = param_grads
            elif node.op == "input":
                needed[idx] = node.name in wanted
            else:
                needed[idx] = any(needed[i] for i in node.inputs)
        grads: list = [None] * (out + 1)
        grads[out] = seed
        self.visited = 0
        for idx in range(out, -1, -1):
            node, g = self.nodes[idx], grads[idx]
            if g is None or not needed[idx]:
                continue
            self.visited += 1
            if node.op in ("input", "param"):
                continue
            args = [self._values[i] for i in node.inputs]
            needs = [needed[i] for i in node.inputs]
            for i, gi in zip(node.inputs, self._grad(node, g, args, self._saved[idx], needs)):
                if gi is None or not needed[i]:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        result = {}
        for idx in range(out + 1):
            node = self.nodes[idx]
            if needed[idx] and node.op in ("input", "param"):
                g = grads[idx]
                if g is None:
                    g = np.zeros_like(self._values[idx], dtype=self.dtype)
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for {node.name!r}")
                result[node.name] = g
        return result

    def _grad(self, node, g, args, saved, needs):
        op = node.op
        if op == "conv2d":
            return _conv2d_backward(g, args[0], args[1], saved, needs)
        if op == "dense":
            x, w = args
            return (g @ w.T if needs[0] else None, x.T @ g if needs[1] else None)
        if op == "group_norm":
            x, gamma, _ = args
            xhat, inv_std, groups = saved
            n, h, w, c = x.shape
            g3 = g.reshape(n, h * w, c)
            dgamma = _channel_sums(g3 * xhat).sum(axis=0).astype(self.dtype)
            dbeta = _channel_sums(g3).sum(axis=0).astype(self.dtype)
            dx = None
            if needs[0]:
                count = h * w * (c // groups)
                dxhat = g3 * gamma
                s1 = _expand(_group_sums(dxhat, groups) / count, c).astype(x.dtype)
                s2 = _expand(_group_sums(dxhat * xhat, groups) / count, c).astype(x.dtype)
                dx = (dxhat - s1 - xhat * s2) * _expand(inv_std, c).astype(x.dtype)
                dx = dx.reshape(x.shape)
            return dx, dgamma, dbeta
        if op == "weight_standardize":
            (w,) = args
            what, inv_std = saved
            axes = tuple(range(w.ndim - 1))
            count = int(np.prod(w.shape[:-1]))
            return (_normalize_backward(g, what, inv_std, axes, count).astype(self.dtype),)
        if op == "relu":
            return (g * saved,)
        if op == "avg_pool":
            shape = saved
            size = node.attrs["size"]
            n, h, w, c = shape
            if size is None:
                dx = np.broadcast_to(g[:, None, None, :] / (h * w), shape)
                return (np.ascontiguousarray(dx, dtype=self.dtype),)
            dx = np.broadcast_to(
                (g / (size * size))[:, :, None, :, None, :],
                (n, h // size, size, w // size, size, c),
            )
            return (np.ascontiguousarray(dx, dtype=self.dtype).reshape(shape),)
        if op == "softmax_cross_entropy":
            probs, labels = saved
            d = probs.copy()
            d[np.arange(len(labels)), labels] -= 1.0
            return ((d * g[:, None]).astype(self.dtype), None)
        if op == "add":
            sa, sb = saved
            return _unbroadcast(g, sa), _unbroadcast(g, sb)
        if op == "scale":
            return (g * self.dtype.type(node.attrs["c"]),)
        raise GraphError(f"no gradient rule for {op!r}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g
