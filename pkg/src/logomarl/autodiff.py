"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every operation eagerly as it is evaluated. Leaves are
either named parameters (looked up in a parameter store and flagged trainable)
or bound inputs. Calling :meth:`Tape.backward` walks the recorded nodes in
exact reverse order and returns one gradient array per trainable parameter.

:class:`TapeGraph` wraps a builder callable ``fn(tape, bindings) -> Node`` so
the same computation can be re-run with new bindings or perturbed parameters,
which is what the finite-difference checker and the trainers need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("id", "op", "inputs", "value", "backward_fn", "needs_grad", "name")

    def __init__(self, id, op, inputs, value, backward_fn=None, needs_grad=False, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.id} {self.op}{label} shape={self.value.shape})"


class Tape:
    """Eager operation recorder.

    ``params`` maps names to arrays; ``trainable`` restricts which of them get
    gradients (default: all). With ``record=False`` nothing is stored and
    the tape acts as a plain evaluator. ``stop_values`` replays the outputs of
    earlier ``stop_gradient`` calls in order (used to differentiate the
    surrogate numerically); the tape always records them in ``stopped``.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None,
                 trainable: Iterable[str] | None = None, record: bool = True,
                 check_finite: bool = True, stop_values: list[np.ndarray] | None = None):
        self.params = params if params is not None else {}
        self.stop_values = stop_values
        self.stopped: list[np.ndarray] = []
        self.trainable = None if trainable is None else set(trainable)
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}
        self._next_id = 0

    # ------------------------------------------------------------------ leaves
    def _add(self, op, inputs, value, backward_fn=None, name=None):
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"non-finite value produced by node #{self._next_id} ({op}"
                + (f" {name!r}" if name else "") + ")")
        needs = backward_fn is not None and any(x.needs_grad for x in inputs)
        node = Node(self._next_id, op, inputs, value, backward_fn if needs else None, needs, name)
        self._next_id += 1
        if self.record:
            self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        node = self._leaves.get(name)
        if node is not None:
            return node
        if name not in self.params:
            raise KeyError(f"unbound parameter {name!r}")
        value = self.params[name]
        trainable = self.record and (self.trainable is None or name in self.trainable)
        node = self._add("param", (), value, name=name)
        node.needs_grad = trainable
        self._leaves[name] = node
        return node

    def input(self, value, name: str | None = None) -> Node:
        return self._add("input", (), np.asarray(value), name=name)

    def const(self, value) -> Node:
        return self._add("const", (), np.asarray(value))

    # ---------------------------------------------------------------- ops
    def affine(self, x: Node, W: Node, b: Node) -> Node:
        xv, Wv, bv = x.value, W.value, b.value
        if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0] or bv.shape != (Wv.shape[1],):
            raise ShapeError(
                f"affine at node #{self._next_id} ({W.name or 'W'}): x{xv.shape} @ W{Wv.shape} + b{bv.shape}")
        out = xv @ Wv + bv

        def back(g):
            return (g @ Wv.T if x.needs_grad else None,
                    xv.T @ g if W.needs_grad else None,
                    g.sum(axis=0) if b.needs_grad else None)
        return self._add("affine", (x, W, b), out, back, name=W.name)

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        return self._add("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._add("relu", (x,), x.value * mask, lambda g: (g * mask,))

    def exp(self, x: Node) -> Node:
        y = np.exp(x.value)
        return self._add("exp", (x,), y, lambda g: (g * y,))

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape("add", a, b)
        return self._add("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape("sub", a, b)
        return self._add("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._add("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._add("scale", (x,), x.value * np.asarray(c, dtype=x.value.dtype), lambda g: (g * c,))

    def stop_gradient(self, x: Node) -> Node:
        value = x.value
        if self.stop_values is not None:
            value = self.stop_values[len(self.stopped)]
            if value.shape != x.value.shape:
                raise ShapeError(f"replayed stop_gradient value has shape {value.shape}, expected {x.value.shape}")
        self.stopped.append(value)
        return self._add("stop_gradient", (x,), value)

    def concat(self, xs: list[Node]) -> Node:
        vals = [x.value for x in xs]
        lead = {v.shape[:-1] for v in vals}
        if len(lead) != 1:
            raise ShapeError(f"concat at node #{self._next_id}: shapes {[v.shape for v in vals]}")
        sizes = np.cumsum([v.shape[-1] for v in vals])[:-1]

        def back(g):
            return tuple(np.split(g, sizes, axis=-1))
        return self._add("concat", tuple(xs), np.concatenate(vals, axis=-1), back)

    def slice(self, x: Node, start: int, stop: int) -> Node:
        width = x.value.shape[-1]
        if not 0 <= start < stop <= width:
            raise ShapeError(f"slice at node #{self._next_id}: [{start}:{stop}] of width {width}")
        xv = x.value

        def back(g):
            full = np.zeros_like(xv)
            full[..., start:stop] = g
            return (full,)
        return self._add("slice", (x,), xv[..., start:stop], back)

    def sum(self, x: Node, axis: int | None = None) -> Node:
        xv = x.value
        if axis is None:
            return self._add("sum", (x,), np.asarray(xv.sum(), dtype=xv.dtype),
                             lambda g: (np.broadcast_to(g, xv.shape).copy(),))
        return self._add("sum", (x,), xv.sum(axis=axis),
                         lambda g: (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),))

    def mean(self, x: Node, axis: int | None = None) -> Node:
        xv = x.value
        n = xv.size if axis is None else xv.shape[axis]
        if axis is None:
            return self._add("mean", (x,), np.asarray(xv.mean(), dtype=xv.dtype),
                             lambda g: (np.broadcast_to(g / n, xv.shape).copy(),))
        return self._add("mean", (x,), xv.mean(axis=axis),
                         lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), xv.shape).copy(),))

    def sqnorm(self, x: Node) -> Node:
        """Squared L2 norm along the last axis."""
        xv = x.value
        return self._add("sqnorm", (x,), (xv * xv).sum(axis=-1),
                         lambda g: (2.0 * xv * g[..., None],))

    def gaussian_nll(self, target: Node, mean: Node, log_std: Node) -> Node:
        """Per-row negative log-density of a diagonal Gaussian (summed over dims)."""
        self._same_shape("gaussian_nll", target, mean)
        self._same_shape("gaussian_nll", mean, log_std)
        inv_var = np.exp(-2.0 * log_std.value)
        diff = target.value - mean.value
        z2 = diff * diff * inv_var
        d = target.value.shape[-1]
        out = 0.5 * z2.sum(axis=-1) + log_std.value.sum(axis=-1) + 0.5 * d * LOG_2PI
        out = out.astype(target.value.dtype, copy=False)

        def back(g):
            g = g[..., None]
            g_t = g * diff * inv_var
            return (g_t, -g_t, g * (1.0 - z2))
        return self._add("gaussian_nll", (target, mean, log_std), out, back)

    def softmax(self, x: Node) -> Node:
        z = x.value - x.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        return self._add("softmax", (x,), y, back)

    def clip(self, x: Node, lo: float, hi: float) -> Node:
        xv = x.value
        mask = (xv >= lo) & (xv <= hi)
        return self._add("clip", (x,), np.clip(xv, lo, hi), lambda g: (g * mask,))

    def _same_shape(self, op, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"{op} at node #{self._next_id}: {a.value.shape} vs {b.value.shape}")

    # ---------------------------------------------------------------- backward
    def backward(self, out: Node) -> dict[str, np.ndarray]:
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if out.value.size != 1:
            raise ShapeError(f"backward needs a scalar terminal node, got shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
        result: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes[: out.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.needs_grad:
                continue
            if node.op == "param":
                result[node.name] = g
                continue
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.needs_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
        for name, leaf in self._leaves.items():
            if leaf.needs_grad and name not in result:
                result[name] = np.zeros_like(leaf.value)
        return result


class TapeGraph:
    """A re-runnable scalar computation over a named parameter store."""

    def __init__(self, fn: Callable[[Tape, Mapping], Node], params: dict[str, np.ndarray],
                 trainable: Iterable[str] | None = None):
        self.fn = fn
        self.params = params
        self.trainable = None if trainable is None else list(trainable)
        self.tape: Tape | None = None
        self.output: Node | None = None

    def forward(self, bindings: Mapping | None = None, params: dict | None = None,
                stop_values: list[np.ndarray] | None = None) -> np.ndarray:
        self.tape = Tape(self.params if params is None else params, self.trainable, stop_values=stop_values)
        self.output = self.fn(self.tape, bindings if bindings is not None else {})
        return self.output.value

    def backward(self) -> dict[str, np.ndarray]:
        if self.tape is None:
            raise RuntimeError("forward must run before backward")
        return self.tape.backward(self.output)


def _cast(obj, dtype):
    if isinstance(obj, np.ndarray):
        return obj.astype(dtype) if np.issubdtype(obj.dtype, np.floating) else obj
    if isinstance(obj, Mapping):
        return {k: _cast(v, dtype) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_cast(v, dtype) for v in obj)
    return obj


def finite_diff_check(graph: TapeGraph, bindings: Mapping | None = None, h: float = 1e-4,
                      coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central differences.

    Runs in float64. ``coords_per_param`` limits the check to a random subset
    of coordinates of each trainable tensor (``None`` checks every coordinate).
    Values behind ``stop_gradient`` are held at their unperturbed values, so
    the numeric side differentiates the same surrogate as backward().
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    params64 = {k: v.astype(np.float64) for k, v in graph.params.items()}
    bind64 = _cast(dict(bindings or {}), np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)

    graph.forward(bind64, params64)
    if np.asarray(graph.output.value).size != 1:
        raise ShapeError("finite_diff_check needs a scalar output")
    analytic = graph.backward()
    frozen = list(graph.tape.stopped)

    worst = 0.0
    for name in sorted(analytic):
        p = params64[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.choice(flat.size, coords_per_param, replace=False)
        ga = analytic[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(graph.forward(bind64, params64, frozen))
            flat[k] = orig - h
            fm = float(graph.forward(bind64, params64, frozen))
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(float(ga[k]) - numeric) / max(1.0, abs(numeric))
            if not math.isfinite(err):
                raise NonFiniteError(f"non-finite comparison at {name}[{k}]")
            worst = max(worst, err)
    return worst


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             names: Iterable[str] | None = None) -> None:
        """In-place bias-corrected Adam update of ``params[name]`` for each name."""
        names = list(grads) if names is None else list(names)
        missing = [n for n in names if n not in grads]
        if missing:
            raise KeyError(f"missing gradients for {missing}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in names:
            g = grads[name]
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype, copy=False)

    def state_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.asarray(self.step_count, dtype=np.float32)}
        for name in sorted(self.m):
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out
