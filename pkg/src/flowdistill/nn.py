"""Small fp64 multilayer perceptrons with reverse-mode gradients.

The module provides exactly what the training losses here need and nothing
more: a tape of `Node` objects over numpy arrays, a fixed primitive set
(affine maps, a smooth activation, elementwise arithmetic, concatenation,
embedding lookup, reductions), a `stop_gradient`, and a `custom_op` hook so
externally computed functions with known vector-Jacobian products (the
analytic teacher) can sit inside a differentiated loss.  Gradients reach both
parameters and designated inputs, because distillation losses differentiate
through the corrupted sample into frozen networks.

Networks consume the state coordinates, sinusoidal features of logit(t)
(which is half the negative log signal-to-noise ratio, so the time embedding
is aligned across noise-schedule families), and optionally a learned class
embedding with a trailing null row for unconditional evaluation.  The output
head is zero-initialized, making step-0 behavior of anything built on top
analytically known.

Everything is fp64 and deterministic: same seed, same spec, same sequence of
calls, bit-identical results.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ConsistencyError
from .schedule import T_HI, T_LO

__all__ = [
    "Node",
    "lift",
    "add",
    "sub",
    "mul",
    "matmul",
    "silu",
    "softplus",
    "concat",
    "gather_rows",
    "sum_all",
    "mean_all",
    "sqsum",
    "stop_gradient",
    "custom_op",
    "gradients",
    "NetSpec",
    "layout",
    "param_count",
    "init_params",
    "param_views",
    "param_nodes",
    "time_features",
    "tape_forward",
    "forward",
    "grad",
    "AdamState",
    "adam_init",
    "adam_step",
    "finite_difference_check",
    "save_checkpoint",
    "load_checkpoint",
    "spec_hash",
]


# ---------------------------------------------------------------------------
# tape


class Node:
    """A value on the tape plus links to its inputs with their VJP closures."""

    __slots__ = ("value", "parents")

    def __init__(self, value, parents: Tuple = ()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, inputs={len(self.parents)})"


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ConsistencyError("matmul expects 2-D operands")
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
    )


def silu(x) -> Node:
    x = lift(x)
    s = expit(x.value)
    return Node(x.value * s, ((x, lambda g: g * s * (1.0 + x.value * (1.0 - s))),))


def softplus(x) -> Node:
    x = lift(x)
    return Node(np.logaddexp(0.0, x.value), ((x, lambda g: g * expit(x.value)),))


def concat(parts: Sequence, axis: int = 1) -> Node:
    nodes = [lift(p) for p in parts]
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(i):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple((n, make_vjp(i)) for i, n in enumerate(nodes)),
    )


def gather_rows(table, indices) -> Node:
    table = lift(table)
    idx = np.asarray(indices, dtype=int)

    def vjp(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return out

    return Node(table.value[idx], ((table, vjp),))


def sum_all(x) -> Node:
    x = lift(x)
    return Node(x.value.sum(), ((x, lambda g: np.broadcast_to(g, x.value.shape).copy()),))


def mean_all(x) -> Node:
    x = lift(x)
    size = x.value.size
    return Node(
        x.value.mean(),
        ((x, lambda g: np.broadcast_to(g / size, x.value.shape).copy()),),
    )


def sqsum(x) -> Node:
    x = lift(x)
    return Node(np.sum(x.value * x.value), ((x, lambda g: 2.0 * g * x.value),))


def stop_gradient(x) -> Node:
    x = lift(x)
    return Node(x.value, ())


def custom_op(x, value, vjp: Callable[[np.ndarray], np.ndarray]) -> Node:
    """A node whose forward value and VJP were computed externally."""
    x = lift(x)
    return Node(value, ((x, vjp),))


def gradients(loss: Node, wrt: Sequence[Node]) -> List[np.ndarray]:
    """Reverse-mode gradients of a scalar `loss` for each node in `wrt`.

    Nodes not connected to the loss get zero gradients.
    """
    if loss.value.size != 1:
        raise ConsistencyError(f"loss must be scalar, got shape {loss.value.shape}")

    topo: List[Node] = []
    seen = set()
    stack: List[Tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # a node is worth differentiating only if some wrt node sits in its input
    # cone; skipping the rest keeps frozen-network evaluations cheap
    wrt_ids = {id(n) for n in wrt}
    needed = set(wrt_ids)
    for node in topo:  # postorder: inputs come before consumers
        if id(node) in needed:
            continue
        if any(id(parent) in needed for parent, _ in node.parents):
            needed.add(id(node))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    captured: Dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wrt_ids:
            captured[id(node)] = g
        for parent, vjp in node.parents:
            if id(parent) not in needed:
                continue
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [captured.get(id(n), np.zeros_like(n.value)) for n in wrt]


# ---------------------------------------------------------------------------
# network spec, parameters, forward


@dataclass(frozen=True)
class NetSpec:
    """Architecture description for one MLP.

    `class_count` of 0 means unconditional; otherwise the embedding table has
    `class_count + 1` rows, the last being the null row used when no class is
    supplied.  `output_kind` is a caller-facing tag naming what the output
    means (a prediction kind, or "logit" for critics); it does not change the
    computation.  `output_dim` defaults to `input_dim`.
    """

    input_dim: int
    hidden: Tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_features: int = 8
    class_count: int = 0
    class_embed_dim: int = 16
    output_kind: str = "vfm"
    output_dim: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", self.input_dim)
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must all be >= 1")
        if self.activation != "silu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.time_features < 0 or self.class_count < 0:
            raise ConfigError("time_features and class_count must be >= 0")
        if self.class_count > 0 and self.class_embed_dim < 1:
            raise ConfigError("class_embed_dim must be >= 1 for conditional nets")

    @property
    def feature_dim(self) -> int:
        extra = self.class_embed_dim if self.class_count > 0 else 0
        return self.input_dim + 2 * self.time_features + extra


def layout(spec: NetSpec) -> Tuple[Tuple[str, Tuple[int, ...], int], ...]:
    """(name, shape, offset) for every parameter tensor, in storage order."""
    entries = []
    offset = 0

    def push(name, shape):
        nonlocal offset
        entries.append((name, shape, offset))
        offset += int(np.prod(shape))

    if spec.class_count > 0:
        push("class_embed", (spec.class_count + 1, spec.class_embed_dim))
    fan_in = spec.feature_dim
    for i, width in enumerate(spec.hidden):
        push(f"w{i}", (fan_in, width))
        push(f"b{i}", (width,))
        fan_in = width
    push("w_out", (fan_in, spec.output_dim))
    push("b_out", (spec.output_dim,))
    return tuple(entries)


def param_count(spec: NetSpec) -> int:
    name, shape, offset = layout(spec)[-1]
    return offset + int(np.prod(shape))


def param_views(spec: NetSpec, flat: np.ndarray) -> Dict[str, np.ndarray]:
    """Named views into the flat vector (shared memory, no copies)."""
    flat = np.asarray(flat)
    if flat.shape != (param_count(spec),):
        raise ConsistencyError(
            f"parameter vector must have shape ({param_count(spec)},), got {flat.shape}"
        )
    out = {}
    for name, shape, offset in layout(spec):
        out[name] = flat[offset : offset + int(np.prod(shape))].reshape(shape)
    return out


def param_nodes(spec: NetSpec, flat: np.ndarray) -> Dict[str, Node]:
    return {name: Node(view) for name, view in param_views(spec, flat).items()}


def init_params(spec: NetSpec, rng) -> np.ndarray:
    """He-scaled hidden layers, zero output head, small class embeddings."""
    gen = np.random.default_rng(rng)
    flat = np.zeros(param_count(spec))
    views = param_views(spec, flat)
    for name, view in views.items():
        if name.startswith("w") and name != "w_out":
            fan_in = view.shape[0]
            view[...] = gen.standard_normal(view.shape) * np.sqrt(2.0 / fan_in)
        elif name == "class_embed":
            view[...] = 0.1 * gen.standard_normal(view.shape)
        # biases and the output head stay zero
    return flat


def time_features(count: int, t) -> np.ndarray:
    """Sinusoidal features of logit(t) at geometrically spaced frequencies."""
    t_arr = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), T_LO, T_HI)
    u = np.log(t_arr / (1.0 - t_arr))
    if count == 0:
        return np.zeros((t_arr.shape[0], 0))
    freqs = 0.25 * 2.0 ** np.arange(count)
    phase = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _class_indices(spec: NetSpec, n: int, class_idx) -> np.ndarray:
    if class_idx is None:
        return np.full(n, spec.class_count, dtype=int)
    idx = np.asarray(class_idx, dtype=int)
    if idx.ndim == 0:
        idx = np.full(n, int(idx))
    if idx.shape != (n,):
        raise ConsistencyError("class indices must be scalar or one per row")
    if np.any(idx < 0) or np.any(idx > spec.class_count):
        raise ConsistencyError(
            f"class index out of range [0, {spec.class_count}] (last row = null class)"
        )
    return idx


def tape_forward(
    spec: NetSpec,
    params: Mapping[str, Node],
    x,
    t,
    class_idx=None,
) -> Node:
    """Differentiable forward pass; `x` may be a Node to get input gradients."""
    x = lift(x)
    if x.value.ndim != 2 or x.value.shape[1] != spec.input_dim:
        raise ConsistencyError(
            f"x must have shape (n, {spec.input_dim}), got {x.value.shape}"
        )
    n = x.value.shape[0]
    feats = [x, Node(time_features(spec.time_features, np.broadcast_to(np.asarray(t, float), (n,))))]
    if spec.class_count > 0:
        feats.append(gather_rows(params["class_embed"], _class_indices(spec, n, class_idx)))
    elif class_idx is not None:
        raise ConsistencyError("class index given to an unconditional net")
    h = concat(feats, axis=1)
    for i in range(len(spec.hidden)):
        h = silu(add(matmul(h, params[f"w{i}"]), params[f"b{i}"]))
    return add(matmul(h, params["w_out"]), params["b_out"])


def forward(spec: NetSpec, flat: np.ndarray, x, t, class_idx=None) -> np.ndarray:
    """Plain evaluation (same code path as the tape, value only)."""
    return tape_forward(spec, param_nodes(spec, flat), np.asarray(x, float), t, class_idx).value


def grad(
    spec: NetSpec,
    flat: np.ndarray,
    loss_closure: Callable[[Dict[str, Node]], Node],
) -> Tuple[float, np.ndarray]:
    """Loss and flat parameter gradient for a tape-built scalar loss.

    `loss_closure` receives the named parameter Nodes and must combine them
    with this module's primitives into a scalar Node.
    """
    nodes = param_nodes(spec, flat)
    loss = loss_closure(nodes)
    if not isinstance(loss, Node):
        raise ConsistencyError("loss_closure must return a Node")
    names = [name for name, _, _ in layout(spec)]
    gs = gradients(loss, [nodes[name] for name in names])
    flat_grad = np.concatenate([g.ravel() for g in gs])
    return float(loss.value), flat_grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3


def adam_init(
    n: int, lr: float = 1e-3, beta1: float = 0.0, beta2: float = 0.999, eps: float = 1e-8
) -> AdamState:
    return AdamState(m=np.zeros(n), v=np.zeros(n), beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update; mutates state and params in place."""
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ConsistencyError("params/grads shape does not match optimizer state")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


# ---------------------------------------------------------------------------
# verification and persistence


def finite_difference_check(
    build_loss: Callable[..., Node],
    arrays: Sequence[np.ndarray],
    coordinates: int = 100,
    rng=0,
    step: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `build_loss(*nodes)` must construct a scalar Node from freshly lifted
    inputs; it is re-evaluated for every probe, so it must be pure.
    """
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    nodes = [Node(a.copy()) for a in arrays]
    analytic = gradients(build_loss(*nodes), nodes)

    def value_at(probe_arrays) -> float:
        return float(build_loss(*[Node(a) for a in probe_arrays]).value)

    gen = np.random.default_rng(rng)
    sizes = np.array([a.size for a in arrays])
    total = int(sizes.sum())
    picks = gen.choice(total, size=min(coordinates, total), replace=False)
    worst = 0.0
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for pick in picks:
        which = int(np.searchsorted(bounds, pick, side="right") - 1)
        local = int(pick - bounds[which])
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[which].flat[local] += step
        minus[which].flat[local] -= step
        fd = (value_at(plus) - value_at(minus)) / (2.0 * step)
        an = float(analytic[which].flat[local])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        worst = max(worst, rel)
    return worst


def spec_hash(spec: NetSpec) -> int:
    """Stable 64-bit fingerprint of the architecture."""
    text = repr(
        (
            spec.input_dim,
            spec.hidden,
            spec.activation,
            spec.time_features,
            spec.class_count,
            spec.class_embed_dim,
            spec.output_kind,
            spec.output_dim,
        )
    )
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]


def save_checkpoint(path, spec: NetSpec, params: np.ndarray) -> None:
    """Header of three little-endian u64 (spec hash, input dim, count), then
    fp64 little-endian values; plus a readable `<path>.spec.txt` sidecar."""
    params = np.asarray(params, dtype=float)
    if params.shape != (param_count(spec),):
        raise ConsistencyError("params do not match the spec")
    if not np.all(np.isfinite(params)):
        raise ConsistencyError("refusing to checkpoint non-finite parameters")
    header = struct.pack("<QQQ", spec_hash(spec), spec.input_dim, params.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.astype("<f8").tobytes())
    lines = [
        "flowdistill parameter checkpoint",
        f"spec_hash: {spec_hash(spec):#018x}",
        f"input_dim: {spec.input_dim}",
        f"hidden: {','.join(str(h) for h in spec.hidden)}",
        f"activation: {spec.activation}",
        f"time_features: {spec.time_features}",
        f"class_count: {spec.class_count}",
        f"class_embed_dim: {spec.class_embed_dim}",
        f"output_kind: {spec.output_kind}",
        f"output_dim: {spec.output_dim}",
        f"parameters: {params.size}",
        "layout:",
    ]
    for name, shape, offset in layout(spec):
        lines.append(f"  {name} shape={shape} offset={offset}")
    with open(f"{path}.spec.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, spec: NetSpec) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) != 24:
            raise ConsistencyError("checkpoint header truncated")
        stored_hash, stored_dim, stored_count = struct.unpack("<QQQ", header)
        if stored_hash != spec_hash(spec):
            raise ConsistencyError("checkpoint was written for a different architecture")
        if stored_dim != spec.input_dim or stored_count != param_count(spec):
            raise ConsistencyError("checkpoint dimensions do not match the spec")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.shape != (stored_count,):
        raise ConsistencyError("checkpoint payload truncated")
    return data.astype(float)
