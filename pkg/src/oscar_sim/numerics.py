"""Minimal reverse-mode autodiff, Adam, and counter-based seeded RNG.

Everything is numpy-backed. Training runs in float32 by default; gradient
checking is expected to run the same code in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NumericsError",
    "RngStream",
    "Tensor",
    "concat",
    "softmax_cross_entropy",
    "MlpSpec",
    "ParamSet",
    "init_params",
    "param_count",
    "param_digest",
    "mlp_forward",
    "mlp_apply",
    "forward_backward",
    "logprob_input_grad",
    "AdamState",
    "adam_init",
    "adam_step",
]


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# counter-based RNG


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap silently
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


class RngStream:
    """Deterministic stream of draws, a pure function of (seed, label, counter).

    Independent instances never share state, so draw order across streams
    cannot affect results. Normal variates come from Box-Muller applied to
    the underlying counter stream.
    """

    def __init__(self, seed: int, label: str):
        if not 0 <= seed <= _MASK64:
            raise NumericsError(f"seed must be a u64, got {seed}")
        label_hash = int.from_bytes(
            hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little"
        )
        self.seed = seed
        self.label = label
        self._key = np.uint64((seed * 0x9E3779B97F4A7C15 ^ label_hash) & _MASK64)
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(idx * _GOLDEN + self._key)

    def uniform(self, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        """Uniform draws in [0, 1), float64."""
        size = int(np.prod(shape)) if shape != () else 1
        u = (self._raw(size) >> np.uint64(11)) * 2.0**-53
        return u.reshape(shape) if shape != () else u[0]

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        """Standard normal draws, float64."""
        size = int(np.prod(shape)) if shape != () else 1
        pairs = (size + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so the log is finite
        u1 = ((raw[:pairs] >> np.uint64(11)) + np.uint64(1)) * 2.0**-53
        u2 = (raw[pairs:] >> np.uint64(11)) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        z = z[:size]
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, low: int, high: int, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        """Integers in [low, high), int64. Modulo bias is negligible at u64 width."""
        if high <= low:
            raise NumericsError(f"empty integer range [{low}, {high})")
        size = int(np.prod(shape)) if shape != () else 1
        vals = (self._raw(size) % np.uint64(high - low)).astype(np.int64) + low
        return vals.reshape(shape) if shape != () else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        # argsort of raw words; collisions at u64 width are not a concern
        return np.argsort(self._raw(n), kind="stable")

    def bernoulli(self, p: float, shape: int | tuple[int, ...]) -> np.ndarray:
        return self.uniform(shape) < p


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Numpy array plus a backward closure. Values are treated as immutable."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(g, other.data.shape)

        return self._make(out_data, (self, other), backward)

    def __sub__(self, other: "Tensor") -> "Tensor":
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(-g, other.data.shape)

        return self._make(out_data, (self, other), backward)

    def __mul__(self, other: "Tensor") -> "Tensor":
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self.grad += _unbroadcast(g * other.data, self.data.shape)
            if other.requires_grad:
                other.grad += _unbroadcast(g * self.data, other.data.shape)

        return self._make(out_data, (self, other), backward)

    def scale(self, c: float) -> "Tensor":
        out_data = self.data * np.asarray(c, dtype=self.data.dtype)

        def backward(g):
            if self.requires_grad:
                self.grad += g * np.asarray(c, dtype=self.data.dtype)

        return self._make(out_data, (self,), backward)

    def matmul(self, other: "Tensor") -> "Tensor":
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self.grad += g @ other.data.T
            if other.requires_grad:
                other.grad += self.data.T @ g

        return self._make(out_data, (self, other), backward)

    def silu(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * sig

        def backward(g):
            if self.requires_grad:
                self.grad += g * sig * (1.0 + self.data * (1.0 - sig))

        return self._make(out_data, (self,), backward)

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)

        def backward(g):
            if self.requires_grad:
                self.grad += g * (self.data > 0)

        return self._make(out_data, (self,), backward)

    def mean(self) -> "Tensor":
        out_data = np.asarray(self.data.mean(), dtype=self.data.dtype)

        def backward(g):
            if self.requires_grad:
                self.grad += np.full_like(self.data, g / self.data.size)

        return self._make(out_data, (self,), backward)

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(), dtype=self.data.dtype)

        def backward(g):
            if self.requires_grad:
                self.grad += np.full_like(self.data, g)

        return self._make(out_data, (self,), backward)

    def backward(self) -> None:
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t.grad += g[tuple(sl)]

    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    if out.requires_grad:
        out._parents = tuple(tensors)
        out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    rows = np.arange(n)
    logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    out_data = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def backward(g):
        if logits.requires_grad:
            dz = probs.copy()
            dz[rows, labels] -= 1.0
            logits.grad += (g / n) * dz.astype(z.dtype)

    out = Tensor(out_data, requires_grad=logits.requires_grad)
    if out.requires_grad:
        out._parents = (logits,)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# dense MLPs

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    """Architecture descriptor: dense layers with an elementwise activation.

    The output layer is linear. head selects the training loss:
    "mse" for regression targets, "softmax_ce" for integer class labels.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "silu"
    head: str = "mse"

    def __post_init__(self):
        if self.activation not in ("silu", "relu"):
            raise NumericsError(f"unknown activation '{self.activation}'")
        if self.head not in ("mse", "softmax_ce"):
            raise NumericsError(f"unknown head '{self.head}'")
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise NumericsError("layer widths must be positive")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.hidden, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_params(spec: MlpSpec, stream: RngStream, dtype=np.float32) -> ParamSet:
    """He-style init: hidden weights N(0, 2/fan_in), zero biases, zero output layer."""
    params: ParamSet = {}
    layers = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        if i == len(layers) - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = stream.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"w{i}"] = w.astype(dtype)
        params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def param_count(params: ParamSet) -> int:
    return sum(int(p.size) for p in params.values())


def param_digest(params: ParamSet) -> str:
    """sha256 over parameters in declared order, little-endian float32."""
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def _check_finite(name: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NumericsError(f"non-finite values in {name}")


def mlp_apply(spec: MlpSpec, params: ParamSet, x: Tensor) -> Tensor:
    """Forward pass on the tape, with per-layer finiteness checks."""
    n_layers = len(spec.layer_dims())
    h = x
    for i in range(n_layers):
        w = params[f"w{i}"]
        if not isinstance(w, Tensor):
            w = Tensor(w)
        b = params[f"b{i}"]
        if not isinstance(b, Tensor):
            b = Tensor(b)
        h = h.matmul(w) + b
        _check_finite(f"layer dense{i}", h.data)
        if i < n_layers - 1:
            h = h.silu() if spec.activation == "silu" else h.relu()
            _check_finite(f"layer {spec.activation}{i}", h.data)
    return h


def mlp_forward(spec: MlpSpec, params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Inference-only forward pass; numerically identical to mlp_apply."""
    h = x
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            if spec.activation == "silu":
                h = h * (1.0 / (1.0 + np.exp(-h)))
            else:
                h = np.maximum(h, 0)
    return h


def forward_backward(
    spec: MlpSpec,
    params: ParamSet,
    inputs: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """One loss evaluation plus gradients for every parameter.

    targets are regression targets for the mse head and integer labels for
    the softmax_ce head. The batch is the leading extent of inputs.
    """
    if inputs.ndim != 2 or inputs.shape[1] != spec.in_dim:
        raise NumericsError(
            f"inputs of shape {inputs.shape} do not match in_dim {spec.in_dim}"
        )
    wrapped = {name: Tensor(p, requires_grad=True) for name, p in params.items()}
    out = mlp_apply(spec, wrapped, Tensor(inputs))
    if spec.head == "mse":
        diff = out - Tensor(targets)
        loss = (diff * diff).mean()
    else:
        loss = softmax_cross_entropy(out, targets)
    _check_finite("loss", loss.data)
    loss.backward()
    grads = {name: t.grad for name, t in wrapped.items()}
    return float(loss.data), grads


def logprob_input_grad(
    spec: MlpSpec, params: ParamSet, inputs: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Per-row gradient of log softmax(logits)[label] with respect to inputs.

    Rows decouple because the objective is a sum over the batch.
    """
    if spec.head != "softmax_ce":
        raise NumericsError("input log-prob gradients need a softmax_ce head")
    x = Tensor(inputs, requires_grad=True)
    logits = mlp_apply(spec, params, x)
    # sum of per-row log-probs; mean CE of each row times -n gives the same grad
    loss = softmax_cross_entropy(logits, labels).scale(-float(inputs.shape[0]))
    loss.backward()
    return x.grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_init(params: ParamSet) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One Adam update. Returns fresh params and state; inputs are not mutated."""
    if set(grads) != set(params):
        raise NumericsError("gradient names do not match parameter names")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params: ParamSet = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.items():
        g = grads[k]
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {k}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[k] = (p - step).astype(p.dtype)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)
