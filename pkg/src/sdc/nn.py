"""LeNet5 layers, cross-entropy loss and the Adam optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``conv`` uses (in_size, out_size) as (channels, filters); ``fc`` uses them
    as (fan-in, fan-out). Only fc layers may carry DropConnect.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    padding: int = 0
    dropconnect: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "fc", "relu", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.dropconnect and self.kind != "fc":
            raise ValueError("DropConnect is only supported on fc layers")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        if self.kind == "fc":
            return (self.out_size, self.in_size)
        raise ValueError(f"{self.kind} layer has no weights")


@dataclass
class ModelState:
    """Weights and biases keyed by layer index."""

    weights: dict[int, Tensor]
    biases: dict[int, Tensor]
    rng_seed: int = 0
    training_mode: bool = False

    def parameters(self) -> list[Tensor]:
        out = []
        for i in sorted(self.weights):
            out += [self.weights[i], self.biases[i]]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> ModelState:
        return ModelState(
            {i: Tensor(w.data.copy(), requires_grad=w.requires_grad) for i, w in self.weights.items()},
            {i: Tensor(b.data.copy(), requires_grad=b.requires_grad) for i, b in self.biases.items()},
            self.rng_seed,
            self.training_mode,
        )


def check_chain(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int]) -> None:
    """Raise if consecutive layer dimensions do not line up for ``input_shape`` (C, H, W)."""
    c, h, w = input_shape
    flat: int | None = None
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if flat is not None or s.in_size != c:
                raise DimensionError(f"layer {i}: conv expects {s.in_size} channels, got {c}")
            h = h + 2 * s.padding - s.kernel + 1
            w = w + 2 * s.padding - s.kernel + 1
            c = s.out_size
        elif s.kind == "maxpool":
            if h % 2 or w % 2:
                raise DimensionError(f"layer {i}: maxpool on odd size {h}x{w}")
            h, w = h // 2, w // 2
        elif s.kind == "flatten":
            flat = c * h * w
        elif s.kind == "fc":
            if flat != s.in_size:
                raise DimensionError(f"layer {i}: fc fan-in {s.in_size}, incoming {flat}")
            flat = s.out_size


def build_lenet5(num_classes: int = 10, seed: int = 0) -> tuple[list[LayerSpec], ModelState]:
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    specs = [
        LayerSpec("conv", 1, 6, kernel=5, padding=2),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", 6, 16, kernel=5),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("fc", 400, 120, dropconnect=True),
        LayerSpec("relu"),
        LayerSpec("fc", 120, 84, dropconnect=True),
        LayerSpec("relu"),
        LayerSpec("fc", 84, num_classes, dropconnect=True),
    ]
    check_chain(specs, (1, 28, 28))
    return specs, init_state(specs, seed)


def init_state(specs: Sequence[LayerSpec], seed: int) -> ModelState:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = stream(seed, "init")
    weights, biases = {}, {}
    for i, s in enumerate(specs):
        if not s.has_params:
            continue
        shape = s.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        weights[i] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        biases[i] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return ModelState(weights, biases, rng_seed=seed)


def parameter_count(state: ModelState) -> int:
    return sum(p.data.size for p in state.parameters())


def dropconnect_layers(specs: Sequence[LayerSpec]) -> list[int]:
    return [i for i, s in enumerate(specs) if s.dropconnect]


def head_start(specs: Sequence[LayerSpec]) -> int:
    """Index of the first DropConnect layer; everything before it is mask-free."""
    dc = dropconnect_layers(specs)
    return dc[0] if dc else len(specs)


def forward(
    specs: Sequence[LayerSpec],
    state: ModelState,
    x: Tensor,
    weight_factors: Mapping[int, np.ndarray] | None = None,
    start: int = 0,
    stop: int | None = None,
) -> Tensor:
    """Run layers ``start:stop`` and return logits (or intermediate features).

    ``weight_factors[i]`` multiplies the weight matrix of layer ``i``
    elementwise; DropConnect masks arrive here already scaled.
    """
    weight_factors = weight_factors or {}
    stop = len(specs) if stop is None else stop
    h = x
    for i in range(start, stop):
        s = specs[i]
        if s.kind == "conv":
            h = T.conv2d(h, state.weights[i], stride=1, padding=s.padding)
            h = _add_channel_bias(h, state.biases[i])
        elif s.kind == "relu":
            h = T.relu(h)
        elif s.kind == "maxpool":
            h = T.maxpool2(h)
        elif s.kind == "flatten":
            h = T.flatten(h)
        elif s.kind == "fc":
            W = state.weights[i]
            if i in weight_factors:
                W = T.mul(W, Tensor(weight_factors[i]))
            h = T.add_bias(T.matmul(h, T.transpose(W)), state.biases[i])
    return h


def _add_channel_bias(h: Tensor, bias: Tensor) -> Tensor:
    # conv bias: broadcast over N, H, W
    if bias.shape != (h.shape[1],):
        raise DimensionError(f"conv bias {bias.shape} vs {h.shape[1]} channels")

    def backward(g):
        return g, g.sum(axis=(0, 2, 3))

    return T._emit(h.data + bias.data[None, :, None, None], (h, bias), backward)


def predict_proba(specs, state, x: np.ndarray | Tensor) -> np.ndarray:
    """Deterministic softmax output with unmasked weights."""
    return T.softmax_rows(forward(specs, state, T.as_tensor(x))).data


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[i, labels[i]]."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return T.scale(T.mean_all(T.pick_rows(T.log_softmax_rows(logits), labels)), -1.0)


@dataclass
class AdamState:
    lr: float = 7.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None = None) -> None:
    """In-place bias-corrected Adam update. ``grads`` defaults to each ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise DimensionError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
