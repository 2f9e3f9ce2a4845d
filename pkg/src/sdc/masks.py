"""DropConnect masks: Bernoulli masks for training, disjoint partitions for test.

At test time every DropConnect layer gets ``rho`` binary masks whose zero
positions partition the weight matrix, so each weight is dropped by exactly one
sub-network. Running the model once per mask gives ``rho`` softmax samples for
each input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import LayerSpec, ModelState, dropconnect_layers, forward, head_start
from .rng import stream
from .tensor import DimensionError, Tensor


class MaskConfigError(ValueError):
    pass


def keep_probability(rho: int) -> float:
    """p = 1 - 1/rho, the chance a weight survives a training mask."""
    if rho < 2:
        raise MaskConfigError(f"rho must be >= 2, got {rho}")
    return 1.0 - 1.0 / rho


def sample_train_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < p < 1.0:
        raise MaskConfigError(f"keep probability must be in (0, 1), got {p}")
    return (rng.random(shape) < p).astype(np.float64)


def apply_mask(weights: np.ndarray, mask: np.ndarray, scale: float = 1.0) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != np.shape(mask):
        raise DimensionError(f"mask {np.shape(mask)} does not match weights {weights.shape}")
    return weights * mask * scale


def block_sizes(n: int, rho: int) -> list[int]:
    """Split ``n`` into ``rho`` near-equal blocks; the first ``n % rho`` get one extra."""
    base, extra = divmod(n, rho)
    return [base + 1 if m < extra else base for m in range(rho)]


@dataclass
class LayerMasks:
    """The ``rho`` structured masks of one weight matrix."""

    shape: tuple[int, int]
    rho: int
    zero_index: list[np.ndarray]  # flat positions zeroed by each mask
    dense: np.ndarray = field(init=False, repr=False)  # rho x rows x cols

    def __post_init__(self):
        n = int(np.prod(self.shape))
        dense = np.ones((self.rho, n))
        for m, idx in enumerate(self.zero_index):
            dense[m, idx] = 0.0
        self.dense = dense.reshape((self.rho, *self.shape))

    def mask(self, m: int) -> np.ndarray:
        return self.dense[m]


@dataclass
class MaskSet:
    rho: int
    seed: int
    layers: dict[int, LayerMasks]

    def __len__(self) -> int:
        return self.rho


def build_structured_masks(shape: tuple[int, int], rho: int, rng: np.random.Generator) -> LayerMasks:
    n = int(np.prod(shape))
    if rho < 2:
        raise MaskConfigError(f"rho must be >= 2, got {rho}")
    if rho > n:
        raise MaskConfigError(f"rho={rho} exceeds the {n} weights available to partition")
    perm = rng.permutation(n)
    cuts = np.cumsum([0] + block_sizes(n, rho))
    zero_index = [np.sort(perm[cuts[m] : cuts[m + 1]]).astype(np.int64) for m in range(rho)]
    return LayerMasks(tuple(shape), rho, zero_index)


def build_mask_set(specs: Sequence[LayerSpec], rho: int, rng: np.random.Generator, seed: int = 0) -> MaskSet:
    layers = {i: build_structured_masks(specs[i].weight_shape(), rho, rng) for i in dropconnect_layers(specs)}
    return MaskSet(rho, seed, layers)


def split_scale(rho: int, enabled: bool = True) -> float:
    """Test-time rescale rho/(rho-1): each sub-network keeps (rho-1)/rho of the weights."""
    return rho / (rho - 1) if enabled else 1.0


def features(specs: Sequence[LayerSpec], state: ModelState, x) -> Tensor:
    """Output of the mask-free trunk (everything before the first DropConnect layer)."""
    return forward(specs, state, T.as_tensor(x), stop=head_start(specs))


def _head_proba(specs, state, feats: Tensor, factors: dict[int, np.ndarray]) -> np.ndarray:
    logits = forward(specs, state, feats, weight_factors=factors, start=head_start(specs))
    return T.softmax_rows(logits).data


def subnetwork_forward(
    specs: Sequence[LayerSpec],
    state: ModelState,
    mask_set: MaskSet,
    m: int,
    x,
    rescale: bool = True,
    feats: Tensor | None = None,
) -> np.ndarray:
    """Softmax output of sub-network ``m`` (0-based) for a batch ``x``.

    ``feats`` may carry a precomputed trunk output to skip the conv layers.
    """
    if not 0 <= m < mask_set.rho:
        raise IndexError(f"sub-network index {m} outside [0, {mask_set.rho})")
    if state.training_mode:
        raise RuntimeError("sub-network forward requires training_mode=False")
    c = split_scale(mask_set.rho, rescale)
    factors = {i: lm.mask(m) * c for i, lm in mask_set.layers.items()}
    if feats is None:
        feats = features(specs, state, x)
    return _head_proba(specs, state, feats, factors)


def all_subnetworks(specs, state, mask_set: MaskSet, x, rescale: bool = True) -> np.ndarray:
    """Stack of every sub-network output, shape (batch, rho, K)."""
    feats = features(specs, state, x)
    outs = [subnetwork_forward(specs, state, mask_set, m, x, rescale, feats) for m in range(mask_set.rho)]
    return np.stack(outs, axis=1)


def mc_sample_forward(
    specs: Sequence[LayerSpec],
    state: ModelState,
    p: float,
    samples: int,
    rng: np.random.Generator,
    x,
    rescale: bool = True,
    feats: Tensor | None = None,
) -> np.ndarray:
    """``samples`` independent Bernoulli(p) weight-mask draws; shape (batch, samples, K).

    One mask draw per sample is shared across the batch.
    """
    if samples < 2:
        raise MaskConfigError("MC sampling needs at least 2 samples")
    if not 0.0 < p <= 1.0:
        raise MaskConfigError(f"keep probability must be in (0, 1], got {p}")
    if feats is None:
        feats = features(specs, state, x)
    c = 1.0 / p if rescale else 1.0
    outs = []
    for _ in range(samples):
        factors = {}
        for i in dropconnect_layers(specs):
            shape = specs[i].weight_shape()
            z = np.ones(shape) if p == 1.0 else sample_train_mask(shape, p, rng)
            factors[i] = z * c
        outs.append(_head_proba(specs, state, feats, factors))
    return np.stack(outs, axis=1)


@dataclass
class Ensemble:
    """Source of per-input probability samples for one evaluation mode.

    ``sdc`` runs the ``rho`` structured sub-networks, ``mc`` draws
    ``mc_samples`` Bernoulli weight masks (reported as MC-DropConnect), and
    ``baseline`` is one deterministic forward with the full weights.
    """

    specs: Sequence[LayerSpec]
    state: ModelState
    mode: str = "sdc"
    mask_set: MaskSet | None = None
    mc_samples: int = 10
    keep_p: float = 0.9
    seed: int = 0
    rescale: bool = True
    chunk: int = 1000

    def __post_init__(self):
        if self.mode not in ("sdc", "mc", "baseline"):
            raise MaskConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "sdc" and self.mask_set is None:
            raise MaskConfigError("sdc mode needs a mask set")

    def trunk(self, x: np.ndarray) -> Tensor:
        parts = [features(self.specs, self.state, x[i : i + self.chunk]).data for i in range(0, len(x), self.chunk)]
        return Tensor(np.concatenate(parts, axis=0))

    def outputs(self, x: np.ndarray) -> np.ndarray:
        """Probability samples, shape (N, S, K); S = 1 for the baseline."""
        feats = self.trunk(np.asarray(x, dtype=np.float64))
        if self.mode == "baseline":
            return _head_proba(self.specs, self.state, feats, {})[:, None, :]
        if self.mode == "sdc":
            ms = self.mask_set
            return np.stack(
                [subnetwork_forward(self.specs, self.state, ms, m, None, self.rescale, feats) for m in range(ms.rho)],
                axis=1,
            )
        # the mc stream restarts on every call so repeated evaluations agree
        rng = stream(self.seed, "mc")
        return mc_sample_forward(self.specs, self.state, self.keep_p, self.mc_samples, rng, None, self.rescale, feats)
