"""Deterministic numeric substrate: seeded init, rounding, softmax, stable top-k.

Everything here is pure float64 and bit-reproducible across runs and platforms.
The tie-breaking semantics of :func:`stable_topk` are the load-bearing piece:
the rest of the lab exists to exercise them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "TieMode",
    "QuantizationSite",
    "QuantizationPolicy",
    "TopKSelection",
    "stable_topk",
    "quantize",
    "softmax",
    "seeded_init",
    "splitmix64_stream",
]


class TieMode(str, Enum):
    """How equal priorities are ordered during top-k selection."""

    STABLE_ASCENDING = "stable-ascending"
    UNSTABLE = "unstable"
    RANDOMIZED = "randomized"


class QuantizationSite(str, Enum):
    """Where rounding is applied inside the model."""

    ROUTER_PROBABILITIES = "router-probabilities"
    ATTENTION_OUTPUTS = "attention-outputs"
    OFF = "off"


@dataclass(frozen=True)
class QuantizationPolicy:
    """Decimal rounding applied at a fixed site for the whole run."""

    decimals: int = 5
    site: QuantizationSite = QuantizationSite.ROUTER_PROBABILITIES

    def __post_init__(self):
        if self.decimals < 1:
            raise InvalidInputError(f"decimals must be >= 1, got {self.decimals}")


@dataclass(frozen=True)
class TopKSelection:
    """Result of a top-k pass: selected indices with their priorities."""

    k: int
    indices: np.ndarray  # int64, length min(k, n)
    values: np.ndarray  # float64, non-increasing
    mode: TieMode

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


# Fixed, non-monotone permutation seed modelling small-buffer selection where
# equal elements come back in an arbitrary but repeatable order.
_UNSTABLE_SHUFFLE_SEED = 0x5DEECE66D


def stable_topk(
    priorities: np.ndarray,
    k: int,
    mode: TieMode = TieMode.STABLE_ASCENDING,
    rng: Optional[np.random.Generator] = None,
) -> TopKSelection:
    """Select the top-k entries by priority, descending.

    Tie handling depends on ``mode``:

    * ``STABLE_ASCENDING`` - equal priorities keep ascending index order, so the
      earliest index wins a contested buffer slot.
    * ``UNSTABLE`` - equal priorities are ordered by a fixed but non-monotone
      permutation of the input positions.
    * ``RANDOMIZED`` - equal priorities are ordered by a permutation drawn from
      ``rng`` (required), the stochastic defense setting.

    ``k`` larger than the input simply returns the whole input, matching
    buffer semantics where capacity exceeds the batch.
    """
    values = np.asarray(priorities, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidInputError("priorities must be a non-empty 1-d vector")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("priorities must be finite")

    n = values.size
    k_eff = min(k, n)

    if mode is TieMode.STABLE_ASCENDING:
        order = np.argsort(-values, kind="stable")
    else:
        if mode is TieMode.RANDOMIZED:
            if rng is None:
                raise InvalidInputError("randomized tie mode requires an rng")
            perm = rng.permutation(n)
        else:
            perm = np.random.default_rng(_UNSTABLE_SHUFFLE_SEED + n).permutation(n)
        # Stable sort in the permuted domain breaks ties by permutation order.
        order = perm[np.argsort(-values[perm], kind="stable")]

    chosen = order[:k_eff]
    return TopKSelection(k=k, indices=chosen, values=values[chosen], mode=mode)


def quantize(values: np.ndarray, policy: QuantizationPolicy) -> np.ndarray:
    """Round to ``policy.decimals`` places, half away from zero.

    Idempotent and monotone non-decreasing; this coarsening is what lets two
    tokens with equal representations land on exactly equal priorities.
    """
    arr = np.asarray(values, dtype=np.float64)
    scale = 10.0 ** policy.decimals
    return np.copysign(np.floor(np.abs(arr) * scale + 0.5), arr) / scale


def softmax(logits: np.ndarray, axis: int = -1, validate: bool = True) -> np.ndarray:
    """Shift-invariant softmax along ``axis``.

    ``validate=False`` skips the finite-input check on hot paths whose inputs
    are finite by construction.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if validate and not np.all(np.isfinite(arr)):
        raise InvalidInputError("softmax input must be finite")
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the splitmix64 generator for ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _SM64_GAMMA * np.arange(
            1, count + 1, dtype=np.uint64
        )
        z = state
        z = (z ^ (z >> np.uint64(30))) * _SM64_MIX1
        z = (z ^ (z >> np.uint64(27))) * _SM64_MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def seeded_init(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic uniform(-0.1, 0.1) array from a splitmix64 stream.

    Identical (shape, seed) yields bit-identical output on every platform.
    """
    if any(int(s) <= 0 for s in shape):
        raise InvalidInputError(f"all dimensions must be positive, got {shape}")
    count = int(np.prod([int(s) for s in shape]))
    bits = splitmix64_stream(seed, count)
    # Top 53 bits -> uniform [0, 1) at full double precision.
    unit = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return (0.2 * unit - 0.1).reshape(shape)
