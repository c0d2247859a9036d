"""Expert-choice routing: capacity, gating, padding deprioritization, top-k.

Each expert independently takes the top-K tokens of its gate-matrix column.
Load is balanced by construction; tokens selected by no expert are dropped and
ride the residual stream. Tie handling follows the configured
:class:`~moelab.numerics.TieMode`, which is where the side channel lives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .numerics import (
    QuantizationPolicy,
    QuantizationSite,
    TieMode,
    quantize,
    softmax,
    stable_topk,
)

__all__ = [
    "PADDING_SCALE",
    "QueryOrder",
    "CapacityParams",
    "RouterConfig",
    "ExpertAssignment",
    "expert_capacity",
    "gate",
    "padding_multiplier",
    "deprioritize_padding",
    "route",
    "decide_buffer_outcome",
]

# Scale applied to deprioritized rows. Anything below the quantization
# resolution of real priorities guarantees padding loses every contest.
PADDING_SCALE = 1e-6


class QueryOrder(str, Enum):
    """Relative order of probe and victim sequences in the flat batch."""

    PROBE_FIRST = "probe-first"
    VICTIM_FIRST = "victim-first"


@dataclass(frozen=True)
class CapacityParams:
    """Inputs to the expert-capacity formula K = floor(B*L*gamma/N)."""

    batch_size: int
    max_seq_len: int
    capacity_factor: float
    experts: int

    def __post_init__(self):
        if min(self.batch_size, self.max_seq_len, self.experts) < 1:
            raise ConfigurationError("capacity parameters must be positive")
        if self.capacity_factor <= 0:
            raise ConfigurationError("capacity_factor must be > 0")


def expert_capacity(params: CapacityParams) -> int:
    """Per-expert buffer size: floor(B * L * gamma / N); must be >= 1."""
    k = int(
        np.floor(
            params.batch_size
            * params.max_seq_len
            * params.capacity_factor
            / params.experts
        )
    )
    if k < 1:
        raise ConfigurationError(
            f"expert capacity {k} < 1 for params {params}; raise gamma or batch size"
        )
    return k


@dataclass(frozen=True)
class RouterConfig:
    """Routing behaviour for a run; defenses default off."""

    capacity: CapacityParams
    tie_mode: TieMode = TieMode.STABLE_ASCENDING
    quantization: QuantizationPolicy = field(default_factory=QuantizationPolicy)
    batch_isolation: bool = False

    @property
    def k(self) -> int:
        return expert_capacity(self.capacity)


@dataclass
class ExpertAssignment:
    """Per-expert ordered buffers over the flat token axis.

    ``slots[e]`` lists the flat token indices expert ``e`` processes, in
    selection-priority order; ``weights[e]`` the matching gate weights.
    ``selected`` is the (tokens, experts) membership mask and ``dropped`` marks
    tokens no expert picked.
    """

    slots: list[np.ndarray]
    weights: list[np.ndarray]
    selected: np.ndarray
    dropped: np.ndarray

    @property
    def num_experts(self) -> int:
        return len(self.slots)

    def path_bits(self, flat_index: int) -> np.ndarray:
        """Expert-membership bit vector for one token."""
        return self.selected[flat_index].astype(np.int8)


def gate(hidden: np.ndarray, gate_weights: np.ndarray, policy: QuantizationPolicy) -> np.ndarray:
    """Row-wise softmax of hidden @ gate_weights, quantized per policy."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2:
        raise InvalidInputError("hidden must be (tokens, d)")
    probs = softmax(hidden @ gate_weights, axis=-1)
    if policy.site is QuantizationSite.ROUTER_PROBABILITIES:
        probs = quantize(probs, policy)
    return probs


def padding_multiplier(is_padding: np.ndarray) -> np.ndarray:
    """Row multiplier vector: 1 for real tokens, PADDING_SCALE for padding."""
    return np.where(np.asarray(is_padding, dtype=bool), PADDING_SCALE, 1.0)


def deprioritize_padding(gate_matrix: np.ndarray, multiplier: np.ndarray) -> np.ndarray:
    """Scale padding rows down so they lose every top-k contest to real tokens."""
    multiplier = np.asarray(multiplier, dtype=np.float64)
    if multiplier.shape[0] != gate_matrix.shape[0]:
        raise InvalidInputError("multiplier length must match gate rows")
    return gate_matrix * multiplier[:, None]


def route(
    gate_matrix: np.ndarray,
    config: RouterConfig,
    groups: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    weight_matrix: Optional[np.ndarray] = None,
) -> ExpertAssignment:
    """Column-wise top-K selection over the gate matrix.

    Selection priority comes from ``gate_matrix`` (post-quantization,
    post-deprioritization). ``weight_matrix``, when given, supplies the gate
    weights recorded for processing (e.g. the pre-deprioritization
    probabilities); it defaults to the priorities themselves.

    With ``batch_isolation`` on, each originating sequence group contests a
    private buffer of floor(L*gamma/N) slots, so no cross-sequence influence
    is possible; ``groups`` maps each flat token to its sequence.
    """
    g = np.asarray(gate_matrix, dtype=np.float64)
    w = g if weight_matrix is None else np.asarray(weight_matrix, dtype=np.float64)
    tokens, experts = g.shape
    selected = np.zeros((tokens, experts), dtype=bool)
    slots: list[np.ndarray] = []
    weights: list[np.ndarray] = []

    if config.batch_isolation:
        if groups is None:
            raise ConfigurationError("batch_isolation requires token->sequence groups")
        groups = np.asarray(groups)
        per_group_k = expert_capacity(
            CapacityParams(
                batch_size=1,
                max_seq_len=config.capacity.max_seq_len,
                capacity_factor=config.capacity.capacity_factor,
                experts=config.capacity.experts,
            )
        )
        group_ids = np.unique(groups)
        for e in range(experts):
            idx_parts = []
            for gid in group_ids:
                members = np.flatnonzero(groups == gid)
                sel = stable_topk(g[members, e], per_group_k, config.tie_mode, rng=rng)
                idx_parts.append(members[sel.indices])
            idx = np.concatenate(idx_parts)
            slots.append(idx)
            weights.append(w[idx, e])
            selected[idx, e] = True
    else:
        k = config.k
        for e in range(experts):
            sel = stable_topk(g[:, e], k, config.tie_mode, rng=rng)
            slots.append(sel.indices)
            weights.append(w[sel.indices, e])
            selected[sel.indices, e] = True

    dropped = ~selected.any(axis=1)
    return ExpertAssignment(slots=slots, weights=weights, selected=selected, dropped=dropped)


def decide_buffer_outcome(
    p_guess: float,
    p_target: float,
    order: QueryOrder,
    boundary_slot: int,
) -> bool:
    """Outcome of a boundary contest between the guess and the target token.

    Saturates ``boundary_slot`` slots with strictly higher priorities and runs
    the two contestants through a live stable top-k for the one remaining
    slot. The returned flag follows the tabulated leak convention: unequal
    priorities report the probe side's fate (order-independent), an exact tie
    reports the victim token's fate, which flips with batch order - the leak.
    """
    if boundary_slot < 0:
        raise InvalidInputError("boundary_slot must be >= 0")
    ceiling = max(abs(p_guess), abs(p_target)) + 1.0
    saturators = [ceiling] * boundary_slot
    if order is QueryOrder.PROBE_FIRST:
        column = np.array(saturators + [p_guess, p_target])
        guess_idx, target_idx = boundary_slot, boundary_slot + 1
    else:
        column = np.array(saturators + [p_target, p_guess])
        target_idx, guess_idx = boundary_slot, boundary_slot + 1
    sel = stable_topk(column, boundary_slot + 1, TieMode.STABLE_ASCENDING)
    chosen = set(sel.indices.tolist())
    if p_guess == p_target:
        return target_idx not in chosen
    return guess_idx not in chosen
