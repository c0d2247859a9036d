"""Adversarial batch composition and the victim/attacker co-residency facades.

The attacker composes batches of blocking, probe and padding sequences with
one reserved victim slot. The target-model facade injects the secret into
that slot and returns only the probe's final-position logits; the local
facade is the attacker's own white-box copy and exposes traces.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import BatchCompositionError
from .model import BOS_TOKEN, PAD_TOKEN, Batch, ForwardResult, PrefixCache, ToyMoEModel
from .numerics import TieMode
from .router import CapacityParams, QueryOrder, RouterConfig

__all__ = [
    "SequenceRole",
    "AdversarialBatch",
    "compose_adversarial_batch",
    "QueryLedger",
    "TargetModel",
    "LocalModel",
    "resized_config",
]


class SequenceRole(str, Enum):
    SECRET = "secret"
    PROBE = "probe"
    BLOCKER = "blocker"
    PADDING = "padding"


def resized_config(base: RouterConfig, batch: Batch) -> RouterConfig:
    """Router config with capacity dimensions matching ``batch``."""
    cap = CapacityParams(
        batch_size=batch.B,
        max_seq_len=batch.L,
        capacity_factor=base.capacity.capacity_factor,
        experts=base.capacity.experts,
    )
    return dataclasses.replace(base, capacity=cap)


@dataclass
class AdversarialBatch:
    """Ordered sequences with roles; the victim slot holds a placeholder.

    Layout: blockers occupy the leading slots, the probe/victim pair sits
    next (order per ``order``), the padding sequence is last. Flat token
    indices therefore order the tie contestants exactly as the query order
    dictates.
    """

    entries: list[tuple[list[int], SequenceRole]]
    victim_slot: int
    probe_slot: int
    padding_len: int
    order: QueryOrder
    pad_to: int

    @property
    def batch_size(self) -> int:
        return len(self.entries)

    @property
    def probe_sequence(self) -> list[int]:
        return list(self.entries[self.probe_slot][0])

    def blocker_sequences(self) -> list[list[int]]:
        return [list(s) for s, role in self.entries if role is SequenceRole.BLOCKER]

    def to_batch(self, victim_sequence: Optional[Sequence[int]] = None) -> Batch:
        """Materialize for the model, injecting the victim sequence if given."""
        seqs = [list(s) for s, _ in self.entries]
        if victim_sequence is not None:
            victim = list(victim_sequence)
            if not victim or victim[0] != BOS_TOKEN:
                raise BatchCompositionError("victim sequence must start with BOS")
            if len(victim) > self.pad_to:
                raise BatchCompositionError(
                    f"victim length {len(victim)} exceeds batch length {self.pad_to}"
                )
            seqs[self.victim_slot] = victim
        return Batch(seqs, pad_to=self.pad_to)

    def reordered(self, order: QueryOrder) -> "AdversarialBatch":
        """Same multiset of sequences with the probe/victim pair swapped."""
        if order is self.order:
            return self
        entries = list(self.entries)
        a, b = sorted((self.victim_slot, self.probe_slot))
        entries[a], entries[b] = entries[b], entries[a]
        return AdversarialBatch(
            entries=entries,
            victim_slot=self.probe_slot,
            probe_slot=self.victim_slot,
            padding_len=self.padding_len,
            order=order,
            pad_to=self.pad_to,
        )

    def with_blockers(self, blockers: list[list[int]]) -> "AdversarialBatch":
        """Replace blocker sequences (used by buffer shaping)."""
        new_entries = []
        it = iter(blockers)
        for seq, role in self.entries:
            if role is SequenceRole.BLOCKER:
                new_entries.append((list(next(it)), role))
            else:
                new_entries.append((list(seq), role))
        return dataclasses.replace(self, entries=new_entries)


def compose_adversarial_batch(
    probe: Sequence[int],
    blockers: Sequence[Sequence[int]],
    padding_len: int,
    order: QueryOrder,
    victim_len: int = 0,
) -> AdversarialBatch:
    """Assemble the attack batch: blockers, probe/victim pair, padding.

    ``victim_len`` is the known secret length M (tokens after BOS) so the
    batch reserves enough padded width: L = max(P, M + 1, longest sequence).
    """
    probe = list(probe)
    if not probe or probe[0] != BOS_TOKEN:
        raise BatchCompositionError("probe must start with BOS")
    if padding_len < 1:
        raise BatchCompositionError("padding_len must be >= 1")
    blockers = [list(b) for b in blockers]
    for b in blockers:
        if not b or b[0] != BOS_TOKEN:
            raise BatchCompositionError("every blocker must start with BOS")
    if not blockers:
        raise BatchCompositionError("need at least one blocking sequence (B >= 4)")

    padding_seq = [BOS_TOKEN] + [PAD_TOKEN] * (padding_len - 1)
    victim_placeholder = [BOS_TOKEN]
    pad_to = max(
        padding_len, victim_len + 1, len(probe), max(len(b) for b in blockers)
    )

    entries: list[tuple[list[int], SequenceRole]] = [
        (b, SequenceRole.BLOCKER) for b in blockers
    ]
    base = len(entries)
    if order is QueryOrder.PROBE_FIRST:
        entries.append((probe, SequenceRole.PROBE))
        entries.append((victim_placeholder, SequenceRole.SECRET))
        probe_slot, victim_slot = base, base + 1
    else:
        entries.append((victim_placeholder, SequenceRole.SECRET))
        entries.append((probe, SequenceRole.PROBE))
        victim_slot, probe_slot = base, base + 1
    entries.append((padding_seq, SequenceRole.PADDING))

    return AdversarialBatch(
        entries=entries,
        victim_slot=victim_slot,
        probe_slot=probe_slot,
        padding_len=padding_len,
        order=order,
        pad_to=pad_to,
    )


@dataclass
class QueryLedger:
    """Monotone query accounting, exportable as JSON lines."""

    target_queries: int = 0
    local_queries: int = 0
    events: list[dict] = field(default_factory=list)

    def record(self, **fields) -> None:
        self.events.append(
            dict(
                fields,
                target_queries=self.target_queries,
                local_queries=self.local_queries,
            )
        )

    def to_json_lines(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events)


class TargetModel:
    """The remote co-batched service: holds the secret, returns probe logits.

    Callers never see the secret, the victim's logits, or any routing trace.
    """

    def __init__(
        self,
        model: ToyMoEModel,
        base_router: RouterConfig,
        secret_tokens: Sequence[int],
        ledger: Optional[QueryLedger] = None,
        tie_seed: int = 0,
    ):
        self.__model = model
        self.__router = base_router
        self.__secret = [BOS_TOKEN] + list(secret_tokens)
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.__tie_seed = tie_seed
        self.__query_count = 0

    @property
    def secret_length(self) -> int:
        """Length M of the secret; the threat model assumes it is known."""
        return len(self.__secret) - 1

    def query(self, adv: AdversarialBatch) -> np.ndarray:
        """Run the co-resident batch; returns only the probe's final logits."""
        batch = adv.to_batch(victim_sequence=self.__secret)
        config = resized_config(self.__router, batch)
        rng = None
        if config.tie_mode is TieMode.RANDOMIZED:
            rng = np.random.default_rng((self.__tie_seed, self.__query_count))
        self.__query_count += 1
        result = self.__model.forward_batch(batch, config, capture_trace=False, rng=rng)
        self.ledger.target_queries += 1
        return result.final_logits[adv.probe_slot]


class LocalModel:
    """White-box local copy: full traces, prefix caches, forced routing."""

    def __init__(
        self,
        model: ToyMoEModel,
        base_router: RouterConfig,
        ledger: Optional[QueryLedger] = None,
    ):
        self.model = model
        self.base_router = base_router
        self.ledger = ledger if ledger is not None else QueryLedger()

    def query(self, batch: Batch, capture_trace: bool = True) -> ForwardResult:
        self.ledger.local_queries += 1
        config = resized_config(self.base_router, batch)
        return self.model.forward_batch(batch, config, capture_trace=capture_trace)

    def layer0_priorities(self, sequence: Sequence[int]) -> np.ndarray:
        """Quantized layer-0 gate probabilities for one standalone sequence."""
        self.ledger.local_queries += 1
        batch = Batch([list(sequence)])
        probs = self.model.layer0_gate_probabilities(
            batch, self.base_router.quantization
        )
        return probs[: len(sequence)]

    def layer0_priorities_batch(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        """Layer-0 gate probabilities for equal-length sequences, (n, L, E)."""
        self.ledger.local_queries += len(sequences)
        batch = Batch([list(s) for s in sequences])
        probs = self.model.layer0_gate_probabilities(
            batch, self.base_router.quantization
        )
        n = len(sequences)
        return probs.reshape(n, batch.L, -1)

    def query_adversarial(
        self,
        adv: AdversarialBatch,
        victim_sequence: Optional[Sequence[int]] = None,
        capture_trace: bool = True,
    ) -> tuple[ForwardResult, Batch]:
        batch = adv.to_batch(victim_sequence=victim_sequence)
        return self.query(batch, capture_trace=capture_trace), batch

    def build_cache(self, batch: Batch, extend_seq: int) -> PrefixCache:
        self.ledger.local_queries += 1
        config = resized_config(self.base_router, batch)
        return self.model.build_prefix_cache(batch, config, extend_seq)

    def forced(self, cache: PrefixCache, token: int, path: np.ndarray) -> np.ndarray:
        self.ledger.local_queries += 1
        return self.model.forward_with_forced_path(cache, token, path)

    def forced_batch(
        self, cache: PrefixCache, token: int, paths: np.ndarray
    ) -> np.ndarray:
        """One local query per candidate path, evaluated vectorized."""
        self.ledger.local_queries += int(paths.shape[0])
        return self.model.forward_with_forced_paths_batch(cache, token, paths)

    def predict_path(
        self, cache: PrefixCache, token: int, layer0_bits: np.ndarray
    ) -> np.ndarray:
        self.ledger.local_queries += 1
        return self.model.predict_path_with_layer0(cache, token, layer0_bits)

    def extend(self, cache: PrefixCache, token: int) -> np.ndarray:
        self.ledger.local_queries += 1
        return self.model.extend_cache(cache, token)
