"""Desk-scale laboratory for the expert-choice routing tie-break side channel.

A seeded toy MoE transformer routes tokens with column-wise top-K selection
whose tie handling leaks co-batched data: equal-priority tokens at a buffer
boundary are kept or dropped by batch order. The attack modules extract a
victim's prompt through that channel, token by token.
"""

from .attack import (
    AttackParams,
    AttackSession,
    ExtractionResult,
    PathTable,
    build_path_table,
    find_blocking_sequences,
    leakage_attack,
    min_position,
    oracle_attack,
    recover_path,
    verify_guess,
)
from .batch import (
    AdversarialBatch,
    LocalModel,
    QueryLedger,
    SequenceRole,
    TargetModel,
    compose_adversarial_batch,
)
from .model import (
    Batch,
    ModelConfig,
    ToyMoEModel,
    decode_tokens,
    encode_text,
    guess_vocabulary,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import (
    QuantizationPolicy,
    QuantizationSite,
    TieMode,
    quantize,
    seeded_init,
    softmax,
    stable_topk,
)
from .router import (
    CapacityParams,
    QueryOrder,
    RouterConfig,
    decide_buffer_outcome,
    deprioritize_padding,
    expert_capacity,
    gate,
    route,
)

__all__ = [
    "AttackParams",
    "AttackSession",
    "ExtractionResult",
    "PathTable",
    "build_path_table",
    "find_blocking_sequences",
    "leakage_attack",
    "min_position",
    "oracle_attack",
    "recover_path",
    "verify_guess",
    "AdversarialBatch",
    "LocalModel",
    "QueryLedger",
    "SequenceRole",
    "TargetModel",
    "compose_adversarial_batch",
    "Batch",
    "ModelConfig",
    "ToyMoEModel",
    "decode_tokens",
    "encode_text",
    "guess_vocabulary",
    "load_checkpoint",
    "save_checkpoint",
    "QuantizationPolicy",
    "QuantizationSite",
    "TieMode",
    "quantize",
    "seeded_init",
    "softmax",
    "stable_topk",
    "CapacityParams",
    "QueryOrder",
    "RouterConfig",
    "decide_buffer_outcome",
    "deprioritize_padding",
    "expert_capacity",
    "gate",
    "route",
]

__version__ = "0.1.0"
