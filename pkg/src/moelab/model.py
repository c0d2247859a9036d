"""Toy decoder transformer with expert-choice MoE layers.

Architecture per layer: pre-norm single-head causal attention, then a
mixture-of-experts block routed across the whole flat batch. Attention is
strictly per-sequence, so the only cross-sequence coupling is the routing
contest - which is the phenomenon under study. Weights are seeded and
immutable; forward passes are pure.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .numerics import (
    QuantizationPolicy,
    QuantizationSite,
    TieMode,
    quantize,
    seeded_init,
    softmax,
)
from .router import (
    ExpertAssignment,
    RouterConfig,
    deprioritize_padding,
    gate,
    padding_multiplier,
    route,
)

__all__ = [
    "PAD_TOKEN",
    "BOS_TOKEN",
    "CHAR_OFFSET",
    "GUESS_ALPHABET",
    "ModelConfig",
    "Batch",
    "RouterTrace",
    "ForwardResult",
    "PrefixCache",
    "ToyMoEModel",
    "encode_text",
    "decode_tokens",
    "guess_vocabulary",
    "save_checkpoint",
    "load_checkpoint",
]

PAD_TOKEN = 0
BOS_TOKEN = 1
CHAR_OFFSET = 2
GUESS_ALPHABET = "abcdefghijklmnopqrstuvwxyz "

_EPS = 1e-8
_MASK64 = 0xFFFFFFFFFFFFFFFF


def encode_text(text: str) -> list[int]:
    """Character-level encoding, BOS prepended."""
    try:
        return [BOS_TOKEN] + [CHAR_OFFSET + GUESS_ALPHABET.index(c) for c in text]
    except ValueError as exc:
        raise InvalidInputError(f"character outside guess alphabet in {text!r}") from exc


def decode_tokens(tokens: Sequence[int]) -> str:
    """Inverse of encode_text; unknown ids render as '?'."""
    out = []
    for t in tokens:
        if t in (PAD_TOKEN, BOS_TOKEN):
            continue
        idx = t - CHAR_OFFSET
        out.append(GUESS_ALPHABET[idx] if 0 <= idx < len(GUESS_ALPHABET) else "?")
    return "".join(out)


def guess_vocabulary() -> list[int]:
    """Token ids of the 27-symbol guess alphabet."""
    return list(range(CHAR_OFFSET, CHAR_OFFSET + len(GUESS_ALPHABET)))


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seeding of the toy model."""

    depth: int = 2
    experts: int = 8
    hidden_dim: int = 32
    vocab_size: int = 64
    seed: int = 0
    max_positions: int = 128
    # Scale of the gating projection: large enough that random tokens reach
    # blocker-grade priorities, small enough that secondary experts keep
    # usable probability mass.
    gate_logit_scale: float = 10.0
    dense_control: bool = False  # replace MoE with one full-capacity expert

    def __post_init__(self):
        if self.depth < 1 or self.hidden_dim < 4:
            raise ConfigurationError("depth >= 1 and hidden_dim >= 4 required")
        if self.experts < 1:
            raise ConfigurationError("need at least 1 expert")
        if self.vocab_size < CHAR_OFFSET + len(GUESS_ALPHABET):
            raise ConfigurationError(
                f"vocab_size must cover the guess alphabet (>= {CHAR_OFFSET + len(GUESS_ALPHABET)})"
            )


class Batch:
    """Padded token batch. Every sequence starts with BOS.

    Padding positions (PAD tokens) and BOS positions are deprioritized in
    routing; final-position logits are read at each sequence's last real token.
    """

    def __init__(self, sequences: Sequence[Sequence[int]], pad_to: Optional[int] = None):
        if not sequences:
            raise InvalidInputError("batch must contain at least one sequence")
        seqs = [list(map(int, s)) for s in sequences]
        for s in seqs:
            if not s or s[0] != BOS_TOKEN:
                raise InvalidInputError("every sequence must start with BOS")
        self.real_lens = np.array([len(s) for s in seqs], dtype=np.int64)
        length = int(self.real_lens.max())
        if pad_to is not None:
            if pad_to < length:
                raise InvalidInputError(f"pad_to={pad_to} shorter than longest sequence ({length})")
            length = pad_to
        self.L = length
        self.B = len(seqs)
        self.tokens = np.full((self.B, self.L), PAD_TOKEN, dtype=np.int64)
        for i, s in enumerate(seqs):
            self.tokens[i, : len(s)] = s
        # BOS rows carry no per-user content; deprioritizing them keeps the
        # all-BOS tie band out of every real buffer contest.
        self.deprioritized = (self.tokens == PAD_TOKEN) | (self.tokens == BOS_TOKEN)
        self.groups = np.repeat(np.arange(self.B, dtype=np.int64), self.L)

    def flat_index(self, seq: int, pos: int) -> int:
        return seq * self.L + pos

    def sequence(self, seq: int) -> list[int]:
        return self.tokens[seq, : self.real_lens[seq]].tolist()

    def replaced(self, seq: int, new_sequence: Sequence[int]) -> "Batch":
        """New batch with one sequence substituted, same padded length."""
        seqs = [self.sequence(i) for i in range(self.B)]
        seqs[seq] = list(new_sequence)
        return Batch(seqs, pad_to=self.L)


@dataclass
class LayerTrace:
    gate_matrix: np.ndarray  # (tokens, experts) post-quantize, post-deprioritize
    assignment: ExpertAssignment


@dataclass
class RouterTrace:
    """Per-layer routing introspection captured during a forward pass."""

    layers: list[LayerTrace]

    def path_of(self, flat_index: int) -> np.ndarray:
        """(experts, depth) binary routing path of one token."""
        return np.stack(
            [layer.assignment.selected[flat_index] for layer in self.layers], axis=1
        ).astype(np.int8)


@dataclass
class ForwardResult:
    final_logits: np.ndarray  # (B, vocab) logits at each sequence's last real token
    trace: Optional[RouterTrace] = None
    full_logits: Optional[np.ndarray] = None  # (B, L, vocab) when requested


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _EPS)


def _fnv1a(name: str) -> int:
    h = 0xCBF29CE484222325
    for b in name.encode():
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class ToyMoEModel:
    """Seeded decoder with D MoE layers; weights immutable after construction."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._causal_cache: dict[int, np.ndarray] = {}
        d = config.hidden_dim
        ff = 2 * d
        self.embed = self._init("embed", (config.vocab_size, d))
        self.pos = self._init("pos", (config.max_positions, d))
        self.wq = [self._init(f"wq{j}", (d, d)) for j in range(config.depth)]
        self.wk = [self._init(f"wk{j}", (d, d)) for j in range(config.depth)]
        self.wv = [self._init(f"wv{j}", (d, d)) for j in range(config.depth)]
        self.wo = [self._init(f"wo{j}", (d, d)) for j in range(config.depth)]
        self.wg = [
            self._init(f"wg{j}", (d, config.experts)) * config.gate_logit_scale
            for j in range(config.depth)
        ]
        self.w1 = [
            np.stack([self._init(f"w1_{j}_{e}", (d, ff)) for e in range(config.experts)])
            for j in range(config.depth)
        ]
        self.w2 = [
            np.stack([self._init(f"w2_{j}_{e}", (ff, d)) for e in range(config.experts)])
            for j in range(config.depth)
        ]

    def _init(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        return seeded_init(shape, _fnv1a(name) ^ (self.config.seed * 0x9E3779B97F4A7C15 & _MASK64))

    # -- forward machinery -------------------------------------------------

    def _expert_out(self, layer: int, expert: int, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1[layer][expert]) @ self.w2[layer][expert]

    def _attention(self, layer: int, h: np.ndarray) -> np.ndarray:
        a_in = _rmsnorm(h)
        q = a_in @ self.wq[layer]
        k = a_in @ self.wk[layer]
        v = a_in @ self.wv[layer]
        d = self.config.hidden_dim
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
        scores += self._causal_bias(h.shape[1])
        weights = softmax(scores, axis=-1, validate=False)
        return (weights @ v) @ self.wo[layer], k, v

    def _causal_bias(self, length: int) -> np.ndarray:
        cached = self._causal_cache.get(length)
        if cached is None:
            cached = np.triu(np.full((length, length), -1e30), k=1)[None, :, :]
            self._causal_cache[length] = cached
        return cached

    def _layer_gate(self, layer: int, flat: np.ndarray, depri: np.ndarray,
                    policy: QuantizationPolicy) -> tuple[np.ndarray, np.ndarray]:
        """Returns (selection priorities, processing weights) for one layer.

        Deprioritization demotes padding/BOS rows in the contest only; the
        weight a selected token is processed with stays its gate probability.
        """
        probs = gate(flat, self.wg[layer], policy)
        priorities = deprioritize_padding(probs, padding_multiplier(depri))
        return priorities, probs

    def forward_batch(
        self,
        batch: Batch,
        router_config: RouterConfig,
        capture_trace: bool = False,
        rng: Optional[np.random.Generator] = None,
        full_logits: bool = False,
    ) -> ForwardResult:
        """Run the batch; returns final-position logits per sequence.

        ``capture_trace`` exposes per-layer gate matrices and expert buffers
        for tests and local-attacker tooling; the remote facade never uses it.
        """
        cfg = self.config
        self._check_capacity(batch, router_config)
        policy = router_config.quantization
        h = self.embed[batch.tokens] + self.pos[: batch.L][None, :, :]
        depri = batch.deprioritized.reshape(-1)
        layers: list[LayerTrace] = []

        for j in range(cfg.depth):
            attn, _, _ = self._attention(j, h)
            if policy.site is QuantizationSite.ATTENTION_OUTPUTS:
                attn = quantize(attn, policy)
            h = h + attn

            m_in = _rmsnorm(h)
            flat = m_in.reshape(-1, cfg.hidden_dim)
            moe_flat = np.zeros_like(flat)
            if cfg.dense_control:
                moe_flat = self._expert_out(j, 0, flat)
                if capture_trace:
                    tokens_total = flat.shape[0]
                    sel = np.ones((tokens_total, 1), dtype=bool)
                    assignment = ExpertAssignment(
                        slots=[np.arange(tokens_total)],
                        weights=[np.ones(tokens_total)],
                        selected=sel,
                        dropped=~sel.any(axis=1),
                    )
                    layers.append(LayerTrace(np.ones((tokens_total, 1)), assignment))
            else:
                g, probs = self._layer_gate(j, flat, depri, policy)
                assignment = route(
                    g, router_config, groups=batch.groups, rng=rng, weight_matrix=probs
                )
                for e in range(cfg.experts):
                    idx = assignment.slots[e]
                    if idx.size == 0:
                        continue
                    out = self._expert_out(j, e, flat[idx])
                    moe_flat[idx] += out * assignment.weights[e][:, None]
                if capture_trace:
                    layers.append(LayerTrace(g, assignment))
            h = h + moe_flat.reshape(h.shape)

        logits = _rmsnorm(h) @ self.embed.T
        rows = np.arange(batch.B)
        final = logits[rows, batch.real_lens - 1]
        return ForwardResult(
            final_logits=final,
            trace=RouterTrace(layers) if capture_trace else None,
            full_logits=logits if full_logits else None,
        )

    def layer0_gate_probabilities(
        self, batch: Batch, policy: QuantizationPolicy
    ) -> np.ndarray:
        """Quantized layer-0 gate probabilities, one row per flat token.

        Runs embedding + first attention only; no routing, so it works for
        single sequences whose batch would be below minimum expert capacity.
        Used to score blocker candidates, whose layer-0 priorities depend only
        on their own prefix and so transfer exactly into any batch.
        """
        h = self.embed[batch.tokens] + self.pos[: batch.L][None, :, :]
        attn, _, _ = self._attention(0, h)
        if policy.site is QuantizationSite.ATTENTION_OUTPUTS:
            attn = quantize(attn, policy)
        h = h + attn
        flat = _rmsnorm(h).reshape(-1, self.config.hidden_dim)
        return gate(flat, self.wg[0], policy)

    def _check_capacity(self, batch: Batch, router_config: RouterConfig) -> None:
        cap = router_config.capacity
        if cap.batch_size != batch.B or cap.max_seq_len != batch.L:
            raise ConfigurationError(
                f"router capacity ({cap.batch_size}x{cap.max_seq_len}) does not match "
                f"batch ({batch.B}x{batch.L}); resize the config for this batch"
            )

    # -- prefix cache and forced-path execution ----------------------------

    def build_prefix_cache(
        self,
        batch: Batch,
        router_config: RouterConfig,
        extend_seq: int,
        rng: Optional[np.random.Generator] = None,
    ) -> "PrefixCache":
        """Cache attention K/V and gate state for extending one sequence.

        The extension slot is ``extend_seq``'s next position, which must be an
        alignment-padding slot of the cached batch (the padding sequence
        guarantees headroom in adversarial batches).
        """
        cfg = self.config
        self._check_capacity(batch, router_config)
        pos = int(batch.real_lens[extend_seq])
        if pos >= batch.L:
            raise InvalidInputError("no padded headroom to extend the target sequence")
        policy = router_config.quantization
        h = self.embed[batch.tokens] + self.pos[: batch.L][None, :, :]
        depri = batch.deprioritized.reshape(-1)
        keys, vals, gates, assigns = [], [], [], []
        for j in range(cfg.depth):
            attn, k, v = self._attention(j, h)
            if policy.site is QuantizationSite.ATTENTION_OUTPUTS:
                attn = quantize(attn, policy)
            keys.append(k)
            vals.append(v)
            h = h + attn
            m_in = _rmsnorm(h)
            flat = m_in.reshape(-1, cfg.hidden_dim)
            g, probs = self._layer_gate(j, flat, depri, policy)
            assignment = route(
                g, router_config, groups=batch.groups, rng=rng, weight_matrix=probs
            )
            moe_flat = np.zeros_like(flat)
            for e in range(cfg.experts):
                idx = assignment.slots[e]
                if idx.size == 0:
                    continue
                moe_flat[idx] += self._expert_out(j, e, flat[idx]) * assignment.weights[e][:, None]
            gates.append(g)
            assigns.append(assignment)
            h = h + moe_flat.reshape(h.shape)
        return PrefixCache(
            model=self,
            router_config=router_config,
            batch=batch,
            extend_seq=extend_seq,
            extend_pos=pos,
            keys=keys,
            values=vals,
            gate_matrices=gates,
            assignments=assigns,
        )

    def forward_with_forced_path(
        self, cache: "PrefixCache", token: int, path: np.ndarray
    ) -> np.ndarray:
        """Append ``token`` with its expert membership forced to ``path``.

        ``path`` is (experts, depth); bit (e, j) = 1 means expert e processes
        the token at layer j, bypassing the top-k contest. An all-zero column
        drops the token at that layer (residual only). The frozen prefix makes
        this the fast primitive for path-table construction.
        """
        path = np.asarray(path)
        cfg = self.config
        if path.shape != (cfg.experts, cfg.depth):
            raise InvalidInputError(
                f"path must be ({cfg.experts}, {cfg.depth}), got {path.shape}"
            )
        logits, _ = self._extend(cache, token, forced_path=path)
        return logits

    def extend_cache(self, cache: "PrefixCache", token: int) -> np.ndarray:
        """Append ``token`` with routing decided by the frozen-gate contests."""
        logits, _ = self._extend(cache, token, forced_path=None)
        return logits

    def forward_with_forced_paths_batch(
        self, cache: "PrefixCache", token: int, paths: np.ndarray
    ) -> np.ndarray:
        """Vectorized :meth:`forward_with_forced_path` over (n, E, D) paths.

        All rows share the cached prefix; per-layer attention and expert MLPs
        run batched across the candidate paths, which is what makes path-table
        construction cheap.
        """
        cfg = self.config
        paths = np.asarray(paths)
        n = paths.shape[0]
        policy = cache.router_config.quantization
        s, p = cache.extend_seq, cache.extend_pos
        d = cfg.hidden_dim
        h = np.tile(self.embed[int(token)] + self.pos[p], (n, 1))
        for j in range(cfg.depth):
            a_in = _rmsnorm(h)
            q = a_in @ self.wq[j]
            k_self = a_in @ self.wk[j]
            v_self = a_in @ self.wv[j]
            prefix_k = cache.keys[j][s, :p]
            prefix_v = cache.values[j][s, :p]
            scores = np.concatenate(
                [q @ prefix_k.T, np.sum(q * k_self, axis=1, keepdims=True)], axis=1
            ) / np.sqrt(d)
            w = softmax(scores, axis=-1, validate=False)
            attn = (w[:, :p] @ prefix_v + w[:, p:] * v_self) @ self.wo[j]
            if policy.site is QuantizationSite.ATTENTION_OUTPUTS:
                attn = quantize(attn, policy)
            h = h + attn

            m_in = _rmsnorm(h)
            gate_rows = softmax(m_in @ self.wg[j], validate=False)
            if policy.site is QuantizationSite.ROUTER_PROBABILITIES:
                gate_rows = quantize(gate_rows, policy)
            moe = np.zeros_like(m_in)
            for e in range(cfg.experts):
                mask = paths[:, e, j] == 1
                if not mask.any():
                    continue
                out = self._expert_out(j, e, m_in[mask])
                moe[mask] += out * gate_rows[mask, e][:, None]
            h = h + moe
        return _rmsnorm(h) @ self.embed.T

    def predict_path_with_layer0(
        self, cache: "PrefixCache", token: int, layer0_bits: np.ndarray
    ) -> np.ndarray:
        """Predicted routing path when layer-0 membership is pinned.

        Layer 0 follows ``layer0_bits``; deeper layers route through the
        frozen-gate contests, capturing the cascade a conditional drop
        induces. This is how the attacker centers the path table on both
        hypothesized outcomes without touching the target model.
        """
        _, path = self._extend(
            cache, token, forced_path=None, layer0_override=np.asarray(layer0_bits)
        )
        return path

    def _extend(
        self,
        cache: "PrefixCache",
        token: int,
        forced_path: Optional[np.ndarray],
        layer0_override: Optional[np.ndarray] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        policy = cache.router_config.quantization
        s, p = cache.extend_seq, cache.extend_pos
        flat_idx = cache.batch.flat_index(s, p)
        d = cfg.hidden_dim
        h = self.embed[int(token)] + self.pos[p]
        realized = np.zeros((cfg.experts, cfg.depth), dtype=np.int8)
        for j in range(cfg.depth):
            a_in = _rmsnorm(h)
            q = a_in @ self.wq[j]
            k_self = a_in @ self.wk[j]
            v_self = a_in @ self.wv[j]
            keys = np.vstack([cache.keys[j][s, :p], k_self])
            vals = np.vstack([cache.values[j][s, :p], v_self])
            weights = softmax(keys @ q / np.sqrt(d), axis=-1)
            attn = (weights @ vals) @ self.wo[j]
            if policy.site is QuantizationSite.ATTENTION_OUTPUTS:
                attn = quantize(attn, policy)
            h = h + attn

            m_in = _rmsnorm(h)
            gate_row = softmax(m_in @ self.wg[j])
            if policy.site is QuantizationSite.ROUTER_PROBABILITIES:
                gate_row = quantize(gate_row, policy)
            moe = np.zeros(d)
            for e in range(cfg.experts):
                if forced_path is not None:
                    member = bool(forced_path[e, j])
                elif j == 0 and layer0_override is not None:
                    member = bool(layer0_override[e])
                else:
                    member = cache.contest_membership(j, e, gate_row[e], flat_idx)
                if member:
                    realized[e, j] = 1
                    moe += gate_row[e] * self._expert_out(j, e, m_in[None, :])[0]
            h = h + moe
        return _rmsnorm(h) @ self.embed.T, realized


@dataclass
class PrefixCache:
    """Frozen per-layer state of a batch awaiting one appended token."""

    model: ToyMoEModel
    router_config: RouterConfig
    batch: Batch
    extend_seq: int
    extend_pos: int
    keys: list[np.ndarray]
    values: list[np.ndarray]
    gate_matrices: list[np.ndarray]
    assignments: list[ExpertAssignment]

    def contest_membership(self, layer: int, expert: int, value: float, flat_idx: int) -> bool:
        """Would a row of ``value`` at ``flat_idx`` win a slot in the frozen column?

        Replaces the cached (padding) row at flat_idx and applies the
        stable-ascending rule: selected iff fewer than K rows rank ahead.
        """
        if self.router_config.tie_mode is not TieMode.STABLE_ASCENDING:
            raise ConfigurationError("frozen-contest extension supports stable tie mode only")
        col = self.gate_matrices[layer][:, expert]
        k = self.router_config.k
        higher = int(np.sum(col > value)) - int(col[flat_idx] > value)
        tied_before = int(np.sum(col[:flat_idx] == value))
        return higher + tied_before < k

    def estimated_path(self, flat_idx: Optional[int] = None) -> np.ndarray:
        """Routing path of a cached token per the frozen assignments."""
        idx = self.batch.flat_index(self.extend_seq, self.extend_pos) if flat_idx is None else flat_idx
        return np.stack(
            [a.selected[idx] for a in self.assignments], axis=1
        ).astype(np.int8)


# -- checkpointing ---------------------------------------------------------


def save_checkpoint(model: ToyMoEModel, path: str) -> None:
    """Write weights + config to a flat .npz archive keyed by the config."""
    arrays = {"embed": model.embed, "pos": model.pos}
    for j in range(model.config.depth):
        arrays[f"wq{j}"] = model.wq[j]
        arrays[f"wk{j}"] = model.wk[j]
        arrays[f"wv{j}"] = model.wv[j]
        arrays[f"wo{j}"] = model.wo[j]
        arrays[f"wg{j}"] = model.wg[j]
        arrays[f"w1_{j}"] = model.w1[j]
        arrays[f"w2_{j}"] = model.w2[j]
    cfg = dataclasses.asdict(model.config)
    np.savez(path, __config__=np.frombuffer(json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str) -> ToyMoEModel:
    """Rebuild a model from a checkpoint; arrays must match the stored config."""
    with np.load(path) as data:
        cfg_json = bytes(data["__config__"]).decode()
        config = ModelConfig(**json.loads(cfg_json))
        model = ToyMoEModel(config)
        model.embed = data["embed"]
        model.pos = data["pos"]
        for j in range(config.depth):
            model.wq[j] = data[f"wq{j}"]
            model.wk[j] = data[f"wk{j}"]
            model.wv[j] = data[f"wv{j}"]
            model.wo[j] = data[f"wo{j}"]
            model.wg[j] = data[f"wg{j}"]
            model.w1[j] = data[f"w1_{j}"]
            model.w2[j] = data[f"w2_{j}"]
    return model
