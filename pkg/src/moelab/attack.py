"""Attack primitives and the two extraction attacks.

Buffer shaping places the attacker's guess token exactly at the target
expert's capacity edge; a correct guess ties with the victim's token there,
so swapping the probe/victim order flips which copy is processed. Path
recovery attributes the observed output change to that specific flip.

All local work runs against the attacker's white-box copy; the target
facade is only ever asked for probe logits, two queries per attempt.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .batch import (
    AdversarialBatch,
    LocalModel,
    TargetModel,
    compose_adversarial_batch,
    resized_config,
)
from .errors import (
    BlockerUnavailableError,
    InvalidInputError,
    PathRecoveryError,
    PositionUndefinedError,
)
from .model import BOS_TOKEN, Batch, decode_tokens, guess_vocabulary
from .router import QueryOrder

__all__ = [
    "AttackParams",
    "BlockerSpec",
    "PathTable",
    "GuessOutcome",
    "TokenRecovery",
    "ExtractionResult",
    "blocker_spec_for",
    "find_blocking_sequences",
    "min_position",
    "build_path_table",
    "recover_path",
    "classify_guess",
    "verify_guess",
    "oracle_attack",
    "leakage_attack",
    "AttackSession",
]


@dataclass(frozen=True)
class AttackParams:
    """Attacker-side knobs; defaults mirror the evaluation configuration."""

    batch_size: int = 32
    guess_vocab: tuple[int, ...] = tuple(guess_vocabulary())
    paddings: tuple[int, ...] = (20, 24, 30, 40, 50, 60)
    phi: float = 0.85
    beta: int = 4
    epsilon: float = 1e-4
    blocker_max_attempts: int = 10_000
    blocker_vocab: Optional[tuple[int, ...]] = None
    experts_order: Optional[tuple[int, ...]] = None
    min_signal_priority: float = 0.001
    # Quantization collisions (a wrong guess tying with the victim's token by
    # chance) concentrate in low-priority columns, which a wrong guess's scan
    # always walks down into; capping the experts tried per guess bounds that
    # exposure while true guesses keep firing at their top experts.
    max_experts_per_guess: int = 3
    reject_above: Optional[int] = None
    seed: int = 0


@dataclass(frozen=True)
class BlockerSpec:
    """Recipe for blocking sequences aimed at one expert."""

    target_expert: int
    phi: float
    nb: int  # max blocker tokens per sequence
    bsl: int  # blocking sequence length budget (excluding BOS)
    chunk_len: int
    restricted_vocab: tuple[int, ...]
    max_attempts: int = 10_000


def blocker_spec_for(
    expert: int,
    capacity_k: int,
    batch_size: int,
    padding_len: int,
    restricted_vocab: Sequence[int],
    phi: float = 0.85,
    max_attempts: int = 10_000,
) -> BlockerSpec:
    """Derive nb = floor((K-1)/(B-3)) and the chunk geometry for one expert."""
    if batch_size < 4:
        raise InvalidInputError("batch_size must be >= 4 (need B-3 blockers)")
    nb = (capacity_k - 1) // (batch_size - 3)
    if nb < 1:
        raise InvalidInputError(
            f"capacity {capacity_k} too small for {batch_size - 3} blocking sequences"
        )
    bsl = padding_len - 1  # BOS + bsl tokens never exceed the padding length
    chunk_len = max(1, bsl // nb)
    return BlockerSpec(
        target_expert=expert,
        phi=phi,
        nb=nb,
        bsl=bsl,
        chunk_len=chunk_len,
        restricted_vocab=tuple(restricted_vocab),
        max_attempts=max_attempts,
    )


def find_blocking_sequences(
    expert: int,
    spec: BlockerSpec,
    local: LocalModel,
    count: int,
    rng: np.random.Generator,
) -> list[list[int]]:
    """Generate ``count`` blocking sequences of nb high-affinity chunks each.

    Chunks are random draws from the restricted vocabulary, accepted when at
    least one token scores >= phi for the target expert, and trimmed at their
    last qualifying token so no trailing filler survives.
    """
    score_group = 64  # candidate chunks scored per batched forward
    sequences = []
    for _ in range(count):
        seq = [BOS_TOKEN]
        for _chunk in range(spec.nb):
            accepted = False
            attempts_left = spec.max_attempts
            while attempts_left > 0 and not accepted:
                m = min(score_group, attempts_left)
                attempts_left -= m
                draws = rng.choice(spec.restricted_vocab, size=(m, spec.chunk_len))
                candidates = [seq + row.tolist() for row in draws]
                pri = local.layer0_priorities_batch(candidates)[:, len(seq):, expert]
                qualifying = pri >= spec.phi
                rows = np.flatnonzero(qualifying.any(axis=1))
                if rows.size:
                    row = int(rows[0])
                    last = int(np.flatnonzero(qualifying[row])[-1])
                    seq = candidates[row][: len(seq) + last + 1]
                    accepted = True
            if not accepted:
                raise BlockerUnavailableError(expert, spec.max_attempts)
        sequences.append(seq)
    return sequences


# -- buffer shaping ----------------------------------------------------------


@dataclass
class _ShapeContext:
    """Shaping arithmetic for one (probe, expert, padding) combination.

    Layer-0 priorities depend only on a token's own sequence prefix, so the
    column the target expert sees is assembled from per-sequence priority
    rows with no batch simulation. Trailing blocker tokens can be removed
    without disturbing any other row (causal attention, per-sequence), so
    every trim level is exact arithmetic on these parts. Deprioritized rows
    (BOS, padding) sit below any eligible guess priority and never count.
    """

    adv: AdversarialBatch
    expert: int
    guess_priority: float
    above: int  # real rows ranked ahead of the guess at full stock
    capacity_k: int
    blocker_values: list[np.ndarray]  # per blocker sequence, positions 1..len-1
    tied_rows: int = 0  # real rows sharing the guess's exact priority

    def shape_to(self, position: int) -> Optional[AdversarialBatch]:
        """Trim trailing blocker tokens until exactly ``position`` rows rank ahead."""
        if position < 0 or self.above < position or self.guess_priority <= 0.0:
            return None
        blockers = self.adv.blocker_sequences()
        above = self.above
        # Pop from the last blocker sequence backwards; each popped row either
        # ranked ahead of the guess (count drops by one) or did not. Blocker
        # rows precede the probe in the flat batch, so ties rank ahead too.
        for b in range(len(blockers) - 1, -1, -1):
            values = self.blocker_values[b]
            while above > position and len(blockers[b]) > 1:
                v = values[len(blockers[b]) - 2]  # value of the trailing token
                blockers[b].pop()
                if v >= self.guess_priority:
                    above -= 1
            if above == position:
                break
        if above != position:
            return None
        return self.adv.with_blockers(blockers)


def _make_context(
    session: "AttackSession",
    probe: Sequence[int],
    probe_priorities: np.ndarray,
    padding_len: int,
    expert: int,
    victim_len: int,
) -> Optional[_ShapeContext]:
    stock = session.blockers_for(expert, padding_len, victim_len)
    if stock is None:
        return None
    blockers, blocker_priors = stock
    adv = compose_adversarial_batch(
        probe, blockers, padding_len, QueryOrder.PROBE_FIRST, victim_len=victim_len
    )
    p_g = float(probe_priorities[-1, expert])
    # Blocker rows and probe prefix rows all precede the guess in flat order,
    # so equal-priority rows among them rank ahead under stable selection.
    above = int(np.sum(probe_priorities[1:-1, expert] >= p_g))
    tied = int(np.sum(probe_priorities[1:-1, expert] == p_g))
    values = []
    for pri in blocker_priors:
        col = pri[1:, expert]
        above += int(np.sum(col >= p_g))
        tied += int(np.sum(col == p_g))
        values.append(col)
    k = resized_config(
        session.local.base_router, adv.to_batch()
    ).k
    return _ShapeContext(
        adv=adv,
        expert=expert,
        guess_priority=p_g,
        above=above,
        capacity_k=k,
        blocker_values=values,
        tied_rows=tied,
    )


def min_position(
    probe: Sequence[int],
    blockers: Sequence[Sequence[int]],
    padding_len: int,
    expert: int,
    local: LocalModel,
    victim_len: int = 0,
) -> int:
    """Buffer slot the probe's last token occupies locally with an empty victim.

    Raises :class:`PositionUndefinedError` when the token is not selected by
    the target expert at all (callers try a longer padding length).
    """
    probe = list(probe)
    pri = local.layer0_priorities(probe)
    p_g = float(pri[-1, expert])
    above = int(np.sum(pri[1:-1, expert] >= p_g))
    for seq in blockers:
        bp = local.layer0_priorities(seq)
        above += int(np.sum(bp[1:, expert] >= p_g))
    adv = compose_adversarial_batch(
        probe, blockers, padding_len, QueryOrder.PROBE_FIRST, victim_len=victim_len
    )
    k = resized_config(local.base_router, adv.to_batch()).k
    if above >= k:
        raise PositionUndefinedError(
            f"probe token ranks {above} >= K={k} for expert {expert}"
        )
    return above


# -- routing-path recovery ---------------------------------------------------


@dataclass
class PathTable:
    """Map from probe output logits to candidate routing paths.

    Entries are ordered by ascending packed bit pattern so nearest-match ties
    resolve deterministically to the lowest pattern.
    """

    paths: np.ndarray  # (entries, experts, depth) int8
    logits: np.ndarray  # (entries, vocab)
    tolerance: float
    beta: int
    estimated: np.ndarray

    def __len__(self) -> int:
        return self.paths.shape[0]


def _ball_masks(est_bits: np.ndarray, beta: int) -> list[np.ndarray]:
    """All bit patterns within Hamming distance beta of the estimate."""
    nd = est_bits.size
    beta = min(beta, nd)
    members = []
    for radius in range(beta + 1):
        for flips in combinations(range(nd), radius):
            bits = est_bits.copy()
            for f in flips:
                bits[f] ^= 1
            members.append(bits)
    members.sort(key=lambda b: int("".join(map(str, b.tolist())), 2))
    return members


def build_path_table(
    local: LocalModel,
    adv: AdversarialBatch,
    probe: Sequence[int],
    beta: int,
    estimated_path: np.ndarray,
    tolerance: float,
    victim_sequence: Optional[Sequence[int]] = None,
    flip_expert_layer0: Optional[int] = None,
) -> PathTable:
    """Forced-path outputs for every path within Hamming-beta of the estimate.

    The prefix cache is built from the adversarial batch with the probe's
    final token removed; each candidate path then costs one forced
    single-token pass. beta = N*D recovers exhaustive enumeration.

    ``victim_sequence`` optionally fills the victim slot of the cached batch
    with a hypothesis (the known prefix plus the guess), so prefix-twin tie
    resolutions in the cache match the order under test.

    ``flip_expert_layer0`` adds a second ball around the re-predicted path
    with that expert's layer-0 bit flipped: a conditional drop cascades
    through later layers, landing outside a single small ball.
    """
    probe = list(probe)
    estimated_path = np.asarray(estimated_path, dtype=np.int8)
    experts, depth = estimated_path.shape
    base = adv.to_batch(victim_sequence=victim_sequence).replaced(
        adv.probe_slot, probe[:-1]
    )
    cache = local.build_cache(base, adv.probe_slot)
    members = {m.tobytes(): m for m in _ball_masks(estimated_path.reshape(-1), beta)}
    if flip_expert_layer0 is not None:
        flipped = estimated_path[:, 0].copy()
        flipped[flip_expert_layer0] ^= 1
        counterpart = local.predict_path(cache, probe[-1], flipped).astype(np.int8)
        for m in _ball_masks(counterpart.reshape(-1), beta):
            members.setdefault(m.tobytes(), m)
    masks = sorted(
        members.values(), key=lambda b: int("".join(map(str, b.tolist())), 2)
    )
    paths = np.stack([m.reshape(experts, depth) for m in masks])
    logits = local.forced_batch(cache, probe[-1], paths)
    return PathTable(
        paths=paths,
        logits=logits,
        tolerance=tolerance,
        beta=beta,
        estimated=estimated_path,
    )


def _nearest_entry(table: PathTable, observed: np.ndarray) -> tuple[int, int]:
    """(index, mismatch count) of the closest entry under the L0-style metric."""
    if len(table) == 0:
        raise PathRecoveryError("empty path table")
    mismatches = np.sum(np.abs(table.logits - observed) > table.tolerance, axis=1)
    best = int(np.argmin(mismatches))
    return best, int(mismatches[best])


def recover_path(
    table: PathTable, observed: np.ndarray, reject_above: Optional[int] = None
) -> np.ndarray:
    """Entry whose logits differ from ``observed`` on the fewest coordinates.

    Coordinates within ``table.tolerance`` do not count as differing; ties go
    to the lowest packed bit pattern. A best match with more than
    ``reject_above`` mismatched coordinates raises :class:`PathRecoveryError`.
    """
    best, count = _nearest_entry(table, observed)
    bound = reject_above if reject_above is not None else observed.size // 4
    if count > bound:
        raise PathRecoveryError(
            f"best match misses {count} coordinates (> {bound})"
        )
    return table.paths[best]


@dataclass
class GuessOutcome:
    """Verdict for one (guess, position) probe pair.

    ``correct`` holds exactly when the recovered probe-first path routes the
    token to the target expert at layer 0 and the victim-first path does not.
    """

    guess: int
    position: int
    correct: bool
    path_first: Optional[np.ndarray] = None
    path_second: Optional[np.ndarray] = None


def classify_guess(
    guess: int,
    position: int,
    out1: np.ndarray,
    out2: np.ndarray,
    expert: int,
    table: PathTable,
    epsilon: float,
    reject_above: Optional[int] = None,
    table2: Optional[PathTable] = None,
) -> GuessOutcome:
    """Full verdict with the recovered paths for both query orders.

    Near-identical outputs short-circuit to incorrect without path recovery;
    unrecoverable paths also count as incorrect. With ``table2`` (a table
    conditioned on the victim-first order), the second output is recovered
    from it, and the observed output difference must additionally match the
    difference the two recovered entries predict. The victim's unknown
    suffix perturbs both orders identically (its rows tie with nothing, so
    their contests are order-invariant), and differencing cancels it.
    """
    if float(np.max(np.abs(out1 - out2))) <= epsilon:
        return GuessOutcome(guess=guess, position=position, correct=False)
    second = table2 if table2 is not None else table
    try:
        if table2 is None:
            p1 = recover_path(table, out1, reject_above)
            p2 = recover_path(second, out2, reject_above)
            ok = bool(p1[expert, 0] == 1 and p2[expert, 0] == 0)
            return GuessOutcome(guess, position, ok, p1, p2)
        i1, _ = _nearest_entry(table, out1)
        i2, _ = _nearest_entry(second, out2)
        p1, p2 = table.paths[i1], second.paths[i2]
        if not (p1[expert, 0] == 1 and p2[expert, 0] == 0):
            return GuessOutcome(guess, position, False, p1, p2)
        # The observed order-swap difference must align with the difference
        # the recovered entries predict. Cosine alignment is scale-free, so
        # residual suffix interference (which moves both orders together and
        # largely cancels) does not mask a genuine flip, while prefix-twin
        # noise misattributed to the target expert stays near orthogonal.
        delta_obs = out1 - out2
        delta_pred = table.logits[i1] - second.logits[i2]
        denom = float(np.linalg.norm(delta_obs) * np.linalg.norm(delta_pred))
        if denom == 0.0:
            return GuessOutcome(guess, position, False, p1, p2)
        cosine = float(delta_obs @ delta_pred) / denom
        return GuessOutcome(guess, position, cosine >= 0.5, p1, p2)
    except PathRecoveryError:
        return GuessOutcome(guess=guess, position=position, correct=False)


def verify_guess(
    out1: np.ndarray,
    out2: np.ndarray,
    expert: int,
    table: PathTable,
    epsilon: float,
    reject_above: Optional[int] = None,
    table2: Optional[PathTable] = None,
) -> bool:
    """True iff the probe token reached the target expert at layer 0 only in
    the probe-first query - the tie signature. See :func:`classify_guess`.
    """
    return classify_guess(
        -1, -1, out1, out2, expert, table, epsilon, reject_above, table2
    ).correct


# -- attack orchestration ----------------------------------------------------


class AttackSession:
    """Caches blocker sequences and their priorities across one extraction."""

    def __init__(self, local: LocalModel, params: AttackParams):
        self.local = local
        self.params = params
        self._blockers: dict[
            tuple[int, int], Optional[tuple[list[list[int]], list[np.ndarray]]]
        ] = {}

    def _default_blocker_vocab(self) -> tuple[int, ...]:
        vocab_size = self.local.model.config.vocab_size
        return tuple(range(2, vocab_size))

    def blockers_for(
        self, expert: int, padding_len: int, victim_len: int
    ) -> Optional[tuple[list[list[int]], list[np.ndarray]]]:
        """(sequences, per-sequence priority rows) for (expert, padding)."""
        key = (expert, padding_len)
        if key not in self._blockers:
            p = self.params
            seq_len = max(padding_len, victim_len + 1)
            cap = resized_config(
                self.local.base_router,
                Batch([[BOS_TOKEN]] * p.batch_size, pad_to=seq_len),
            ).k
            vocab = p.blocker_vocab or self._default_blocker_vocab()
            rng = np.random.default_rng((p.seed, expert, padding_len))
            try:
                spec = blocker_spec_for(
                    expert, cap, p.batch_size, padding_len, vocab, p.phi, p.blocker_max_attempts
                )
                seqs = find_blocking_sequences(
                    expert, spec, self.local, p.batch_size - 3, rng
                )
                priors = [self.local.layer0_priorities(s) for s in seqs]
                self._blockers[key] = (seqs, priors)
            except (BlockerUnavailableError, InvalidInputError):
                self._blockers[key] = None
        return self._blockers[key]

    def configs(
        self,
        probe: Optional[Sequence[int]] = None,
        probe_priorities: Optional[np.ndarray] = None,
    ) -> list[tuple[int, int]]:
        """(expert, padding) pairs to try, most promising first.

        A dropped token is observable only through the gate weight it would
        have been processed with, so experts are ordered by the probe token's
        own priority, highest first, and weak-signal experts are skipped.
        An explicit ``experts_order`` overrides this.
        """
        if self.params.experts_order is not None:
            experts: Sequence[int] = self.params.experts_order
        elif probe is not None or probe_priorities is not None:
            # Sub-floor experts leave no usable drop signal; experts the token
            # out-prioritizes too strongly fail buffer shaping and prune
            # themselves at zero query cost.
            if probe_priorities is None:
                probe_priorities = self.local.layer0_priorities(probe)
            pr = probe_priorities[-1]
            order = np.argsort(-pr, kind="stable")
            experts = [
                int(e) for e in order if pr[e] >= self.params.min_signal_priority
            ]
        else:
            experts = range(self.local.model.config.experts)
        return [(e, p) for e in experts for p in self.params.paddings]


def _tolerance(local: LocalModel) -> float:
    return 10.0 ** -(local.base_router.quantization.decimals - 1)


def _reject_bound(local: LocalModel, params: AttackParams) -> int:
    if params.reject_above is not None:
        return params.reject_above
    return local.model.config.vocab_size // 4


@dataclass
class TokenRecovery:
    index: int
    token: int
    expert: int
    padding: int
    position: int
    scan_offset: int
    target_queries: int
    local_queries: int


@dataclass
class ExtractionResult:
    """Outcome of a leakage attack: recovered tokens plus provenance."""

    recovered: list[int]
    per_token: list[TokenRecovery]
    success: bool
    secret_length: int

    @property
    def text(self) -> str:
        return decode_tokens(self.recovered)

    def to_dict(self) -> dict:
        return {
            "recovered": self.recovered,
            "text": self.text,
            "success": self.success,
            "secret_length": self.secret_length,
            "per_token": [dataclasses.asdict(t) for t in self.per_token],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _hypothesis_table(
    session: AttackSession,
    adv: AdversarialBatch,
    probe: list[int],
    radius: int,
    expert: int,
) -> PathTable:
    """Path table for one query order, conditioned on the guess hypothesis.

    The victim slot is filled with the hypothesized message (known prefix +
    guess); the estimate is the probe token's traced path in that local
    simulation, so prefix-twin tie resolutions are baked into the center. A
    second ball around the re-predicted conditional-drop counterpart covers
    the cascade when reality lands on the other side of the boundary.
    """
    local = session.local
    hypothesis = list(probe)
    sim, batch = local.query_adversarial(
        adv, victim_sequence=hypothesis, capture_trace=True
    )
    estimated = sim.trace.path_of(batch.flat_index(adv.probe_slot, len(probe) - 1))
    return build_path_table(
        local, adv, probe, radius, estimated, _tolerance(local),
        victim_sequence=hypothesis, flip_expert_layer0=expert,
    )


def _verify_with_table(
    session: AttackSession,
    probe: list[int],
    expert: int,
    shaped: AdversarialBatch,
    out1: np.ndarray,
    out2: np.ndarray,
    token_index: int = 0,
) -> bool:
    local, params = session.local, session.params
    lq_before = local.ledger.local_queries
    radius = max(0, params.beta - 2)
    swapped = shaped.reordered(QueryOrder.VICTIM_FIRST)
    table1 = _hypothesis_table(session, shaped, probe, radius, expert)
    table2 = _hypothesis_table(session, swapped, probe, radius, expert)
    ok = verify_guess(
        out1, out2, expert, table1, params.epsilon,
        reject_above=_reject_bound(local, params), table2=table2,
    )
    local.ledger.record(
        kind="verification",
        token_index=token_index,
        table_entries=len(table1) + len(table2),
        local_spent=local.ledger.local_queries - lq_before,
        target_spent=2,
        expert=expert,
        verified=bool(ok),
    )
    return ok


def _try_guess(
    session: AttackSession,
    target: TargetModel,
    probe: list[int],
    secret_len: int,
    token_index: int,
) -> Optional[TokenRecovery]:
    """Scan straddle hypotheses for one guess within an M+1 attempt budget.

    Hypothesis t means "t victim tokens rank ahead of the tied pair", so the
    guess is shaped to slot K-1-t. Intrusion counts are a property of the
    expert column, so the scan exhausts every hypothesis at the strongest
    expert first, picking per hypothesis the first padding length whose
    blocker stock makes the slot reachable; leftover budget flows to the
    next expert. Each attempt costs exactly two target queries.
    """
    local, params = session.local, session.params
    guess = probe[-1]
    priorities = local.layer0_priorities(probe)
    contexts: dict[tuple[int, int], Optional[_ShapeContext]] = {}

    def context_for(expert: int, padding: int) -> Optional[_ShapeContext]:
        key = (expert, padding)
        if key not in contexts:
            contexts[key] = _make_context(
                session, probe, priorities, padding, expert, secret_len
            )
        return contexts[key]

    budget = secret_len + 1
    experts = [e for e, _ in session.configs(probe, priorities)]
    seen = set()
    experts = [e for e in experts if not (e in seen or seen.add(e))]
    experts = experts[: params.max_experts_per_guess]

    # If the guess is right, the victim's message equals the probe up to its
    # unknown suffix, so the prefix rows ranking ahead of the tied pair can
    # be counted from the probe's own priorities; only suffix intrusions
    # (at most M - token_index) widen the scan window per expert.
    suffix_len = secret_len - token_index

    for expert in experts:
        p_g = priorities[-1, expert]
        v_hyp = int(np.sum(priorities[1:-1, expert] > p_g))
        for t in range(v_hyp, v_hyp + suffix_len + 1):
            if budget == 0:
                return None
            shaped = None
            position = -1
            for padding in params.paddings:
                ctx = context_for(expert, padding)
                if ctx is None:
                    continue
                position = ctx.capacity_k - 1 - t
                if position < 0:
                    continue
                shaped = ctx.shape_to(position)
                if shaped is not None:
                    break
            if shaped is None:
                continue  # hypothesis unreachable at this expert, costless
            budget -= 1
            out1 = target.query(shaped)
            out2 = target.query(shaped.reordered(QueryOrder.VICTIM_FIRST))
            target.ledger.record(
                kind="attempt", token_index=token_index, guess=guess,
                position=position, expert=expert, padding=padding,
            )
            if float(np.max(np.abs(out1 - out2))) <= params.epsilon:
                continue
            if _verify_with_table(
                session, probe, expert, shaped, out1, out2, token_index=token_index
            ):
                return TokenRecovery(
                    index=token_index,
                    token=guess,
                    expert=expert,
                    padding=padding,
                    position=position,
                    scan_offset=t,
                    target_queries=0,
                    local_queries=0,
                )
    return None


def leakage_attack(
    target: TargetModel,
    local: LocalModel,
    params: AttackParams,
    secret_len: int,
    session: Optional[AttackSession] = None,
) -> ExtractionResult:
    """Token-by-token extraction of the co-batched victim's message.

    For each position of the secret, every guess token is probed at up to
    M+1 buffer straddle hypotheses, two target queries each; the first
    verified guess extends the recovered prefix. Passing a shared
    ``session`` reuses blocking sequences across extractions.
    """
    if session is None:
        session = AttackSession(local, params)
    prefix: list[int] = []
    per_token: list[TokenRecovery] = []
    for token_index in range(1, secret_len + 1):
        tq0 = target.ledger.target_queries
        lq0 = local.ledger.local_queries
        hit = None
        for guess in params.guess_vocab:
            probe = [BOS_TOKEN] + prefix + [int(guess)]
            hit = _try_guess(session, target, probe, secret_len, token_index)
            if hit is not None:
                break
        if hit is None:
            return ExtractionResult(
                recovered=prefix,
                per_token=per_token,
                success=False,
                secret_length=secret_len,
            )
        hit.target_queries = target.ledger.target_queries - tq0
        hit.local_queries = local.ledger.local_queries - lq0
        per_token.append(hit)
        prefix.append(hit.token)
    return ExtractionResult(
        recovered=prefix, per_token=per_token, success=True, secret_length=secret_len
    )


def oracle_attack(
    candidate: Sequence[int],
    target: TargetModel,
    local: LocalModel,
    params: AttackParams,
    session: Optional[AttackSession] = None,
) -> bool:
    """Verify a fully known candidate message with exactly two target queries.

    The candidate fixes the whole adversarial batch, so the boundary position
    is predicted deterministically from local simulation and path recovery is
    bypassed: the two target outputs must differ by the locally rehearsed
    tie-flip pattern. A wrong candidate leaves the batch order-insensitive.
    """
    candidate = [int(c) for c in candidate]
    if not candidate:
        raise InvalidInputError("candidate must be non-empty")
    if session is None:
        session = AttackSession(local, params)
    probe = [BOS_TOKEN] + candidate
    victim = [BOS_TOKEN] + candidate
    secret_len = len(candidate)
    priorities = local.layer0_priorities(probe)

    for expert, padding in session.configs(probe, priorities):
        ctx = _make_context(session, probe, priorities, padding, expert, secret_len)
        if ctx is None or ctx.guess_priority <= 0.0:
            continue
        if ctx.tied_rows:
            # coincidental equal-priority rows would widen the tie band
            # beyond the engineered pair; pick a cleaner expert instead
            continue
        # The candidate fixes the victim's rows exactly: they duplicate the
        # probe's, so the intrusion count ahead of the tied pair is the
        # number of candidate prefix rows strictly outranking the guess.
        p_g = ctx.guess_priority
        intrusions = int(np.sum(priorities[1:-1, expert] > p_g))
        position = ctx.capacity_k - 1 - intrusions
        shaped = ctx.shape_to(position)
        if shaped is None:
            continue
        swapped = shaped.reordered(QueryOrder.VICTIM_FIRST)
        rehearsal1, _ = local.query_adversarial(
            shaped, victim_sequence=victim, capture_trace=False
        )
        rehearsal2, _ = local.query_adversarial(
            swapped, victim_sequence=victim, capture_trace=False
        )
        lp1 = rehearsal1.final_logits[shaped.probe_slot]
        lp2 = rehearsal2.final_logits[swapped.probe_slot]
        if float(np.max(np.abs(lp1 - lp2))) <= params.epsilon:
            continue  # engineered tie does not fire here; try the next config
        out1 = target.query(shaped)
        out2 = target.query(swapped)
        delta_obs = out1 - out2
        delta_pred = lp1 - lp2
        if float(np.max(np.abs(delta_obs))) <= params.epsilon:
            return False
        # Accept when the observed order-swap difference is the predicted
        # tie-flip pattern, in either direction: which copy survives is the
        # tie-breaker's choice, and any stochastic tie-breaking turns that
        # choice into a fair coin. Wrong candidates produce no flip at all.
        denom = float(np.linalg.norm(delta_obs) * np.linalg.norm(delta_pred))
        if denom == 0.0:
            return False
        cosine = float(delta_obs @ delta_pred) / denom
        return abs(cosine) >= 0.5
    return False
