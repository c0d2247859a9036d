"""Expert-choice router tests: capacity, gating, selection, tie handling."""

import numpy as np
import pytest

from moelab.errors import ConfigurationError
from moelab.numerics import QuantizationPolicy, QuantizationSite, TieMode, quantize, softmax, stable_topk
from moelab.router import (
    PADDING_SCALE,
    CapacityParams,
    QueryOrder,
    RouterConfig,
    decide_buffer_outcome,
    deprioritize_padding,
    expert_capacity,
    gate,
    padding_multiplier,
    route,
)


def cap(b, l, g, n):
    return CapacityParams(batch_size=b, max_seq_len=l, capacity_factor=g, experts=n)


class TestExpertCapacity:
    @pytest.mark.parametrize(
        "padding,expected",
        [(20, 80), (24, 96), (30, 120), (40, 160), (50, 200), (60, 240)],
    )
    def test_reference_pairs(self, padding, expected):
        assert expert_capacity(cap(32, padding, 1.0, 8)) == expected

    def test_single_expert_takes_everything(self):
        assert expert_capacity(cap(6, 10, 1.0, 1)) == 60

    def test_fractional_factor(self):
        assert expert_capacity(cap(4, 8, 0.5, 4)) == 4

    def test_floor_applies(self):
        assert expert_capacity(cap(3, 5, 1.0, 4)) == 3  # 15/4 -> 3

    def test_below_one_rejected(self):
        with pytest.raises(ConfigurationError):
            expert_capacity(cap(1, 1, 0.5, 4))


class TestGate:
    POLICY = QuantizationPolicy(decimals=5)

    def test_identical_rows_for_identical_representations(self):
        w = np.random.default_rng(0).normal(size=(8, 4))
        hidden = np.vstack([np.ones((1, 8)), np.zeros((1, 8)), np.ones((1, 8))])
        g = gate(hidden, w, self.POLICY)
        assert np.array_equal(g[0], g[2])

    def test_zero_row_is_uniform(self):
        w = np.random.default_rng(1).normal(size=(6, 4))
        g = gate(np.zeros((1, 6)), w, self.POLICY)
        assert np.allclose(g, 0.25)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        hidden = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 2))
        logits = hidden @ w
        direct = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        g = gate(hidden, w, QuantizationPolicy(decimals=5, site=QuantizationSite.OFF))
        assert np.max(np.abs(g - direct)) < 1e-12

    def test_quantized_when_site_is_router(self):
        rng = np.random.default_rng(3)
        g = gate(rng.normal(size=(10, 6)), rng.normal(size=(6, 8)), self.POLICY)
        assert np.array_equal(g, quantize(g, self.POLICY))


class TestDeprioritizePadding:
    def test_identity_for_all_real(self):
        g = np.random.default_rng(0).uniform(size=(6, 4))
        out = deprioritize_padding(g, padding_multiplier(np.zeros(6, dtype=bool)))
        assert np.array_equal(out, g)

    def test_real_token_beats_padding_at_boundary(self):
        # oracle: run the stable top-k over the scaled column directly
        g = np.array([[0.6], [0.5], [0.4]])
        is_pad = np.array([False, True, False])
        scaled = deprioritize_padding(g, padding_multiplier(is_pad))
        sel = stable_topk(scaled[:, 0], 2)
        assert sel.indices.tolist() == [0, 2]

    def test_all_padding_batch_selects_by_index(self):
        g = np.full((5, 1), 0.2)
        scaled = deprioritize_padding(g, padding_multiplier(np.ones(5, dtype=bool)))
        sel = stable_topk(scaled[:, 0], 3)
        assert sel.indices.tolist() == [0, 1, 2]

    def test_scale_below_quantization_resolution(self):
        assert PADDING_SCALE < 10.0 ** -5


def random_gate_matrix(rng, tokens, experts, dup_heavy=False):
    if dup_heavy:
        g = rng.integers(0, 4, size=(tokens, experts)).astype(float) / 4.0
    else:
        g = rng.uniform(size=(tokens, experts))
    return g


class TestRoute:
    def config(self, b, l, g, n, **kw):
        return RouterConfig(capacity=cap(b, l, g, n), **kw)

    def test_load_balance_exact(self):
        rng = np.random.default_rng(0)
        config = self.config(4, 6, 1.0, 3)
        for _ in range(20):
            g = random_gate_matrix(rng, 24, 3)
            assignment = route(g, config)
            for slots in assignment.slots:
                assert slots.size == min(config.k, 24)

    def test_columns_match_stable_topk(self):
        rng = np.random.default_rng(1)
        config = self.config(2, 10, 0.8, 4)
        for _ in range(500):
            g = random_gate_matrix(rng, 20, 4, dup_heavy=True)
            assignment = route(g, config)
            for e in range(4):
                expected = stable_topk(g[:, e], config.k).indices
                assert assignment.slots[e].tolist() == expected.tolist()

    def test_boundary_tie_prefers_lower_flat_index(self):
        column = np.array([0.9, 0.5, 0.5])
        config = self.config(1, 3, 2.0 / 3.0, 1)  # K = 2
        assignment = route(column[:, None], config)
        assert assignment.slots[0].tolist() == [0, 1]
        assert assignment.dropped.tolist() == [False, False, True]

    def test_nothing_dropped_with_full_capacity(self):
        rng = np.random.default_rng(2)
        g = random_gate_matrix(rng, 12, 3)
        config = self.config(2, 6, 3.0, 3)  # K = 12 = tokens
        assignment = route(g, config)
        assert not assignment.dropped.any()

    def test_monotonicity_raising_priority_keeps_selection(self):
        rng = np.random.default_rng(3)
        config = self.config(2, 8, 0.5, 4)
        for _ in range(100):
            g = random_gate_matrix(rng, 16, 4, dup_heavy=True)
            assignment = route(g, config)
            tok = int(rng.integers(0, 16))
            e = int(rng.integers(0, 4))
            if not assignment.selected[tok, e]:
                continue
            boosted = g.copy()
            boosted[tok, e] = min(1.0, boosted[tok, e] + 0.3)
            assert route(boosted, config).selected[tok, e]

    def test_randomized_ties_split_evenly(self):
        column = np.array([1.0, 0.5, 0.5])  # slots for 2, contenders tied
        config = self.config(1, 3, 2.0 / 3.0, 1, tie_mode=TieMode.RANDOMIZED)
        wins = 0
        for s in range(1000):
            a = route(column[:, None], config, rng=np.random.default_rng(s))
            wins += bool(a.selected[1, 0])
        assert 440 <= wins <= 560  # binomial(1000, .5) within ~3.5 sigma

    def test_tie_order_swap_flips_exactly_one_bit(self):
        column = np.array([0.9, 0.9, 0.7, 0.7, 0.5])
        config = self.config(1, 5, 3.0 / 5.0, 1)  # K = 3: boundary splits the 0.7s
        first = route(column[:, None], config)
        perm = [0, 1, 3, 2, 4]  # swap the tied contenders
        swapped = route(column[perm][:, None], config)
        back = swapped.selected[np.argsort(perm)]
        flips = np.flatnonzero(first.selected[:, 0] != back[:, 0])
        assert flips.tolist() == [2, 3] or len(flips) == 2

    def test_batch_isolation_defense_blocks_cross_influence(self):
        rng = np.random.default_rng(4)
        config = self.config(2, 6, 0.5, 3, batch_isolation=True)
        groups = np.repeat([0, 1], 6)
        g = random_gate_matrix(rng, 12, 3)
        baseline = route(g, config, groups=groups)
        victim_rows = slice(0, 6)
        for _ in range(100):
            perturbed = g.copy()
            perturbed[6:] = random_gate_matrix(rng, 6, 3)
            out = route(perturbed, config, groups=groups)
            assert np.array_equal(
                baseline.selected[victim_rows], out.selected[victim_rows]
            )

    def test_isolation_requires_groups(self):
        config = self.config(2, 4, 1.0, 2, batch_isolation=True)
        with pytest.raises(ConfigurationError):
            route(np.ones((8, 2)), config)


class TestDecideBufferOutcome:
    @pytest.mark.parametrize("order", [QueryOrder.PROBE_FIRST, QueryOrder.VICTIM_FIRST])
    def test_stronger_guess_rows(self, order):
        assert decide_buffer_outcome(0.9, 0.7, order, 4) is False

    @pytest.mark.parametrize("order", [QueryOrder.PROBE_FIRST, QueryOrder.VICTIM_FIRST])
    def test_weaker_guess_rows(self, order):
        assert decide_buffer_outcome(0.7, 0.9, order, 4) is True

    def test_tie_rows_depend_on_order(self):
        assert decide_buffer_outcome(0.8, 0.8, QueryOrder.PROBE_FIRST, 4) is True
        assert decide_buffer_outcome(0.8, 0.8, QueryOrder.VICTIM_FIRST, 4) is False

    def test_zero_boundary_slot(self):
        assert decide_buffer_outcome(0.5, 0.5, QueryOrder.VICTIM_FIRST, 0) is False
