import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeup.numerics import (
    NormalParams,
    RngStream,
    sample_indices_without_replacement,
    sample_normal,
    softmax,
    top_k,
    top_k_batch,
)


class TestRngStream:
    def test_same_path_same_samples(self):
        a = RngStream(7, (1, 2, 3))
        b = RngStream(7, (1, 2, 3))
        assert np.array_equal(a.generator().random(100), b.generator().random(100))

    def test_distinct_paths_differ(self):
        root = RngStream(7)
        x = root.child(0).generator().random(50)
        y = root.child(1).generator().random(50)
        assert not np.array_equal(x, y)

    def test_child_extends_path(self):
        assert RngStream(3).child(4, 5).path == (4, 5)
        assert RngStream(3, (1,)).child(2).path == (1, 2)

    def test_invalid_seed_rejected(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            RngStream(2**64)


class TestSampleNormal:
    def test_zero_variance_gives_constant_zero(self):
        out = sample_normal(RngStream(7), NormalParams(0.0, 0.0), 5)
        assert np.array_equal(out, np.zeros(5))

    def test_zero_variance_gives_constant_shift(self):
        out = sample_normal(RngStream(7), NormalParams(3.0, 0.0), 3)
        assert np.array_equal(out, np.full(3, 3.0))

    def test_moments_standard_normal(self):
        # CLT bound oracle: mean within 4/sqrt(n), std within 0.005 of 1.
        n = 10**6
        out = sample_normal(RngStream(7), NormalParams(0.0, 1.0), n)
        assert abs(out.mean()) < 4.0 / math.sqrt(n)
        assert abs(out.std() - 1.0) < 0.005

    def test_bitwise_determinism(self):
        a = sample_normal(RngStream(9, (1, 2)), NormalParams(0.5, 2.0), 1001)
        b = sample_normal(RngStream(9, (1, 2)), NormalParams(0.5, 2.0), 1001)
        assert a.tobytes() == b.tobytes()

    def test_pairwise_consumption_prefix_stable(self):
        # Pair i consumes uniforms 2i, 2i+1, so shorter draws are prefixes.
        long = sample_normal(RngStream(11), NormalParams(0.0, 1.0), 10)
        short = sample_normal(RngStream(11), NormalParams(0.0, 1.0), 6)
        assert np.array_equal(long[:6], short)

    def test_count_validation(self):
        assert sample_normal(RngStream(1), NormalParams(0, 1), 0).shape == (0,)
        with pytest.raises(ValueError):
            sample_normal(RngStream(1), NormalParams(0, 1), -1)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            NormalParams(0.0, -1.0)
        with pytest.raises(ValueError):
            NormalParams(float("nan"), 1.0)


class TestSampleIndices:
    def test_full_set(self):
        out = sample_indices_without_replacement(RngStream(1), 4, 4)
        assert np.array_equal(out, np.arange(4))

    def test_empty_set(self):
        out = sample_indices_without_replacement(RngStream(1), 4, 0)
        assert out.shape == (0,)

    def test_oversample_rejected(self):
        with pytest.raises(ValueError, match="sample larger than population"):
            sample_indices_without_replacement(RngStream(1), 3, 4)

    def test_uniform_inclusion_frequency(self):
        # Inclusion oracle: every index in with frequency p +- 4*sqrt(p(1-p)/T).
        population, take, trials = 2048, 1024, 10_000
        counts = np.zeros(population, dtype=np.int64)
        root = RngStream(0)
        for t in range(trials):
            idx = sample_indices_without_replacement(root.child(t), population, take)
            counts[idx] += 1
        p = take / population
        bound = 4.0 * math.sqrt(p * (1 - p) / trials)
        freq = counts / trials
        assert np.all(np.abs(freq - p) < max(bound, 0.02))

    @given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_properties(self, population, take, seed):
        if take > population:
            with pytest.raises(ValueError):
                sample_indices_without_replacement(RngStream(seed), population, take)
            return
        out = sample_indices_without_replacement(RngStream(seed), population, take)
        assert out.shape == (take,)
        assert len(set(out.tolist())) == take
        if take:
            assert out.min() >= 0 and out.max() < population
            assert np.all(np.diff(out) > 0)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5], atol=1e-15)

    def test_no_overflow_on_large_logits(self):
        out = softmax(np.array([1000.0, 1000.0]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-15)

    def test_closed_form(self):
        out = softmax(np.array([math.log(1.0), math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20),
           st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, values, shift):
        v = np.array(values)
        out = softmax(v)
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) < 1e-12
        shifted = softmax(v + shift)
        assert np.max(np.abs(out - shifted)) < 1e-12


def _sort_oracle(v: np.ndarray, k: int) -> np.ndarray:
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    return np.sort(np.array(order[:k], dtype=np.int64))


class TestTopK:
    def test_distinct_values(self):
        assert set(top_k(np.array([3.0, 1.0, 2.0]), 2).tolist()) == {0, 2}

    def test_tie_break_lowest_index(self):
        assert set(top_k(np.array([5.0, 5.0, 5.0, 5.0]), 2).tolist()) == {0, 1}

    def test_exhaustive_pair_oracle(self):
        # Enumerate all pairs of an 8-vector; the best pair by (sum, then
        # lowest indices) must match top_k with k=2.
        rng = np.random.default_rng(0)
        for _ in range(300):
            v = rng.normal(size=8)
            best = None
            for i in range(8):
                for j in range(i + 1, 8):
                    cand = (v[i] + v[j], [i, j])
                    if best is None or cand[0] > best[0] + 1e-12 or (
                            abs(cand[0] - best[0]) <= 1e-12 and cand[1] < best[1]):
                        best = cand
            assert top_k(v, 2).tolist() == best[1]

    def test_full_sort_oracle_bulk(self):
        rng = np.random.default_rng(123)
        for _ in range(10_000):
            n = int(rng.integers(1, 12))
            k = int(rng.integers(0, n + 1))
            v = rng.normal(size=n)
            if rng.random() < 0.3:  # inject ties
                v = np.round(v)
            assert np.array_equal(top_k(v, k), _sort_oracle(v, k))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        vals = rng.normal(size=(40, 7))
        got = top_k_batch(vals, 3)
        for row in range(40):
            assert np.array_equal(got[row], top_k(vals[row], 3))

    def test_k_validation(self):
        with pytest.raises(ValueError):
            top_k(np.array([1.0, 2.0]), 3)
