import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsicf.errors import CapacityError, ContractError
from tsicf.model import build_attention_mask
from tsicf.tokenize import (
    INFER,
    TRAIN,
    ExampleWindow,
    layout_context,
    pad_example,
    pad_history,
    patchify,
)


class TestPadExample:
    def test_short_series_left_and_right_pad(self):
        w = pad_example(np.arange(1.0, 6.0), T=24, p=8)
        np.testing.assert_array_equal(w.mask, [1] * 4 + [0] * 5 + [1] * 15)
        np.testing.assert_array_equal(w.values[4:9], [1, 2, 3, 4, 5])
        assert len(w) == 24

    def test_one_full_patch(self):
        w = pad_example(np.ones(8), T=24, p=8)
        np.testing.assert_array_equal(w.mask, [0] * 8 + [1] * 16)

    def test_exact_fit(self):
        w = pad_example(np.ones(24), T=24, p=8)
        assert not w.mask.any()

    def test_empty(self):
        with pytest.raises(ContractError):
            pad_example([], T=24, p=8)

    def test_overlong(self):
        with pytest.raises(CapacityError):
            pad_example(np.ones(25), T=24, p=8)

    def test_patch_not_smaller_than_capacity(self):
        with pytest.raises(ContractError):
            pad_example(np.ones(3), T=8, p=8)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 12), st.data())
    def test_left_pad_interval(self, p, data):
        T = data.draw(st.integers(p + 1, 6 * p))
        l = data.draw(st.integers(1, T))
        w = pad_example(np.arange(1.0, l + 1), T, p)
        k = int(np.argmax(w.mask == 0))
        if l < p:
            assert p < k + l < 2 * p
            assert k == p - l + 1
        else:
            assert k == 0
        assert len(w) == T
        assert int((w.mask == 0).sum()) == l


class TestWindow:
    def test_padded_values_zeroed(self):
        w = ExampleWindow([5.0, 6.0, 7.0], [1, 0, 1])
        np.testing.assert_array_equal(w.values, [0.0, 6.0, 0.0])

    def test_gap_rejected(self):
        with pytest.raises(ContractError):
            ExampleWindow([1.0, 2.0, 3.0], [0, 1, 0])

    def test_all_padded_rejected(self):
        with pytest.raises(ContractError):
            ExampleWindow([1.0, 2.0], [1, 1])

    def test_immutable(self):
        w = ExampleWindow.real([1.0, 2.0])
        with pytest.raises(ValueError):
            w.values[0] = 3.0


def test_pad_history_left_only():
    w = pad_history(np.arange(1.0, 11.0), 8)
    np.testing.assert_array_equal(w.mask, [1] * 6 + [0] * 10)
    assert len(pad_history(np.ones(16), 8)) == 16


class TestPatchify:
    def test_count(self):
        assert patchify(ExampleWindow.real(np.ones(640)), 32).n_patches == 20

    def test_short_example_grid(self):
        g = patchify(pad_example(np.arange(1.0, 6.0), T=24, p=8), 8)
        assert g.n_patches == 3
        np.testing.assert_array_equal(g.patch_masks[0], [1, 1, 1, 1, 0, 0, 0, 0])
        np.testing.assert_array_equal(g.right_incomplete, [False, True, True])
        np.testing.assert_array_equal(g.eligible, [True, False, False])

    def test_all_real_all_eligible(self):
        g = patchify(ExampleWindow.real(np.arange(24.0)), 8)
        assert g.eligible.all() and not g.right_incomplete.any()

    def test_trailing_partial_patch_zero_filled(self):
        g = patchify(ExampleWindow.real(np.arange(1.0, 11.0)), 8)
        np.testing.assert_array_equal(g.patches[1], [9, 10, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(g.patch_masks[1], [0, 0, 1, 1, 1, 1, 1, 1])
        np.testing.assert_array_equal(g.eligible, [True, False])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10), st.data())
    def test_round_trip_and_eligibility(self, p, data):
        T = data.draw(st.integers(p + 1, 5 * p))
        l = data.draw(st.integers(1, T))
        raw = np.array(data.draw(st.lists(st.floats(-1e6, 1e6), min_size=l, max_size=l)))
        w = pad_example(raw, T, p)
        g = patchify(w, p)
        back = g.unpatch()
        np.testing.assert_array_equal(back.values[back.mask == 0], raw)
        if l >= 2 or p == 1:
            assert g.eligible.sum() >= 1
        else:
            # a lone value is pushed into the second patch, which is then right padded
            assert g.eligible.sum() == 0
        np.testing.assert_array_equal(g.right_incomplete, g.patch_masks[:, -1] == 1)
        for j in range(g.n_patches):
            expect = g.patch_masks[j, -1] == 0 and (g.patch_masks[j] == 0).any()
            assert g.eligible[j] == expect


def brute_force_mask(windows, p, mode):
    # independent construction: enumerate tokens one by one
    tokens = []
    for i, w in enumerate(windows):
        vals = list(w.mask) + [1] * ((-len(w)) % p)
        for j in range(0, len(vals), p):
            chunk = vals[j : j + p]
            tokens.append(chunk[-1] == 0 and 0 in chunk)
        if mode == TRAIN or i < len(windows) - 1:
            tokens.append(True)
    n = len(tokens)
    return np.array([[k <= q and tokens[k] for k in range(n)] for q in range(n)])


class TestLayout:
    def test_token_count_train(self):
        windows = [ExampleWindow.real(np.ones(20 * 4))] * 50
        layout = layout_context(windows, 4, TRAIN)
        assert layout.n_tokens == 50 * 21

    def test_single_infer_has_no_separator(self):
        layout = layout_context([ExampleWindow.real(np.ones(16))], 8, INFER)
        assert layout.separator_positions == ()
        assert layout.n_tokens == 2

    def test_separator_counts(self):
        windows = [pad_example(np.ones(l), 24, 8) for l in (3, 10, 24)]
        assert len(layout_context(windows, 8, TRAIN).separator_positions) == 3
        assert len(layout_context(windows, 8, INFER).separator_positions) == 2

    def test_empty_context(self):
        with pytest.raises(ContractError):
            layout_context([], 8)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            layout_context([ExampleWindow.real(np.ones(8))] * 3, 8, n_max=2)

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            layout_context([ExampleWindow.real(np.ones(8))], 8, mode="eval")

    def test_trailing_padded_patch_excluded_from_attention(self):
        windows = [
            ExampleWindow.real(np.ones(24)),
            pad_example(np.ones(16), 24, 8),  # last patch fully padded
            ExampleWindow.real(np.ones(24)),
        ]
        layout = layout_context(windows, 8, INFER)
        # tokens: ex0 0..2, sep 3, ex1 4..6, sep 7, ex2 8..10
        assert not layout.eligible[6]
        allowed = build_attention_mask(layout)
        assert not allowed[7:, 6].any()
        np.testing.assert_array_equal(allowed, brute_force_mask(windows, 8, INFER))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.lists(st.integers(1, 30), min_size=1, max_size=5), st.sampled_from([TRAIN, INFER]))
    def test_mask_matches_brute_force(self, p, lengths, mode):
        T = 30 if p < 30 else p + 1
        windows = [pad_example(np.arange(1.0, l + 1), T, p) for l in lengths]
        layout = layout_context(windows, p, mode)
        np.testing.assert_array_equal(build_attention_mask(layout), brute_force_mask(windows, p, mode))
        assert layout.eligible[layout.is_separator].all()
        assert layout.n_tokens == sum(-(-len(w) // p) for w in windows) + len(layout.separator_positions)
        assert layout.example_id.tolist() == sorted(layout.example_id.tolist())

    def test_pure(self):
        windows = [pad_example(np.arange(5.0), 24, 8), ExampleWindow.real(np.arange(16.0))]
        a, b = layout_context(windows, 8, TRAIN), layout_context(windows, 8, TRAIN)
        assert a.spans == b.spans and np.array_equal(a.patches, b.patches)
        assert np.array_equal(a.eligible, b.eligible)
