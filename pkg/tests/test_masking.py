import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tacl import masking as K
from tacl.corpus import CLS_ID, MASK_ID, N_RESERVED, SEP_ID, TokenSequence

VOCAB = 50


def seq_of(body_a, body_b=None):
    ids = [CLS_ID] + list(body_a) + [SEP_ID]
    segs = [0] * len(ids)
    if body_b is not None:
        ids += list(body_b) + [SEP_ID]
        segs += [1] * (len(body_b) + 1)
    return TokenSequence(ids, segs)


def masking_counts(n_tokens, seed=0, body=20):
    """Monte-Carlo tallies over ``n_tokens`` maskable positions."""
    rng = np.random.default_rng(seed)
    seq = seq_of(range(N_RESERVED, N_RESERVED + body))
    seen = sel = n_mask = n_rand = n_keep = special_hits = 0
    while seen < n_tokens:
        ex = K.apply_masking(seq, rng, VOCAB)
        orig, masked, chosen = map(np.asarray, (ex.original_ids, ex.masked_ids, ex.selected))
        special_hits += int(chosen[0] + chosen[-1])
        chosen = chosen.astype(bool)
        seen += body
        sel += int(chosen.sum())
        n_mask += int((masked[chosen] == MASK_ID).sum())
        same = masked[chosen] == orig[chosen]
        n_keep += int(same.sum())
        n_rand += int((~same & (masked[chosen] != MASK_ID)).sum())
    return seen, sel, n_mask, n_rand, n_keep, special_hits


def test_rates_boundary_all_masked():
    seq = seq_of([7, 8, 9], [10, 11])
    ex = K.apply_masking(seq, np.random.default_rng(0), VOCAB, K.MaskingRates(1.0, 1.0, 0.0, 0.0))
    for orig, m, ind in zip(ex.original_ids, ex.masked_ids, ex.mask_indicator):
        if orig in (CLS_ID, SEP_ID):
            assert (m, ind) == (orig, 0)
        else:
            assert (m, ind) == (MASK_ID, 1)


def test_force_one_selection():
    seq = seq_of([7])
    ex = K.apply_masking(seq, np.random.default_rng(0), VOCAB, K.MaskingRates(0.0))
    assert ex.mask_indicator == [0, 1, 0]


def test_unmaskable_sequence():
    with pytest.raises(K.MaskingError):
        K.apply_masking(TokenSequence([CLS_ID, SEP_ID], [0, 0]), np.random.default_rng(0), VOCAB)


def test_invalid_rates():
    with pytest.raises(K.MaskingError):
        K.MaskingRates(mask=0.5, random=0.1, keep=0.1)
    with pytest.raises(K.MaskingError):
        K.MaskingRates(indicator="literal")


def test_statistics_small_sample():
    # full 10^6 run lives in the acceptance suite
    seen, sel, n_mask, n_rand, n_keep, special = masking_counts(200_000, seed=1)
    assert abs(sel / seen - 0.15) < 0.004
    assert abs(n_mask / sel - 0.8) < 0.01
    assert abs(n_rand / sel - 0.1) < 0.01 and abs(n_keep / sel - 0.1) < 0.01
    assert special == 0


def test_mask_only_indicator_mode():
    seq = seq_of(range(10, 40))
    rates = K.MaskingRates(indicator="mask_only")
    ex = K.apply_masking(seq, np.random.default_rng(4), VOCAB, rates)
    for m, ind, s in zip(ex.masked_ids, ex.mask_indicator, ex.selected):
        assert ind == int(m == MASK_ID and s == 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(N_RESERVED, VOCAB - 1), min_size=1, max_size=20),
       st.lists(st.integers(N_RESERVED, VOCAB - 1), min_size=0, max_size=20),
       st.integers(0, 2**32 - 1))
def test_masked_example_invariants(a, b, seed):
    seq = seq_of(a, b or None)
    before = list(seq.ids)
    ex = K.apply_masking(seq, np.random.default_rng(seed), VOCAB)
    assert seq.ids == before and ex.original_ids == before
    assert sum(ex.mask_indicator) >= 1
    for o, m, ind, tgt in zip(ex.original_ids, ex.masked_ids, ex.mask_indicator, ex.mlm_targets):
        if o in (CLS_ID, SEP_ID):
            assert ind == 0
        if ind:
            assert m in (MASK_ID, o) or N_RESERVED <= m < VOCAB
            assert tgt == o
        else:
            assert m == o and tgt == -1


def test_masking_deterministic():
    seq = seq_of(range(10, 30))
    a = K.apply_masking(seq, np.random.default_rng(5), VOCAB)
    b = K.apply_masking(seq, np.random.default_rng(5), VOCAB)
    assert a == b


def _example(n):
    return K.apply_masking(seq_of(range(10, 10 + n - 2)), np.random.default_rng(n), VOCAB)


def test_pad_batch_no_padding_at_max_len():
    b = K.pad_batch([_example(5)], max_len=5)
    assert b.padding_mask.tolist() == [[True] * 5]


def test_pad_batch_lengths_3_and_5():
    b = K.pad_batch([_example(3), _example(5)], max_len=5)
    assert b.original_ids[0, 3:].tolist() == [0, 0]
    assert b.padding_mask[0].int().tolist() == [1, 1, 1, 0, 0]
    assert not b.mask_indicator[0, 3:].any()
    assert (b.mlm_targets[0, 3:] == -1).all()
    assert b.special_mask[0].tolist() == [True, False, True, True, True]


def test_pad_batch_overlong():
    with pytest.raises(K.MaskingError):
        K.pad_batch([_example(6)], max_len=5)
    with pytest.raises(K.MaskingError):
        K.pad_batch([])


def test_pad_batch_dtypes():
    b = K.pad_batch([_example(4), _example(6)])
    assert b.original_ids.shape == (2, 6)
    assert b.padding_mask.dtype == torch.bool and b.is_next.dtype == torch.long
