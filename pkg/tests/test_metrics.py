import math

import pytest
from hypothesis import given, strategies as st

from fedcompress.metrics import bleu_4, lcs_length, macro_f1, rouge_l_f1


def test_macro_f1_examples():
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert macro_f1([1, 1, 0, 0], [1, 0, 1, 0], 2) == pytest.approx(0.5, abs=1e-9)
    assert macro_f1([0] * 6, [0, 0, 1, 1, 2, 2], 3) == pytest.approx(1 / 6, abs=1e-9)


def test_macro_f1_shape_mismatch():
    with pytest.raises(ValueError):
        macro_f1([0, 1], [0], 2)


def test_rouge_examples():
    assert rouge_l_f1("the cat".split(), "the cat".split()) == 1.0
    assert rouge_l_f1("the cat".split(), "the cat sat".split()) == pytest.approx(0.8, abs=1e-9)
    assert rouge_l_f1([1, 2], [3, 4]) == 0.0


def test_bleu_examples():
    assert bleu_4(list("abcde"), list("abcde")) == 1.0
    assert bleu_4(list("abcd"), list("abcde")) == pytest.approx(math.exp(1 - 5 / 4), abs=1e-9)
    short = bleu_4(list("abc"), list("abc"))
    assert 0.0 < short < 1.0


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        rouge_l_f1([1], [])
    with pytest.raises(ValueError):
        bleu_4([1], [])


tokens = st.lists(st.integers(0, 5), min_size=1, max_size=12)


@given(tokens, tokens)
def test_scores_in_unit_interval(c, r):
    assert 0.0 <= rouge_l_f1(c, r) <= 1.0
    assert 0.0 <= bleu_4(c, r) <= 1.0


@given(tokens, tokens)
def test_rouge_one_iff_identical(c, r):
    assert (rouge_l_f1(c, r) == 1.0) == (c == r)


@given(tokens, tokens, tokens)
def test_shared_suffix_never_shrinks_lcs(c, r, suffix):
    assert lcs_length(c + suffix, r + suffix) >= lcs_length(c, r)
