import math

import numpy as np
import pytest

import oracles
from spellm.heads import HeadStack
from spellm.inference import (AUTOCORRECT, AUTOCORRECT_EMPTY, DIRECT, FALLBACK, RAW, autocorrect,
                              autocorrect_candidates, best_by_score, decode, decode_with_fallback, top3_table)
from spellm.vocab import PAD, CharVocab, TokenVocab, make_synthetic_vocab, spell

CV = CharVocab.default()


def confident(spelling, s=97, margin=30.0):
    cl = np.zeros((len(spelling), s))
    cl[np.arange(len(spelling)), spelling] = margin
    return cl


def test_top3_saturates_when_s_is_3():
    t3 = top3_table(np.random.default_rng(0).normal(size=(4, 3)))
    assert all(sorted(row) == [0, 1, 2] for row in t3.tolist())


def test_top3_matches_sort_oracle(rng):
    for _ in range(300):
        cl = rng.integers(-2, 3, size=(5, 9)).astype(float)  # plenty of ties
        assert top3_table(cl).tolist() == [oracles.top_n_indices(row) for row in cl.tolist()]


def test_candidates_vacuous_and_forced_empty():
    tv = TokenVocab(["a", "b", "ab", "c"], 3)
    everything = np.tile(np.arange(97), (3, 1))
    assert autocorrect_candidates(everything, tv).tolist() == [0, 1, 2, 3]
    no_pad = np.tile(np.array([5, 6, 7]), (3, 1))
    assert autocorrect_candidates(no_pad, tv).tolist() == []


def test_candidates_match_exhaustive_scan(rng):
    tv = make_synthetic_vocab(200, 5, 7)
    spellings = tv.spellings.tolist()
    for _ in range(200):
        # bias the sets towards real characters so candidates are not always empty
        ref = tv.spellings[rng.integers(200)]
        t3 = np.stack([rng.permutation(np.r_[ref[i], PAD, rng.integers(2, 97, 3)])[:3] for i in range(5)])
        sets = [set(row) for row in t3.tolist()]
        assert autocorrect_candidates(t3, tv).tolist() == oracles.candidates(sets, spellings)


def test_direct_when_raw_is_a_token(rng):
    tv = TokenVocab(["x", "hi", "cat", "dog"], 4)
    stack = HeadStack.init(4, CV, 4, 6, 0)
    out = autocorrect(rng.normal(size=6), confident(tv.spellings[2]), stack, tv)
    assert out.path == DIRECT and out.token_id == 2 and out.text == "cat"
    assert np.array_equal(out.output, tv.spellings[2])


def test_direct_collision_resolved_by_token_head(rng):
    tv = TokenVocab(["Ab", "Áb", "q"], 3)
    stack = HeadStack.init(3, CV, 3, 4, 0)
    h = rng.normal(size=4)
    stack.token_head[1] = h  # make token 1 score highest
    stack.token_head[0] = -h
    out = autocorrect(h, confident(spell("Ab", 3)), stack, tv)
    assert out.path == DIRECT and out.token_id == 1


def test_single_candidate_wins_regardless_of_score(rng):
    tv = TokenVocab(["cat", "dog", "cow"], 3)
    stack = HeadStack.init(3, CV, 3, 4, 0)
    h = rng.normal(size=4)
    stack.token_head[0] = -10 * h  # terrible score for "cat"
    cl = confident(spell("cax", 3))
    cl[2, CV.index["t"]] = 5.0  # "t" second at the last position
    out = autocorrect(h, cl, stack, tv)
    assert out.path == AUTOCORRECT and out.token_id == 0 and out.candidate_count == 1
    assert out.text == "cat"


def test_restricted_argmax_equals_full_head_oracle(rng):
    tv = TokenVocab(["ab", "ac", "bb", "bc", "cb", "zz", "a"], 2)
    stack = HeadStack.init(2, CV, tv.S, 5, 3)
    for _ in range(200):
        h = rng.normal(size=5)
        cl = np.full((2, 97), -5.0)
        cl[0, [CV.index["a"], CV.index["b"], CV.index["c"]]] = rng.normal(size=3)
        cl[1, [CV.index["b"], CV.index["c"], CV.index["q"]]] = rng.normal(size=3)
        cl[1, CV.index["q"]] = 9.0  # raw ends in "q", never a token
        out = autocorrect(h, cl, stack, tv)
        # "a" needs PAD at position 2, which is outside that position's top-3
        assert out.path == AUTOCORRECT and out.candidate_count == 5
        assert out.token_id == oracles.restricted_argmax(stack.token_head.tolist(), h.tolist(), [0, 1, 2, 3, 4])


def test_empty_candidates_keep_raw():
    tv = TokenVocab(["aa"], 2)
    stack = HeadStack.init(2, CV, 1, 3, 0)
    cl = confident(spell("zq", 2))
    out = autocorrect(np.ones(3), cl, stack, tv)
    assert out.path == AUTOCORRECT_EMPTY and out.token_id is None
    assert np.array_equal(out.output, out.raw) and out.text == "zq"


def test_best_by_score_ties_go_to_lowest_id():
    stack = HeadStack.init(1, CV, 4, 2, 0)
    stack.token_head[:] = 0.0
    assert best_by_score([3, 1, 2], np.ones(2), stack) == 1


def test_fallback_routing():
    tv = TokenVocab(["cat", "dog"], 3)
    stack = HeadStack.init(3, CV, 2, 4, 0)
    h = np.array([1.0, 0, 0, 0])
    stack.token_head[:] = 0
    stack.token_head[1, 0] = 1.0  # token head says "dog"
    sat = confident(tv.spellings[0], margin=100.0)
    assert decode_with_fallback(h, sat, stack, tv, 0.22).path == DIRECT
    uni = np.zeros((3, 97))
    out = decode_with_fallback(h, uni, stack, tv, 0.22)
    assert out.path == FALLBACK and out.token_id == 1 and out.mean_entropy == pytest.approx(math.log(97))
    assert np.array_equal(out.output, tv.spellings[1])
    # threshold 0 routes anything with positive entropy
    assert decode_with_fallback(h, confident(tv.spellings[0], margin=5.0), stack, tv, 0.0).path == FALLBACK
    assert decode_with_fallback(h, uni, stack, tv, None).path == AUTOCORRECT_EMPTY
    assert decode_with_fallback(h, uni, stack, tv, math.log(97)).path != FALLBACK
    with pytest.raises(ValueError):
        decode_with_fallback(h, uni, stack, tv, -0.1)


def test_raw_path_without_autocorrect():
    tv = TokenVocab(["cat"], 3)
    stack = HeadStack.init(3, CV, 1, 4, 0)
    out = decode_with_fallback(np.zeros(4), confident(spell("cax", 3)), stack, tv, None, autocorrect_on=False)
    assert out.path == RAW and out.text == "cax" and out.token_id is None


def test_decode_runs_the_heads(rng):
    tv = make_synthetic_vocab(30, 3, 0)
    stack = HeadStack.init(3, CV, 30, 8, 0)
    out = decode(rng.normal(size=8), stack, tv)
    assert out.output.shape == (3,)
    assert set(out.to_dict()) == {"raw", "output", "path", "token_id", "text", "mean_entropy", "candidate_count"}
