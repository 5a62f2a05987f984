from __future__ import annotations

import math
import random

import numpy as np
import pytest

from asrlab.analysis import (
    EditOps,
    align_sequences,
    compare_profiles,
    error_profile,
    kl_divergence,
    phoneme_align,
    to_phonemes,
    wer,
)
from asrlab.errors import DataError
from asrlab.lexicon import builtin_lexicon

from .oracles import recursive_edit_distance

LEX = builtin_lexicon()


def test_wer_identical_is_zero():
    r = wer("the cat sees".split(), "the cat sees".split())
    assert r.wer == 0.0 and r.ref_len == 3


def test_wer_single_deletion():
    r = wer("the cat sat".split(), "the cat".split())
    assert (r.substitutions, r.deletions, r.insertions) == (0, 1, 0)
    assert r.wer == pytest.approx(1.0 / 3.0)


def test_wer_can_exceed_one():
    r = wer(["a"], ["a", "b", "c"])
    assert r.wer == pytest.approx(2.0)


def test_wer_empty_reference_rejected():
    with pytest.raises(DataError):
        wer([], ["a"])


def test_wer_documented_asymmetry():
    a = wer("a b c d".split(), "a b".split())
    b = wer("a b".split(), "a b c d".split())
    assert a.wer == pytest.approx(0.5)
    assert b.wer == pytest.approx(1.0)


def test_dp_matches_recursive_oracle_random_pairs():
    rng = random.Random(123)
    alphabet = "abcd"
    for _ in range(1000):
        ref = tuple(rng.choice(alphabet) for _ in range(rng.randint(0, 6)))
        hyp = tuple(rng.choice(alphabet) for _ in range(rng.randint(0, 6)))
        got = align_sequences(ref, hyp).distance
        assert got == recursive_edit_distance(ref, hyp), (ref, hyp)


def test_alignment_replay_reconstructs_inputs():
    rng = random.Random(7)
    for _ in range(300):
        ref = [rng.choice("pqrs") for _ in range(rng.randint(0, 6))]
        hyp = [rng.choice("pqrs") for _ in range(rng.randint(0, 6))]
        back_ref, back_hyp = align_sequences(ref, hyp).replay()
        assert back_ref == ref and back_hyp == hyp


def test_phoneme_align_examples():
    ops = phoneme_align(["k", "{", "t"], ["k", "t"])
    assert ops.deletions == 1 and ops.matches == 2
    assert [op for op in ops.ops if op[0] == "del"] == [("del", "{", None)]
    empty = phoneme_align([], ["a", "b", "c"])
    assert empty.insertions == 3
    same = phoneme_align(["a", "b"], ["a", "b"])
    assert all(op[0] == "match" for op in same.ops)


def test_to_phonemes():
    seq, oov = to_phonemes(["cat"], LEX)
    assert seq == ("k", "{", "t") and oov == []
    assert to_phonemes([], LEX) == ((), [])
    seq, oov = to_phonemes(["cat", "zzzzz"], LEX)
    assert seq is None and oov == ["zzzzz"]


def test_error_profile_counts_and_rates():
    # One deletion of "p" among four "p" occurrences -> miss rate 0.25.
    ref = ["p", "a", "p", "b", "p", "p"]
    hyp = ["p", "a", "b", "p", "p"]
    prof = error_profile([align_sequences(ref, hyp)], inventory=("p", "a", "b"))
    assert prof.gt_counts["p"] == 4
    assert prof.miss_rate("p") == pytest.approx(0.25)
    assert prof.miss_rate("a") == 0.0
    with pytest.raises(DataError):
        error_profile([], inventory=("p",))


def test_error_profile_order_invariant_and_additive():
    rng = random.Random(5)
    pool = ["p", "q", "r", "s"]
    aligns = []
    for _ in range(30):
        ref = [rng.choice(pool) for _ in range(rng.randint(1, 6))]
        hyp = [rng.choice(pool) for _ in range(rng.randint(0, 6))]
        aligns.append(align_sequences(ref, hyp))
    a = error_profile(aligns, inventory=tuple(pool))
    b = error_profile(list(reversed(aligns)), inventory=tuple(pool))
    assert a.gt_counts == b.gt_counts
    assert a.del_counts == b.del_counts
    assert np.array_equal(a.produced_distribution(), b.produced_distribution())
    # Accounting identity: per-phoneme misses re-aggregate to corpus totals.
    total_dels = sum(al.deletions for al in aligns)
    total_subs = sum(al.substitutions for al in aligns)
    assert sum(a.del_counts.values()) == total_dels
    assert sum(a.sub_out_counts.values()) == total_subs
    dist = a.produced_distribution()
    if dist.sum():
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)


def test_kl_properties_and_hand_value():
    p = np.array([0.75, 0.25])
    q = np.array([0.5, 0.5])
    want = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert kl_divergence(p, q) == pytest.approx(want, abs=1e-4)
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.dirichlet(np.ones(6))
        b = rng.dirichlet(np.ones(6))
        assert kl_divergence(a, b) >= 0.0
    # Smoothing moves KL by < 1e-4 when min mass >= 0.01.
    a = np.array([0.4, 0.3, 0.2, 0.1])
    b = np.array([0.25, 0.25, 0.25, 0.25])
    exact = float(np.sum(a * np.log(a / b)))
    assert abs(kl_divergence(a, b) - exact) < 1e-4
    with pytest.raises(DataError):
        kl_divergence(np.ones(3) / 3, np.ones(4) / 4)


def test_compare_profiles_identical_gives_zero_kl():
    ref = ["p", "q", "r"]
    hyp = ["p", "q", "s"]
    prof = error_profile([align_sequences(ref, hyp)], inventory=("p", "q", "r", "s"))
    report = compare_profiles(prof, prof, prof)
    assert report["kl_produced"]["base_vs_standard"] == pytest.approx(0.0, abs=1e-12)
    assert report["kl_produced"]["finetuned_vs_standard"] == pytest.approx(0.0, abs=1e-12)
    assert len(report["per_phoneme"]) == 4
    other = error_profile([align_sequences(ref, hyp)], inventory=("p", "q"))
    with pytest.raises(DataError):
        compare_profiles(prof, prof, other)
