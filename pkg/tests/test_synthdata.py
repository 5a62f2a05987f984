from __future__ import annotations

import numpy as np
import pytest

from asrlab.errors import ConfigError, DataError
from asrlab.lexicon import builtin_lexicon
from asrlab.synthdata import (
    BudgetSpec,
    ConditionSpec,
    CorpusSpec,
    Manifest,
    ManifestRecord,
    SentenceGrammar,
    SpeakerProfile,
    build_corpus,
    make_budget_subset,
    make_speaker,
    synth_utterance,
)

LEX = builtin_lexicon()


def typical_speaker(seed=1) -> SpeakerProfile:
    return make_speaker("typical-00", "typical", 0.0, LEX.inventory, seed=seed)


def test_profile_invariants():
    with pytest.raises(ConfigError):
        SpeakerProfile("x", "typical", 0.0, {}, tempo_factor=2.0)
    with pytest.raises(ConfigError):
        SpeakerProfile("x", "typical", 0.0, {"p": {"b": 1.0}})
    with pytest.raises(ConfigError):
        SpeakerProfile("x", "dysarthric", 0.5, {"p": {"p": 0.6, "b": 0.3}})
    s = make_speaker("d", "dysarthric", 0.8, LEX.inventory, seed=3)
    for row in s.substitution_map.values():
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-9)


def test_severity_zero_alignment_matches_lexicon():
    transcript = "the cat sees the dog"
    want = [p for w in transcript.split() for p in LEX.pronounce(w)]
    _, alignment = synth_utterance(transcript, typical_speaker(), LEX, seed=11)
    assert [p for p, _, _ in alignment] == want


def test_oov_error_names_word():
    with pytest.raises(DataError, match="xylophone"):
        synth_utterance("the xylophone", typical_speaker(), LEX, seed=0)


def test_substitution_monte_carlo_frequency():
    # Over 1000 seeded renditions, p -> b must fire at its configured rate.
    speaker = SpeakerProfile(
        id="mc", condition="dysarthric", severity=0.7,
        substitution_map={"p": {"p": 0.5, "b": 0.5}},
        tempo_factor=1.0, template_seed=77,
    )
    hits = 0
    for seed in range(1000):
        _, alignment = synth_utterance("pig", speaker, LEX, seed=seed, sample_rate=8000)
        first = alignment[0][0]
        assert first in ("p", "b")
        hits += first == "b"
    assert abs(hits / 1000.0 - 0.5) <= 0.04


def test_tempo_factor_scales_duration():
    base = typical_speaker(seed=5)
    doubled = SpeakerProfile(
        id=base.id, condition="accented", severity=0.5, substitution_map={},
        tempo_factor=2.0, template_seed=base.template_seed,
    )
    transcript = "the green dog eats today"
    w1, _ = synth_utterance(transcript, base, LEX, seed=9)
    w2, _ = synth_utterance(transcript, doubled, LEX, seed=9)
    assert w2.duration_s == pytest.approx(2.0 * w1.duration_s, rel=0.01)


def test_dysarthric_stretch_and_identity_prototypes():
    sev = 0.8
    speaker = SpeakerProfile(
        id="d0", condition="dysarthric", severity=sev, substitution_map={},
        tempo_factor=1.0, template_seed=123,
    )
    plain = SpeakerProfile(
        id="d1", condition="typical", severity=0.0, substitution_map={},
        tempo_factor=1.0, template_seed=123,
    )
    w_slow, _ = synth_utterance("the cat", speaker, LEX, seed=4)
    w_fast, _ = synth_utterance("the cat", plain, LEX, seed=4)
    assert w_slow.duration_s == pytest.approx((1 + sev) * w_fast.duration_s, rel=0.02)


def test_grammar_reserved_words_train_only():
    grammar = SentenceGrammar(LEX)
    assert grammar.reserved and len(grammar.reserved) >= len(LEX) // 12
    rng = np.random.default_rng(0)
    for _ in range(100):
        for word in grammar.sentence(rng, "test").split():
            assert word in LEX
            assert word not in grammar.reserved
    seen_reserved = set()
    for _ in range(500):
        seen_reserved.update(
            w for w in grammar.sentence(rng, "train").split() if w in grammar.reserved
        )
    assert seen_reserved  # reserved words do occur in train sentences


def test_build_corpus_deterministic(tmp_path):
    spec = CorpusSpec(
        conditions=(ConditionSpec("typical", 1),),
        sentences_per_speaker=10,
        master_seed=7,
    )
    m1, _ = build_corpus(spec, LEX, tmp_path / "a")
    m2, _ = build_corpus(spec, LEX, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    for rec in m1.records:
        assert (tmp_path / "a" / rec.feature_path).read_bytes() == (
            tmp_path / "b" / rec.feature_path
        ).read_bytes()
    assert len(m1.records) == 10
    assert sum(r.split == "test" for r in m1.records) == 1
    assert {r.split for r in m1.records} == {"train", "test"}


def test_build_corpus_splits_and_counts(tmp_path):
    spec = CorpusSpec(
        conditions=(ConditionSpec("typical", 2), ConditionSpec("dysarthric", 2, 0.4, 0.8)),
        sentences_per_speaker=10,
        master_seed=3,
    )
    manifest, speakers = build_corpus(spec, LEX, tmp_path)
    assert len(manifest.records) == 4 * 10
    assert [s.condition for s in speakers] == ["typical"] * 2 + ["dysarthric"] * 2
    assert [s.severity for s in speakers[2:]] == [0.4, 0.8]
    train_ids = {r.utterance_id for r in manifest.subset("train").records}
    test_ids = {r.utterance_id for r in manifest.subset("test").records}
    assert not train_ids & test_ids


def fake_manifest(durations, speaker="sp"):
    recs = [
        ManifestRecord(f"{speaker}-{i:03d}", speaker, "the cat", "train", d, f"f{i}.feat")
        for i, d in enumerate(durations)
    ]
    return Manifest(recs)


def test_budget_all_and_full_budget():
    m = fake_manifest([30.0] * 5)
    sub = make_budget_subset(m, "sp", BudgetSpec("all", 0))
    assert [r.utterance_id for r in sub.records] == [r.utterance_id for r in m.records]
    sub2 = make_budget_subset(m, "sp", BudgetSpec(1000.0, 0))
    assert len(sub2.records) == 5


def test_budget_greedy_prefix():
    # 100 s budget over 30 s utterances: exactly 3 selected, 90 s total.
    m = fake_manifest([30.0] * 6)
    sub = make_budget_subset(m, "sp", BudgetSpec(100.0, selection_seed=5))
    assert len(sub.records) == 3
    assert sum(r.duration_s for r in sub.records) == pytest.approx(90.0)


def test_budget_monotone_and_minimum():
    m = fake_manifest([25.0, 40.0, 10.0, 35.0, 20.0])
    prev: set[str] = set()
    for budget in (1.0, 30.0, 60.0, 90.0, 130.0, "all"):
        sub = make_budget_subset(m, "sp", BudgetSpec(budget, selection_seed=9))
        ids = {r.utterance_id for r in sub.records}
        assert len(ids) >= 1
        assert prev <= ids
        prev = ids
    with pytest.raises(DataError):
        make_budget_subset(m, "nobody", BudgetSpec("all", 0))
