"""Deterministic synthetic speech corpora with known distortion structure.

Speakers render each phoneme as a seeded stack of narrow spectral bands
(tones, or modulated band noise for fricatives), so the phoneme-to-
acoustics map is consistent per speaker and learnable by a small model.
Dysarthric speakers additionally stretch durations by (1 + severity),
compress the spectral layout toward mid frequencies in proportion to
severity, and substitute phonemes stochastically per occurrence;
accented speakers apply substitutions only.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureConfig, NoiseConfig, Waveform, add_noise, logmel, write_feature_dump
from .lexicon import Lexicon

CONDITIONS = ("typical", "dysarthric", "accented")

#: Fraction of a phoneme's emission probability moved onto confusable
#: phonemes at severity 1.0.
SUBSTITUTION_RATE = 0.35

#: Drift of spectral bands toward the mid band at severity 1.0.
CONTRAST_DRIFT = 0.4

_FRICATIVES = set("f v s z S Z h D".split())
_LONG_VOWELS = {"i:", "A:", "u:", "eI", "aI", "@U"}
_SHORT_VOWELS = {"I", "e", "{", "Q", "U", "V", "@"}
_STOPS = set("p b t d k g".split())

_CONFUSION_CLASSES = [
    ["p", "b", "t", "d", "k", "g"],
    ["f", "v", "s", "z", "S", "Z", "h", "D"],
    ["m", "n", "N"],
    ["l", "r", "w", "j"],
    ["i:", "I", "e"],
    ["{", "A:", "Q", "V"],
    ["U", "u:", "@U"],
    ["eI", "aI", "@"],
]


def _phoneme_duration(phoneme: str) -> float:
    if phoneme in _LONG_VOWELS:
        return 0.135
    if phoneme in _SHORT_VOWELS:
        return 0.105
    if phoneme in _STOPS:
        return 0.070
    return 0.100


_WORD_GAP = 0.055
_EDGE_PAD = 0.040


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _rng(*parts) -> np.random.Generator:
    seeds = [p if isinstance(p, int) else _crc(str(p)) for p in parts]
    return np.random.default_rng(seeds)


@dataclass(frozen=True)
class SpeakerProfile:
    """Parametric synthetic speaker; severity 0 means undistorted."""

    id: str
    condition: str
    severity: float
    substitution_map: dict[str, dict[str, float]]
    tempo_factor: float = 1.0
    template_seed: int = 0

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError("severity must lie in [0, 1]")
        if self.tempo_factor <= 0:
            raise ConfigError("tempo_factor must be positive")
        for src, row in self.substitution_map.items():
            total = sum(row.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"substitution row for {src!r} sums to {total}, not 1")
            if self.severity == 0.0 and row != {src: 1.0}:
                raise ConfigError("severity 0 requires an identity substitution map")
        if self.severity == 0.0 and self.tempo_factor != 1.0:
            raise ConfigError("severity 0 requires tempo_factor 1")

    def draw_phoneme(self, phoneme: str, rng: np.random.Generator) -> str:
        row = self.substitution_map.get(phoneme)
        if not row:
            return phoneme
        targets = sorted(row)
        probs = np.array([row[t] for t in targets])
        return targets[int(rng.choice(len(targets), p=probs / probs.sum()))]


def make_speaker(
    speaker_id: str,
    condition: str,
    severity: float,
    inventory: tuple[str, ...],
    seed: int,
) -> SpeakerProfile:
    """Seeded speaker with class-internal confusions scaled by severity."""
    rng = _rng(seed, speaker_id)
    template_seed = int(rng.integers(0, 2**31 - 1))
    sub_map: dict[str, dict[str, float]] = {}
    if severity > 0 and condition in ("dysarthric", "accented"):
        total = SUBSTITUTION_RATE * severity
        for cls in _CONFUSION_CLASSES:
            present = [p for p in cls if p in inventory]
            for p in present:
                others = [q for q in present if q != p]
                if not others:
                    continue
                picks = list(rng.choice(len(others), size=min(2, len(others)), replace=False))
                row = {p: 1.0 - total}
                shares = (0.7, 0.3) if len(picks) == 2 else (1.0,)
                for share, k in zip(shares, picks):
                    row[others[k]] = total * share
                sub_map[p] = row
    return SpeakerProfile(
        id=speaker_id,
        condition=condition,
        severity=float(severity),
        substitution_map=sub_map,
        tempo_factor=1.0,
        template_seed=template_seed,
    )


# ------------------------------------------------------------- rendering

_prototype_cache: dict = {}


def _speaker_prototypes(speaker: SpeakerProfile, inventory: tuple[str, ...], sample_rate: int):
    """Per-phoneme band frequencies/gains for one speaker (cached)."""
    key = (speaker.template_seed, speaker.condition, speaker.severity, inventory, sample_rate)
    if key in _prototype_cache:
        return _prototype_cache[key]
    from .features import mel_center_frequencies

    centers = mel_center_frequencies(80, sample_rate)
    lo_bin, hi_bin = 12, 76
    drift = CONTRAST_DRIFT * speaker.severity if speaker.condition == "dysarthric" else 0.0
    mid = (lo_bin + hi_bin) / 2.0
    table = {}
    for idx, phoneme in enumerate(inventory):
        rng = _rng(speaker.template_seed, f"proto-{phoneme}")
        # Grid code with 8-bin spacing: band positions are canonical per
        # phoneme (speakers vary gains, phases and durations, not the
        # code), so prototypes stay separable across speakers.
        bins = np.array(
            [
                lo_bin + (idx % 8) * 8,
                lo_bin + 4 + ((idx >> 3) % 8) * 8,
            ],
            dtype=float,
        )
        bins = bins * (1.0 - drift) + mid * drift
        bins = np.clip(np.round(bins), 0, 79).astype(int)
        gains = rng.uniform(0.85, 1.0, size=2)
        if drift:
            gains = gains ** (1.0 - 0.5 * speaker.severity)
        dur_jitter = rng.uniform(0.9, 1.1)
        table[phoneme] = (centers[bins], gains, phoneme in _FRICATIVES, dur_jitter)
    _prototype_cache[key] = table
    return table


def _render_phoneme(freqs, gains, fricative: bool, n: int, sample_rate: int, rng) -> np.ndarray:
    t = np.arange(n) / sample_rate
    seg = np.zeros(n)
    for f, g in zip(freqs, gains):
        phase = rng.uniform(0.0, 2.0 * math.pi)
        tone = np.sin(2.0 * math.pi * f * t + phase)
        if fricative:
            # Narrow-band noise: slow random amplitude on the carrier.
            coarse = rng.standard_normal(max(2, n // 160 + 2))
            am = np.interp(np.arange(n), np.linspace(0, n - 1, coarse.size), coarse)
            tone = tone * (0.6 + 0.4 * np.tanh(am))
        seg += g * tone
    ramp = min(n // 4, max(1, int(0.005 * sample_rate)))
    env = np.ones(n)
    env[:ramp] = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
    env[n - ramp:] = env[:ramp][::-1]
    return 0.12 * seg * env


def synth_utterance(
    transcript: str,
    speaker: SpeakerProfile,
    lexicon: Lexicon,
    seed: int,
    sample_rate: int = 16000,
) -> tuple[Waveform, list[tuple[str, float, float]]]:
    """Render a transcript; returns the waveform and the emitted alignment.

    The alignment records the phonemes actually rendered (after any
    substitution draws) with start/end times in seconds.
    """
    words = transcript.split()
    for word in words:
        if word not in lexicon:
            raise DataError(f"word {word!r} not in lexicon")
    protos = _speaker_prototypes(speaker, lexicon.inventory, sample_rate)
    stretch = speaker.tempo_factor
    if speaker.condition == "dysarthric":
        stretch *= 1.0 + speaker.severity
    rng = _rng(seed, speaker.id, transcript)

    pieces = [np.zeros(int(round(_EDGE_PAD * stretch * sample_rate)))]
    alignment: list[tuple[str, float, float]] = []
    cursor = pieces[0].size
    gap = np.zeros(int(round(_WORD_GAP * stretch * sample_rate)))
    for w_idx, word in enumerate(words):
        if w_idx:
            pieces.append(gap)
            cursor += gap.size
        for phoneme in lexicon.pronounce(word):
            emitted = speaker.draw_phoneme(phoneme, rng)
            freqs, gains, fricative, dur_jitter = protos[emitted]
            n = int(round(_phoneme_duration(emitted) * dur_jitter * stretch * sample_rate))
            n = max(n, 16)
            seg = _render_phoneme(freqs, gains, fricative, n, sample_rate, rng)
            alignment.append((emitted, cursor / sample_rate, (cursor + n) / sample_rate))
            pieces.append(seg)
            cursor += n
    pieces.append(np.zeros(int(round(_EDGE_PAD * stretch * sample_rate))))
    return Waveform(np.concatenate(pieces), sample_rate), alignment


# -------------------------------------------------------------- sentences

_DET = "the a this that these those my his her its some no one two five six seven ten".split()
_PRON = "i we you he she they it".split()
_PREP = "in on at by with under over behind".split()
_ADV = "often never soon today again slowly quickly then".split()
_VERB = (
    "run sit sleep eat see look make take give find keep hold help play sing ride "
    "read feed push pull put like love need stop open close clean win fly smile sell "
    "tell visit measure stand go dance sees likes eats makes was is are will can must "
    "has have had did does don't can't isn't it's"
).split()
_ADJ = (
    "big red green blue black white grey old new good bad sad happy fast slow hot "
    "cold dry full nice little shiny quiet usual"
).split()

_TEMPLATES = (
    ("DET", "NOUN", "VERB"),
    ("DET", "ADJ", "NOUN"),
    ("PRON", "VERB", "NOUN"),
    ("NOUN", "VERB", "ADV"),
    ("PRON", "VERB", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "NOUN"),
    ("VERB", "DET", "NOUN"),
    ("ADJ", "NOUN", "VERB"),
)


class SentenceGrammar:
    """Fixed template grammar over the lexicon.

    Ten percent of the words (seeded by the lexicon contents alone) are
    reserved for the train split, mirroring keeping proper nouns out of
    the test set.
    """

    def __init__(self, lexicon: Lexicon):
        words = lexicon.words
        known = {
            "DET": [w for w in _DET if w in lexicon],
            "PRON": [w for w in _PRON if w in lexicon],
            "PREP": [w for w in _PREP if w in lexicon],
            "ADV": [w for w in _ADV if w in lexicon],
            "VERB": [w for w in _VERB if w in lexicon],
            "ADJ": [w for w in _ADJ if w in lexicon],
        }
        claimed = set().union(*known.values())
        known["NOUN"] = [w for w in words if w not in claimed]
        self.classes = {k: v for k, v in known.items() if v}
        if "NOUN" not in self.classes:
            raise DataError("lexicon leaves no words for the noun class")
        reserve_rng = _rng(_crc("\n".join(words)), "train-reserve")
        n_reserved = max(1, len(words) // 10)
        self.reserved = frozenset(
            words[i] for i in reserve_rng.choice(len(words), size=n_reserved, replace=False)
        )
        self.templates = tuple(
            tpl for tpl in _TEMPLATES if all(slot in self.classes for slot in tpl)
        ) or (("NOUN",) * 4,)

    def sentence(self, rng: np.random.Generator, split: str) -> str:
        tpl = self.templates[int(rng.integers(len(self.templates)))]
        out = []
        for slot in tpl:
            pool = self.classes[slot]
            if split == "test":
                filtered = [w for w in pool if w not in self.reserved]
                pool = filtered or pool
            out.append(pool[int(rng.integers(len(pool)))])
        return " ".join(out)


# -------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    transcript: str
    split: str
    duration_s: float
    feature_path: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "utterance_id": self.utterance_id,
                "speaker_id": self.speaker_id,
                "transcript": self.transcript,
                "split": self.split,
                "duration_s": self.duration_s,
                "feature_path": self.feature_path,
            },
            sort_keys=True,
        )


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.utterance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate utterance_id in manifest")
        for r in self.records:
            if r.split not in ("train", "test"):
                raise DataError(f"bad split {r.split!r} for {r.utterance_id}")

    @property
    def speakers(self) -> list[str]:
        seen: list[str] = []
        for r in self.records:
            if r.speaker_id not in seen:
                seen.append(r.speaker_id)
        return seen

    def for_speaker(self, speaker_id: str, split: str | None = None) -> list[ManifestRecord]:
        return [
            r
            for r in self.records
            if r.speaker_id == speaker_id and (split is None or r.split == split)
        ]

    def subset(self, split: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == split])


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(r.to_json() + "\n")


def load_manifest(path) -> Manifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(ManifestRecord(**d))
    return Manifest(records)


def save_speakers(speakers: list[SpeakerProfile], path) -> None:
    payload = [
        {
            "id": s.id,
            "condition": s.condition,
            "severity": s.severity,
            "substitution_map": s.substitution_map,
            "tempo_factor": s.tempo_factor,
            "template_seed": s.template_seed,
        }
        for s in speakers
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_speakers(path) -> list[SpeakerProfile]:
    with open(path, "r", encoding="utf-8") as fh:
        return [SpeakerProfile(**d) for d in json.load(fh)]


# ------------------------------------------------------------ corpus build

@dataclass(frozen=True)
class ConditionSpec:
    condition: str
    n_speakers: int
    severity_lo: float = 0.0
    severity_hi: float = 0.0

    def severities(self) -> list[float]:
        if self.n_speakers == 1:
            return [self.severity_lo]
        return list(np.linspace(self.severity_lo, self.severity_hi, self.n_speakers))


@dataclass(frozen=True)
class CorpusSpec:
    conditions: tuple[ConditionSpec, ...]
    sentences_per_speaker: int
    master_seed: int
    sample_rate: int = 16000
    train_noise: NoiseConfig | None = NoiseConfig(target_snr_db=12.0, snr_jitter_db=4.0)

    def __post_init__(self):
        if self.sentences_per_speaker < 1:
            raise ConfigError("need at least one sentence per speaker")
        if not self.conditions or any(c.n_speakers < 1 for c in self.conditions):
            raise ConfigError("every condition needs at least one speaker")


def build_speakers(spec: CorpusSpec, lexicon: Lexicon) -> list[SpeakerProfile]:
    speakers = []
    for cond in spec.conditions:
        for j, severity in enumerate(cond.severities()):
            sid = f"{cond.condition}-{j:02d}"
            if any(s.id == sid for s in speakers):
                raise ConfigError(f"duplicate speaker id {sid}")
            speakers.append(
                make_speaker(sid, cond.condition, round(float(severity), 6), lexicon.inventory,
                             seed=spec.master_seed)
            )
    return speakers


def _split_for(index: int, total: int) -> str:
    if total >= 10:
        return "test" if index % 10 == 9 else "train"
    return "test" if (total > 1 and index == total - 1) else "train"


def build_corpus(
    spec: CorpusSpec,
    lexicon: Lexicon,
    out_dir,
    feature_cfg: FeatureConfig | None = None,
) -> tuple[Manifest, list[SpeakerProfile]]:
    """Synthesize speakers, sentences, waveforms and stored features.

    Deterministic for a fixed spec: every utterance derives its random
    stream from (master_seed, utterance_id), so parallel or re-entrant
    generation cannot change the output. Train utterances get additive
    noise per spec.train_noise; test utterances stay clean.
    """
    if len(lexicon) == 0:
        raise DataError("empty lexicon")
    feature_cfg = feature_cfg or FeatureConfig()
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    grammar = SentenceGrammar(lexicon)
    speakers = build_speakers(spec, lexicon)

    records = []
    for speaker in speakers:
        total = spec.sentences_per_speaker
        for i in range(total):
            utt_id = f"{speaker.id}-{i:04d}"
            split = _split_for(i, total)
            sent_rng = _rng(spec.master_seed, utt_id, "sentence")
            transcript = grammar.sentence(sent_rng, split)
            wave, _ = synth_utterance(
                transcript, speaker, lexicon,
                seed=spec.master_seed ^ _crc(utt_id), sample_rate=spec.sample_rate,
            )
            if split == "train" and spec.train_noise is not None:
                noise = NoiseConfig(
                    target_snr_db=spec.train_noise.target_snr_db,
                    snr_jitter_db=spec.train_noise.snr_jitter_db,
                    noise_kind=spec.train_noise.noise_kind,
                    seed=spec.master_seed ^ _crc(utt_id + "/noise"),
                )
                wave = add_noise(wave, noise)
            feats = logmel(wave, feature_cfg, source=utt_id)
            rel_path = f"features/{utt_id}.feat"
            write_feature_dump(out_dir / rel_path, feats.frames)
            records.append(
                ManifestRecord(
                    utterance_id=utt_id,
                    speaker_id=speaker.id,
                    transcript=transcript,
                    split=split,
                    duration_s=round(wave.duration_s, 6),
                    feature_path=rel_path,
                )
            )
    manifest = Manifest(records)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    save_speakers(speakers, out_dir / "speakers.json")
    return manifest, speakers


# ---------------------------------------------------------------- budgets

@dataclass(frozen=True)
class BudgetSpec:
    budget_s: float | str
    selection_seed: int = 0

    def __post_init__(self):
        if isinstance(self.budget_s, str):
            if self.budget_s != "all":
                raise ConfigError(f"budget must be seconds or 'all', got {self.budget_s!r}")
        elif self.budget_s <= 0:
            raise ConfigError("budget_s must be positive")

    @property
    def label(self) -> str:
        return "all" if self.budget_s == "all" else f"{float(self.budget_s):g}s"


def make_budget_subset(manifest: Manifest, speaker_id: str, budget: BudgetSpec) -> Manifest:
    """Seeded-shuffle greedy prefix of the speaker's train split.

    Selection stops when the next utterance would exceed the budget; at
    least one utterance is always included, so subsets are monotone in
    the budget under a fixed seed.
    """
    train = manifest.for_speaker(speaker_id, "train")
    if not train:
        raise DataError(f"speaker {speaker_id!r} has no train records")
    if budget.budget_s == "all":
        return Manifest(list(train))
    order = _rng(budget.selection_seed, speaker_id, "budget").permutation(len(train))
    chosen: list[int] = []
    total = 0.0
    for idx in order:
        dur = train[idx].duration_s
        if chosen and total + dur > float(budget.budget_s):
            break
        chosen.append(int(idx))
        total += dur
    return Manifest([train[i] for i in sorted(chosen)])
