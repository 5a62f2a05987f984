"""Recognition metrics: WER, phoneme alignment, error profiles, KL.

WER uses the reference length as its denominator, so wer(ref, hyp) and
wer(hyp, ref) can differ; insertions can push WER above 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .lexicon import Lexicon

KL_EPSILON = 1e-6


@dataclass
class EditOps:
    """Token alignment: ops are (kind, ref_token, hyp_token) triples."""

    ops: list[tuple[str, str | None, str | None]]

    @property
    def substitutions(self) -> int:
        return sum(op[0] == "sub" for op in self.ops)

    @property
    def deletions(self) -> int:
        return sum(op[0] == "del" for op in self.ops)

    @property
    def insertions(self) -> int:
        return sum(op[0] == "ins" for op in self.ops)

    @property
    def matches(self) -> int:
        return sum(op[0] == "match" for op in self.ops)

    @property
    def ref_len(self) -> int:
        return self.matches + self.substitutions + self.deletions

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def replay(self) -> tuple[list[str], list[str]]:
        """Reconstruct (ref, hyp) from the op list."""
        ref = [r for kind, r, _ in self.ops if kind in ("match", "sub", "del")]
        hyp = [h for kind, _, h in self.ops if kind in ("match", "sub", "ins")]
        return ref, hyp


def align_sequences(ref, hyp) -> EditOps:
    """Minimal-cost alignment with unit costs.

    Traceback tie-breaking prefers match > substitute > delete > insert,
    which makes alignments deterministic.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        row = dist[i]
        prev = dist[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)
    ops: list[tuple[str, str | None, str | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dist[i - 1, j - 1] == here:
            ops.append(("match", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1, j - 1] + 1 == here:
            ops.append(("sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1, j] + 1 == here:
            ops.append(("del", ref[i - 1], None))
            i = i - 1
        else:
            ops.append(("ins", None, hyp[j - 1]))
            j = j - 1
    ops.reverse()
    return EditOps(ops)


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_len


def wer(ref_words, hyp_words) -> WerResult:
    """Word error rate from a minimal edit-distance alignment."""
    ref_words = list(ref_words)
    if not ref_words:
        raise DataError("empty reference: WER undefined")
    ops = align_sequences(ref_words, hyp_words)
    return WerResult(
        substitutions=ops.substitutions,
        deletions=ops.deletions,
        insertions=ops.insertions,
        ref_len=ops.ref_len,
    )


def phoneme_align(ref, hyp) -> EditOps:
    """Alias of align_sequences for phoneme sequences (either may be empty)."""
    return align_sequences(ref, hyp)


def to_phonemes(words, lexicon: Lexicon) -> tuple[tuple[str, ...] | None, list[str]]:
    """Map words to their concatenated pronunciations.

    Returns (phonemes, oov_words); phonemes is None when any word is out
    of vocabulary, which excludes the utterance from phoneme analysis.
    """
    oov = [w for w in words if w not in lexicon]
    if oov:
        return None, oov
    seq: list[str] = []
    for w in words:
        seq.extend(lexicon.pronounce(w))
    return tuple(seq), []


@dataclass
class ErrorProfile:
    """Per-phoneme miss statistics plus the produced-mistake distribution."""

    inventory: tuple[str, ...]
    gt_counts: dict[str, int] = field(default_factory=dict)
    del_counts: dict[str, int] = field(default_factory=dict)
    sub_out_counts: dict[str, int] = field(default_factory=dict)
    sub_in_counts: dict[str, int] = field(default_factory=dict)
    ins_counts: dict[str, int] = field(default_factory=dict)
    n_alignments: int = 0
    oov_utterances: int = 0

    def miss_rate(self, phoneme: str) -> float:
        gt = self.gt_counts.get(phoneme, 0)
        if gt == 0:
            return 0.0
        missed = self.del_counts.get(phoneme, 0) + self.sub_out_counts.get(phoneme, 0)
        return missed / gt

    def _vector(self, *count_maps) -> np.ndarray:
        return np.array(
            [sum(m.get(p, 0) for m in count_maps) for p in self.inventory], dtype=np.float64
        )

    def miss_distribution(self) -> np.ndarray:
        """P(phoneme | a deletion or substitution mistake occurred)."""
        v = self._vector(self.del_counts, self.sub_out_counts)
        total = v.sum()
        return v / total if total else v

    def produced_distribution(self) -> np.ndarray:
        """P(phoneme | it was inserted or substituted in by the recognizer)."""
        v = self._vector(self.ins_counts, self.sub_in_counts)
        total = v.sum()
        return v / total if total else v

    def top_missed(self, k: int = 5) -> tuple[list[str], float]:
        dist = self.miss_distribution()
        order = np.argsort(-dist)[:k]
        return [self.inventory[i] for i in order], float(dist[order].sum())

    def top_produced(self, k: int = 2) -> tuple[list[str], float]:
        dist = self.produced_distribution()
        order = np.argsort(-dist)[:k]
        return [self.inventory[i] for i in order], float(dist[order].sum())


def error_profile(alignments, inventory, oov_utterances: int = 0) -> ErrorProfile:
    """Aggregate EditOps over a corpus (order-invariant, counts add)."""
    alignments = list(alignments)
    if not alignments:
        raise DataError("need at least one alignment for an error profile")
    prof = ErrorProfile(inventory=tuple(inventory), oov_utterances=oov_utterances)
    for ops in alignments:
        prof.n_alignments += 1
        for kind, ref_tok, hyp_tok in ops.ops:
            if kind in ("match", "sub", "del"):
                prof.gt_counts[ref_tok] = prof.gt_counts.get(ref_tok, 0) + 1
            if kind == "del":
                prof.del_counts[ref_tok] = prof.del_counts.get(ref_tok, 0) + 1
            elif kind == "sub":
                prof.sub_out_counts[ref_tok] = prof.sub_out_counts.get(ref_tok, 0) + 1
                prof.sub_in_counts[hyp_tok] = prof.sub_in_counts.get(hyp_tok, 0) + 1
            elif kind == "ins":
                prof.ins_counts[hyp_tok] = prof.ins_counts.get(hyp_tok, 0) + 1
    if sum(prof.gt_counts.values()) == 0:
        raise DataError("zero ground-truth phonemes in profile")
    return prof


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPSILON) -> float:
    """KL(P || Q) in nats after add-eps smoothing and renormalization."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError("KL requires distributions on a shared support")
    p = p + eps
    q = q + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def compare_profiles(standard: ErrorProfile, condition_base: ErrorProfile,
                     condition_finetuned: ErrorProfile) -> dict:
    """Error-distribution comparison across systems on a shared inventory."""
    if not (standard.inventory == condition_base.inventory == condition_finetuned.inventory):
        raise DataError("profiles use different phoneme inventories")
    inv = standard.inventory
    per_phoneme = [
        {
            "phoneme": p,
            "miss_standard": standard.miss_rate(p),
            "miss_base": condition_base.miss_rate(p),
            "miss_finetuned": condition_finetuned.miss_rate(p),
            "gt_standard": standard.gt_counts.get(p, 0),
            "gt_base": condition_base.gt_counts.get(p, 0),
            "gt_finetuned": condition_finetuned.gt_counts.get(p, 0),
        }
        for p in inv
    ]
    kl_produced = {
        "base_vs_standard": kl_divergence(
            condition_base.produced_distribution(), standard.produced_distribution()
        ),
        "finetuned_vs_standard": kl_divergence(
            condition_finetuned.produced_distribution(), standard.produced_distribution()
        ),
    }
    kl_missed = {
        "base_vs_standard": kl_divergence(
            condition_base.miss_distribution(), standard.miss_distribution()
        ),
        "finetuned_vs_standard": kl_divergence(
            condition_finetuned.miss_distribution(), standard.miss_distribution()
        ),
    }
    top_phonemes, top_share = condition_base.top_missed(5)
    ins_phonemes, ins_share = condition_base.top_produced(2)
    return {
        "per_phoneme": per_phoneme,
        "kl_produced": kl_produced,
        "kl_missed": kl_missed,
        "top_missed": {"phonemes": top_phonemes, "share": top_share},
        "top_produced": {"phonemes": ins_phonemes, "share": ins_share},
    }
