"""Pronunciation lexicon: word -> SAMPA phoneme sequence.

Text format: one entry per line, ``word<TAB>phoneme phoneme ...``;
``#`` starts a comment. The phoneme inventory is the ordered set of
symbols that appear across all pronunciations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .errors import DataError

_WORD_RE = re.compile(r"^[a-z][a-z']*$")


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    inventory: tuple[str, ...]

    def __post_init__(self):
        if len(self.inventory) < 20:
            raise DataError(
                f"phoneme inventory too small: {len(self.inventory)} symbols (need >= 20)"
            )
        allowed = set(self.inventory)
        for word, prons in self.entries.items():
            if not _WORD_RE.match(word):
                raise DataError(f"invalid lexicon word {word!r}")
            bad = [p for p in prons if p not in allowed]
            if bad:
                raise DataError(f"word {word!r} uses symbols outside inventory: {bad}")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def pronounce(self, word: str) -> tuple[str, ...]:
        try:
            return self.entries[word]
        except KeyError:
            raise DataError(f"word {word!r} not in lexicon") from None


def parse_lexicon(text: str) -> Lexicon:
    entries: dict[str, tuple[str, ...]] = {}
    inventory: list[str] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "\t" in line:
            word, pron = line.split("\t", 1)
        else:
            word, _, pron = line.partition(" ")
        word = word.strip()
        phonemes = tuple(pron.split())
        if not word or not phonemes:
            raise DataError(f"lexicon line {lineno}: need 'word<TAB>phonemes'")
        if word in entries:
            raise DataError(f"lexicon line {lineno}: duplicate word {word!r}")
        entries[word] = phonemes
        for p in phonemes:
            if p not in seen:
                seen.add(p)
                inventory.append(p)
    return Lexicon(entries=entries, inventory=tuple(inventory))


def load_lexicon(path) -> Lexicon:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_lexicon(fh.read())


def save_lexicon(lex: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# word<TAB>SAMPA phonemes\n")
        for word in lex.words:
            fh.write(f"{word}\t{' '.join(lex.entries[word])}\n")


def builtin_lexicon() -> Lexicon:
    """The shipped ~200-word lexicon used by the benchmark corpora."""
    text = resources.files("asrlab").joinpath("assets/lexicon.txt").read_text("utf-8")
    return parse_lexicon(text)
