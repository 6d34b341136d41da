# services/text_processing_service.py

import hashlib
import logging
import string
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import LexiconError
from models import PosClass

logger = logging.getLogger(__name__)

_EDGE_PUNCTUATION = string.punctuation + "“”‘’…"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class Token:
    surface: str
    index: int


@dataclass(frozen=True)
class TaggedCaption:
    tokens: Tuple[Tuple[Token, PosClass], ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> List[str]:
        return [tok.surface for tok, _ in self.tokens]

    @property
    def classes(self) -> List[PosClass]:
        return [pos for _, pos in self.tokens]

    def positions_of(self, pos_class: PosClass) -> List[int]:
        return [tok.index for tok, pos in self.tokens if pos == pos_class]

    def text(self) -> str:
        return " ".join(self.words)


def tokenize(text: str) -> List[Token]:
    """Lowercase, split on whitespace, strip punctuation from token edges, drop empties."""
    surfaces = []
    for raw in text.lower().split():
        word = raw.strip(_EDGE_PUNCTUATION)
        if word:
            surfaces.append(word)
    return [Token(surface=w, index=i) for i, w in enumerate(surfaces)]


class Lexicon:
    """Closed word -> PosClass table. Unknown words are OTHER."""

    def __init__(self, entries: Dict[str, PosClass], version: str):
        self._entries = dict(entries)
        self.version = version
        self._by_class: Dict[PosClass, List[str]] = {p: [] for p in PosClass}
        for word in sorted(self._entries):
            self._by_class[self._entries[word]].append(word)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, PosClass]], version: str = "inline") -> "Lexicon":
        return cls({w.lower(): PosClass(p) for w, p in pairs}, version)

    @classmethod
    def load(cls, path: str) -> "Lexicon":
        """Reads `word<TAB>CLASS` lines; `#` lines and blank lines are skipped."""
        lexicon_path = Path(path)
        try:
            raw = lexicon_path.read_bytes()
        except OSError as e:
            raise LexiconError(f"Cannot read lexicon {path}: {e}") from e
        entries: Dict[str, PosClass] = {}
        for line_no, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise LexiconError(f"{path}:{line_no}: expected word<TAB>CLASS, got {line!r}")
            word, pos_name = parts[0].strip().lower(), parts[1].strip()
            try:
                pos = PosClass(pos_name)
            except ValueError as e:
                raise LexiconError(f"{path}:{line_no}: unknown class {pos_name!r}") from e
            if word in entries and entries[word] != pos:
                raise LexiconError(f"{path}:{line_no}: {word!r} listed as both {entries[word].value} and {pos.value}")
            entries[word] = pos
        version = f"{lexicon_path.stem}@{hashlib.sha256(raw).hexdigest()[:12]}"
        logger.info(f"Lexicon: loaded {len(entries)} words from {path} ({version}).")
        return cls(entries, version)

    def class_of(self, word: str) -> PosClass:
        return self._entries.get(word, PosClass.OTHER)

    def words_of(self, pos_class: PosClass) -> List[str]:
        """Sorted, so sampling from it is stable across platforms."""
        return list(self._by_class[pos_class])

    def __contains__(self, word: str) -> bool:
        return word in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def words(self) -> List[str]:
        return sorted(self._entries)


class Tagger(ABC):
    @abstractmethod
    def tag(self, tokens: Sequence[Token]) -> TaggedCaption:
        pass

    def tag_text(self, text: str) -> TaggedCaption:
        return self.tag(tokenize(text))


class LexiconTagger(Tagger):
    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon

    def tag(self, tokens: Sequence[Token]) -> TaggedCaption:
        return tag(tokens, self.lexicon)


def tag(tokens: Sequence[Token], lexicon: Lexicon) -> TaggedCaption:
    return TaggedCaption(tokens=tuple((tok, lexicon.class_of(tok.surface)) for tok in tokens))


class Vocabulary:
    """
    Token-id table for the text encoder. Id 0 is `<unk>`; unigrams follow in sorted
    order; with ngrams=2 every ordered pair of lexicon words gets an id as well.
    """

    def __init__(self, entries: List[str], ngrams: int):
        if not entries or entries[0] != UNK_TOKEN:
            raise LexiconError("vocabulary must start with <unk>")
        self.entries = list(entries)
        self.ngrams = ngrams
        self._ids = {e: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon, ngrams: int = 2) -> "Vocabulary":
        words = lexicon.words
        entries = [UNK_TOKEN] + words
        if ngrams >= 2:
            entries += [f"{a} {b}" for a in words for b in words]
        return cls(entries, ngrams)

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, entry: str) -> int:
        return self._ids.get(entry, 0)

    def encode(self, words: Sequence[str]) -> np.ndarray:
        ids = [self.id_of(w) for w in words]
        if self.ngrams >= 2:
            ids += [self.id_of(f"{a} {b}") for a, b in zip(words, words[1:])]
        return np.asarray(ids, dtype=np.int64)

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode([tok.surface for tok in tokenize(text)])


_default_lexicon: Optional[Lexicon] = None

def default_lexicon() -> Lexicon:
    global _default_lexicon
    if _default_lexicon is None:
        from config import settings
        _default_lexicon = Lexicon.load(settings.lexicon_path)
    return _default_lexicon
