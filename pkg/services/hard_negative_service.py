# services/hard_negative_service.py

import logging
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional

import numpy as np

from errors import FillerViolation
from models import HN_PLACEHOLDER, NegType, PosClass, HardNegativeSet
from services.text_processing_service import Lexicon, TaggedCaption, Tagger

logger = logging.getLogger(__name__)

MASKED_CLASS: Dict[NegType, PosClass] = {
    NegType.ATT: PosClass.ADJ,
    NegType.ACT: PosClass.VERB,
    NegType.OBJ: PosClass.NOUN,
}


class MaskFiller(ABC):
    """Proposes a replacement for one masked token of a caption."""

    lexicon: Lexicon

    @abstractmethod
    def fill(self, tagged: TaggedCaption, mask_index: int, pos_class: PosClass, rng_stream: np.random.Generator) -> Optional[str]:
        """Return a word of `pos_class` different from the masked word, or None if no such word exists."""
        pass


class LexiconMaskFiller(MaskFiller):
    """Uniform sample from the lexicon words of the masked class, minus the masked word."""

    def __init__(self, lexicon: Lexicon, vocabulary: Optional[Iterable[str]] = None):
        self.lexicon = lexicon
        allowed = set(vocabulary) if vocabulary is not None else None
        self._candidates: Dict[PosClass, List[str]] = {}
        for pos in PosClass:
            words = lexicon.words_of(pos)
            if allowed is not None:
                words = [w for w in words if w in allowed]
            self._candidates[pos] = words

    def fill(self, tagged: TaggedCaption, mask_index: int, pos_class: PosClass, rng_stream: np.random.Generator) -> Optional[str]:
        masked_word = tagged.words[mask_index]
        candidates = [w for w in self._candidates[pos_class] if w != masked_word]
        if not candidates:
            return None
        return candidates[int(rng_stream.integers(len(candidates)))]


def is_placeholder(caption: Optional[str]) -> bool:
    return caption is None or caption == HN_PLACEHOLDER


def gen_relation(tagged: TaggedCaption) -> str:
    """Swap the first and last NOUN tokens; placeholder with fewer than two nouns."""
    nouns = tagged.positions_of(PosClass.NOUN)
    if len(nouns) < 2:
        return HN_PLACEHOLDER
    first, last = nouns[0], nouns[-1]
    words = tagged.words
    if words[first] == words[last]:
        # swapping identical words would reproduce the positive
        return HN_PLACEHOLDER
    words[first], words[last] = words[last], words[first]
    return " ".join(words)


def gen_masked(
    tagged: TaggedCaption,
    neg_type: NegType,
    filler: MaskFiller,
    rng_stream: np.random.Generator,
) -> str:
    if neg_type not in MASKED_CLASS:
        raise ValueError(f"gen_masked handles ATT/ACT/OBJ, not {neg_type.value}")
    pos_class = MASKED_CLASS[neg_type]
    positions = tagged.positions_of(pos_class)
    if not positions:
        return HN_PLACEHOLDER

    mask_index = positions[int(rng_stream.integers(len(positions)))]
    words = tagged.words
    masked_word = words[mask_index]
    replacement = filler.fill(tagged, mask_index, pos_class, rng_stream)
    if replacement is None:
        return HN_PLACEHOLDER
    if replacement == masked_word:
        raise FillerViolation(f"filler returned the masked word {masked_word!r} for {neg_type.value}")
    if not replacement or len(replacement.split()) != 1:
        raise FillerViolation(f"filler returned {replacement!r}, which is not a single word")
    if filler.lexicon.class_of(replacement) != pos_class:
        raise FillerViolation(
            f"filler returned {replacement!r} ({filler.lexicon.class_of(replacement).value}), expected {pos_class.value}"
        )
    words[mask_index] = replacement
    return " ".join(words)


def gen_all(caption: str, tagger: Tagger, filler: MaskFiller, rng_stream: np.random.Generator) -> HardNegativeSet:
    """All four featured hard negatives. ATT, ACT, OBJ draw from `rng_stream` in that order."""
    tagged = tagger.tag_text(caption)
    return HardNegativeSet(
        rel=gen_relation(tagged),
        att=gen_masked(tagged, NegType.ATT, filler, rng_stream),
        act=gen_masked(tagged, NegType.ACT, filler, rng_stream),
        obj=gen_masked(tagged, NegType.OBJ, filler, rng_stream),
    )


class HardNegativeGenerator:
    def __init__(self, tagger: Tagger, filler: MaskFiller):
        self.tagger = tagger
        self.filler = filler

    def generate(self, caption: str, rng_stream: np.random.Generator) -> HardNegativeSet:
        return gen_all(caption, self.tagger, self.filler, rng_stream)

    def placeholder_rates(self, hard_negative_sets: List[HardNegativeSet]) -> Dict[str, float]:
        if not hard_negative_sets:
            return {}
        n = len(hard_negative_sets)
        return {
            k.value: sum(1 for hn in hard_negative_sets if is_placeholder(hn.get(k))) / n
            for k in NegType
        }
