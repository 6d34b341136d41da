# services/evaluation_service.py

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, EmptyBenchmark, EmptySamples, KTooLarge, UsageError
from models import AnalysisBlock, BenchItem, EvalReport, NEG_TYPES, SimilarityStat
from services.encoder_service import ModelParams, forward_image, forward_text
from services.text_processing_service import Vocabulary

logger = logging.getLogger(__name__)

BOOTSTRAP_CHUNK = 2000
DIRECTIONS = ("t2i", "i2t")


class ScoringModel(ABC):
    """Anything that maps images and captions into one unit-norm space."""

    temperature: float = 1.0

    @abstractmethod
    def embed_images(self, features: np.ndarray) -> np.ndarray:
        """(n, d_x) -> (n, d) unit rows."""
        pass

    @abstractmethod
    def embed_texts(self, captions: Sequence[str]) -> np.ndarray:
        """n captions -> (n, d) unit rows."""
        pass


class EncoderScoringModel(ScoringModel):
    def __init__(self, params: ModelParams, vocabulary: Vocabulary):
        self.params = params
        self.vocabulary = vocabulary
        self.temperature = params.tau

    def embed_images(self, features: np.ndarray) -> np.ndarray:
        return forward_image(self.params, np.asarray(features, dtype=np.float64)).u

    def embed_texts(self, captions: Sequence[str]) -> np.ndarray:
        return forward_text(self.params, [self.vocabulary.encode_text(c) for c in captions]).u


@dataclass
class PairScore:
    item_id: str
    neg_type: str
    positive_score: float
    negative_score: float

    @property
    def correct(self) -> bool:
        # a tie is a miss
        return self.positive_score > self.negative_score


@dataclass
class _EmbeddedItems:
    img: np.ndarray  # (n_items, d)
    pos: np.ndarray  # (n_items, d)
    neg: np.ndarray  # (n_pairs, d)
    owner: np.ndarray  # (n_pairs,) item index of each negative
    types: List[str]


def _embed_items(model: ScoringModel, items: Sequence[BenchItem]) -> _EmbeddedItems:
    img = model.embed_images(np.asarray([item.feature for item in items], dtype=np.float64))
    pos = model.embed_texts([item.positive for item in items])
    neg_captions, owner, types = [], [], []
    for idx, item in enumerate(items):
        for neg in item.negatives:
            neg_captions.append(neg.caption)
            owner.append(idx)
            types.append(neg.type.value)
    neg = model.embed_texts(neg_captions)
    return _EmbeddedItems(img=img, pos=pos, neg=neg, owner=np.asarray(owner, dtype=np.int64), types=types)


def score_items(model: ScoringModel, items: Sequence[BenchItem]) -> List[PairScore]:
    """S(I, T_pos) and S(I, T_neg) for every (item, negative) pair, in item order."""
    if not items:
        raise EmptyBenchmark("Eval: benchmark has no items")
    emb = _embed_items(model, items)
    inv_tau = 1.0 / model.temperature
    pos_scores = np.sum(emb.img * emb.pos, axis=1) * inv_tau
    neg_scores = np.sum(emb.img[emb.owner] * emb.neg, axis=1) * inv_tau
    return [
        PairScore(
            item_id=items[owner].id,
            neg_type=neg_type,
            positive_score=float(pos_scores[owner]),
            negative_score=float(neg_scores[p]),
        )
        for p, (owner, neg_type) in enumerate(zip(emb.owner.tolist(), emb.types))
    ]


def report_from_scores(scores: Sequence[PairScore], n_items: int) -> EvalReport:
    if not scores:
        raise EmptyBenchmark("Eval: benchmark has no pairs")
    pairs: Dict[str, int] = {}
    correct: Dict[str, int] = {}
    for s in scores:
        pairs[s.neg_type] = pairs.get(s.neg_type, 0) + 1
        correct[s.neg_type] = correct.get(s.neg_type, 0) + int(s.correct)
    order = [k.value for k in NEG_TYPES if k.value in pairs]
    total = sum(pairs.values())
    hits = sum(correct.values())
    return EvalReport(
        overall_accuracy=hits / total,
        per_type_accuracy={k: correct[k] / pairs[k] for k in order},
        total_pairs=total,
        correct_pairs=hits,
        per_type_pairs={k: pairs[k] for k in order},
        per_type_correct={k: correct[k] for k in order},
        items=n_items,
    )


def pairwise_accuracy(model: ScoringModel, items: Sequence[BenchItem]) -> EvalReport:
    return report_from_scores(score_items(model, items), len(items))


def recall_from_matrix(sims: np.ndarray, k: int, direction: str) -> float:
    """
    sims[i, j] = S(image_i, text_j), true pairs on the diagonal. A candidate outranks
    the true match if it scores higher, or scores equal and has a lower index.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if direction not in DIRECTIONS:
        raise UsageError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise DataError(f"Eval: retrieval needs index-aligned pairs, got a {sims.shape} matrix")
    if k < 1:
        raise UsageError("k must be >= 1")
    n = sims.shape[0]
    if k > n:
        raise KTooLarge(f"Eval: k={k} exceeds the {n} candidates")
    # rows are queries, columns candidates
    scores = sims.T if direction == "t2i" else sims
    true = np.diag(scores)[:, None]
    idx = np.arange(n)
    ahead = (scores > true) | ((scores == true) & (idx[None, :] < idx[:, None]))
    ranks = ahead.sum(axis=1)
    return float(np.mean(ranks < k))


def recall_at_k(model: ScoringModel, images: np.ndarray, texts: Sequence[str], k: int, direction: str) -> float:
    if len(images) != len(texts):
        raise DataError(f"Eval: {len(images)} images but {len(texts)} texts")
    if len(texts) == 0:
        raise EmptyBenchmark("Eval: no retrieval pairs")
    img = model.embed_images(np.asarray(images, dtype=np.float64))
    txt = model.embed_texts(list(texts))
    return recall_from_matrix((img @ txt.T) / model.temperature, k, direction)


def recall_table(model: ScoringModel, items: Sequence[BenchItem], ks: Sequence[int]) -> Dict[str, float]:
    """R@K in both directions over the items' (image, positive) pairs; cutoffs above the item count are skipped."""
    if not items:
        raise EmptyBenchmark("Eval: benchmark has no items")
    img = model.embed_images(np.asarray([item.feature for item in items], dtype=np.float64))
    txt = model.embed_texts([item.positive for item in items])
    sims = (img @ txt.T) / model.temperature
    table = {}
    for k in ks:
        if k > len(items):
            logger.warning(f"Eval: skipping R@{k}, only {len(items)} items.")
            continue
        for direction in DIRECTIONS:
            table[f"{direction}_R@{k}"] = recall_from_matrix(sims, k, direction)
    return table


def bootstrap_ci(samples: Sequence[float], n_resamples: int, confidence: float, seed: int) -> Tuple[float, float]:
    """Percentile bootstrap of the mean."""
    data = np.asarray(samples, dtype=np.float64)
    if data.size == 0:
        raise EmptySamples("Bootstrap: no samples")
    if not 0.0 < confidence < 1.0:
        raise UsageError("confidence must be in (0, 1)")
    if n_resamples < 1:
        raise UsageError("n_resamples must be >= 1")
    lo_data, hi_data = float(data.min()), float(data.max())
    if lo_data == hi_data:
        return lo_data, hi_data

    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    n = data.size
    for start in range(0, n_resamples, BOOTSTRAP_CHUNK):
        stop = min(start + BOOTSTRAP_CHUNK, n_resamples)
        picks = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = data[picks].mean(axis=1)
    tail = (1.0 - confidence) / 2.0
    low, high = np.percentile(means, [100.0 * tail, 100.0 * (1.0 - tail)])
    # the interval always contains the sample mean, also for very few resamples
    mean = float(data.mean())
    low, high = min(float(low), mean), max(float(high), mean)
    return float(np.clip(low, lo_data, hi_data)), float(np.clip(high, lo_data, hi_data))


def _stat(samples: List[float], n_resamples: int, confidence: float, seed: int) -> SimilarityStat:
    low, high = bootstrap_ci(samples, n_resamples, confidence, seed)
    return SimilarityStat(mean=float(np.mean(samples)), ci_low=low, ci_high=high, n=len(samples))


def modality_gap_stats(
    model: ScoringModel,
    items: Sequence[BenchItem],
    n_resamples: int = 50000,
    confidence: float = 0.99,
    seed: int = 0,
) -> AnalysisBlock:
    """
    Raw cosine, temperature excluded:
      intra-modal  cos(T_pos, T_neg)
      cross-modal  cos(I, T_pos) - cos(I, T_neg)
    per negative type and pooled under "ALL".
    """
    if not items:
        raise EmptyBenchmark("Eval: benchmark has no items")
    emb = _embed_items(model, items)
    intra = np.sum(emb.pos[emb.owner] * emb.neg, axis=1)
    gap = np.sum(emb.img * emb.pos, axis=1)[emb.owner] - np.sum(emb.img[emb.owner] * emb.neg, axis=1)

    intra_block: Dict[str, SimilarityStat] = {}
    gap_block: Dict[str, SimilarityStat] = {}
    types = np.asarray(emb.types)
    for offset, k in enumerate([t.value for t in NEG_TYPES] + ["ALL"]):
        mask = np.ones(len(types), dtype=bool) if k == "ALL" else types == k
        if not np.any(mask):
            continue
        intra_block[k] = _stat(intra[mask].tolist(), n_resamples, confidence, seed + offset)
        gap_block[k] = _stat(gap[mask].tolist(), n_resamples, confidence, seed + offset)
    return AnalysisBlock(intra_modal=intra_block, cross_modal_gap=gap_block, n_resamples=n_resamples, confidence=confidence)


def per_item_rows(scores: Sequence[PairScore]) -> List[Dict[str, object]]:
    return [
        {
            "item_id": s.item_id,
            "type": s.neg_type,
            "positive_score": s.positive_score,
            "negative_score": s.negative_score,
            "correct": int(s.correct),
        }
        for s in scores
    ]
