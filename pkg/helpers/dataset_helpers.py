# helpers/dataset_helpers.py

import logging
import os
from typing import Dict, Iterable, List, Optional

from models import DatasetRecord, HardNegativeRecord, WorldSpec
from services.hard_negative_service import HardNegativeGenerator, LexiconMaskFiller
from services.streams import derive_stream
from services.synthworld_service import SynthDataset, make_dataset
from services.text_processing_service import Lexicon, LexiconTagger, tokenize
from helpers.manifest_helpers import write_jsonl

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"


def corpus_words(captions: Iterable[str]) -> List[str]:
    words = set()
    for caption in captions:
        words.update(tok.surface for tok in tokenize(caption))
    return sorted(words)


def build_generator(lexicon: Lexicon, captions: Optional[Iterable[str]] = None) -> HardNegativeGenerator:
    """Lexicon filler, restricted to the corpus' own words when captions are given."""
    vocabulary = corpus_words(captions) if captions is not None else None
    return HardNegativeGenerator(LexiconTagger(lexicon), LexiconMaskFiller(lexicon, vocabulary=vocabulary))


def hardneg_stream(seed: int, index: int, epoch: int = 0):
    """Per-record stream; epoch 0 is the stream `gen-hardneg` uses."""
    if epoch == 0:
        return derive_stream(seed, index)
    return derive_stream(seed, index, epoch)


def augment_records(
    records: List[DatasetRecord],
    generator: HardNegativeGenerator,
    seed: int,
    epoch: int = 0,
) -> List[DatasetRecord]:
    """Returns copies of `records` with all four hn_* fields (re)generated."""
    augmented = []
    for index, record in enumerate(records):
        hn = generator.generate(record.caption, hardneg_stream(seed, index, epoch))
        augmented.append(record.model_copy(update={"hn_rel": hn.rel, "hn_att": hn.att, "hn_act": hn.act, "hn_obj": hn.obj}))
    return augmented


def run_gen_hardneg(records: List[DatasetRecord], lexicon: Lexicon, seed: int, out_path: str, restrict_to_corpus: bool = True) -> Dict[str, float]:
    """Writes the augmentation JSONL (one HardNegativeRecord per input) and returns per-type placeholder rates."""
    generator = build_generator(lexicon, [r.caption for r in records] if restrict_to_corpus else None)
    augmented = augment_records(records, generator, seed)
    out_records = [HardNegativeRecord.from_set(r.id, r.caption, r.hard_negatives()) for r in augmented]
    write_jsonl(out_path, out_records)
    rates = generator.placeholder_rates([r.hard_negatives() for r in augmented])
    logger.info(f"HardNegativeGenerator: {len(out_records)} records -> {out_path}; placeholder rates {rates}")
    return rates


def merge_hard_negatives(records: List[DatasetRecord], augmentation: List[HardNegativeRecord]) -> List[DatasetRecord]:
    """Attaches augmentation rows to dataset records by id; records without a row are left as they are."""
    by_id = {row.id: row for row in augmentation}
    merged = []
    for record in records:
        row = by_id.get(record.id)
        if row is None:
            merged.append(record)
            continue
        merged.append(record.model_copy(update={"hn_rel": row.hn_rel, "hn_att": row.hn_att, "hn_act": row.hn_act, "hn_obj": row.hn_obj}))
    return merged


def run_synth(world: WorldSpec, n: int, sigma: float, seed: int, out_dir: str) -> Dict[str, str]:
    dataset: SynthDataset = make_dataset(world, n, sigma, seed)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"train": os.path.join(out_dir, TRAIN_FILE), "eval": os.path.join(out_dir, EVAL_FILE)}
    write_jsonl(paths["train"], dataset.train)
    write_jsonl(paths["eval"], dataset.eval_items)
    return paths
