# helpers/train_helpers.py

import logging
import math
import os
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from config import settings
from errors import BadRecord, NonFinite
from models import (
    CheckpointFile,
    DatasetRecord,
    MetricsRecord,
    NEG_TYPES,
    ThresholdState,
    TrainConfig,
)
from services.encoder_service import ModelParams, init_params, params_from_checkpoint, params_to_checkpoint
from services.hard_negative_service import HardNegativeGenerator, is_placeholder
from services.loss_service import Batch, LossFlags, batch_gaps, forward_batch, loss_gradients, update_thresholds
from services.optimizer_service import OptimizerHyper, OptimizerState, init_optimizer_state, optimizer_step
from services.streams import derive_stream
from services.text_processing_service import Lexicon, Vocabulary, default_lexicon
from helpers.dataset_helpers import augment_records, build_generator
from helpers.manifest_helpers import atomic_write_text, write_json

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 101
CHECKPOINT_NAME = "final.ckpt"
METRICS_NAME = "metrics.jsonl"

EvalHook = Callable[[ModelParams, Vocabulary, int], None]


@dataclass
class PreparedRecord:
    record_id: str
    feature: np.ndarray
    pos_ids: np.ndarray
    neg_ids: List[Optional[np.ndarray]]
    valid: np.ndarray  # (4,) bool


@dataclass
class TrainState:
    params: ModelParams
    optimizer: OptimizerState
    thresholds: ThresholdState
    step: int = 0


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: str
    metrics_path: str
    steps_run: int
    digest: str
    epoch_thresholds: List[List[float]] = field(default_factory=list)


def prepare_records(records: Sequence[DatasetRecord], vocabulary: Vocabulary, config: TrainConfig) -> List[PreparedRecord]:
    """Token ids and the validity mask; placeholders and disabled types are masked."""
    enabled = set(config.hn_types)
    prepared = []
    for record in records:
        pos_ids = vocabulary.encode_text(record.caption)
        if pos_ids.size == 0:
            raise BadRecord(f"record {record.id}: caption {record.caption!r} tokenizes to empty")
        hn = record.hard_negatives()
        neg_ids: List[Optional[np.ndarray]] = []
        valid = np.zeros(len(NEG_TYPES), dtype=bool)
        for k, neg_type in enumerate(NEG_TYPES):
            caption = hn.get(neg_type)
            ids = None if is_placeholder(caption) else vocabulary.encode_text(caption)
            if ids is not None and ids.size and neg_type in enabled:
                valid[k] = True
                neg_ids.append(ids)
            else:
                neg_ids.append(None)
        prepared.append(PreparedRecord(
            record_id=record.id,
            feature=np.asarray(record.feature, dtype=np.float64),
            pos_ids=pos_ids,
            neg_ids=neg_ids,
            valid=valid,
        ))
    return prepared


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return derive_stream(seed, SHUFFLE_STREAM, epoch).permutation(n)


def assemble_batch(prepared: Sequence[PreparedRecord], index_window: Sequence[int], batch_id: str) -> Batch:
    rows = [prepared[int(i)] for i in index_window]
    return Batch(
        batch_id=batch_id,
        record_ids=[r.record_id for r in rows],
        features=np.stack([r.feature for r in rows]),
        pos_ids=[r.pos_ids for r in rows],
        neg_ids=[list(r.neg_ids) for r in rows],
        valid=np.stack([r.valid for r in rows]),
    )


def iter_batches(prepared: Sequence[PreparedRecord], config: TrainConfig, epoch: int):
    order = epoch_order(len(prepared), config.seed, epoch)
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        yield assemble_batch(prepared, order[start:start + config.batch_size], f"e{epoch}-b{b}")


def _masked_means(values: np.ndarray, valid: np.ndarray) -> List[Optional[float]]:
    counts = valid.sum(axis=0)
    sums = np.where(valid, values, 0.0).sum(axis=0)
    return [float(sums[k] / counts[k]) if counts[k] else None for k in range(valid.shape[1])]


def train_step(state: TrainState, batch: Batch, config: TrainConfig, epoch: int = 0, hyper: Optional[OptimizerHyper] = None):
    """
    (1) encode, (2) losses with th^t, (3) optimizer update, (4) th^{t+1} from this
    step's detached similarities, (5) metrics. Returns (new state, MetricsRecord).
    """
    hyper = hyper or OptimizerHyper.from_config(config)
    flags = LossFlags(use_hn=config.use_hn, hn_pool=config.hn_pool, include_rel_term=config.include_rel_term)
    fwd = forward_batch(state.params, batch)
    breakdown, grads, fwd = loss_gradients(
        state.params, batch, state.thresholds, config.effective_alpha, config.effective_beta, flags, fwd=fwd,
    )
    if not math.isfinite(breakdown.total):
        raise NonFinite(f"Trainer: loss is {breakdown.total} on batch {batch.batch_id}", batch_id=batch.batch_id)

    params, opt_state = optimizer_step(state.params, grads, state.optimizer, hyper)
    params.log_tau = np.asarray(np.maximum(params.log_tau, math.log(config.min_temperature)))
    if not params.all_finite():
        raise NonFinite(f"Trainer: parameters became non-finite after batch {batch.batch_id}", batch_id=batch.batch_id)

    sims_diag = np.diag(fwd.sims)
    if config.threshold_mode == "adaptive":
        thresholds = update_thresholds(state.thresholds, sims_diag, fwd.hn, config.upper_bound)
    else:
        thresholds = ThresholdState(values=[config.fixed_threshold] * len(NEG_TYPES), step=state.thresholds.step + 1)

    gaps, counts = batch_gaps(sims_diag, fwd.hn)
    hn_means = _masked_means(fwd.hn.s_hn, fwd.hn.valid)
    record = MetricsRecord(
        step=state.step,
        epoch=epoch,
        batch_id=batch.batch_id,
        itc_hn=breakdown.itc_hn,
        imc=breakdown.imc,
        cmr=breakdown.cmr,
        cmr_hinge=breakdown.cmr_hinge,
        cmr_rel=breakdown.cmr_rel,
        total=breakdown.total,
        temperature=state.params.tau,
        thresholds=state.thresholds.as_dict(),
        hinge_rate=breakdown.hinge_rate,
        mean_pos_sim=float(np.mean(sims_diag)),
        mean_hn_sim={k.value: hn_means[i] for i, k in enumerate(NEG_TYPES)},
        mean_gap={k.value: gaps[i] for i, k in enumerate(NEG_TYPES)},
        valid_count={k.value: counts[i] for i, k in enumerate(NEG_TYPES)},
    )
    return TrainState(params=params, optimizer=opt_state, thresholds=thresholds, step=state.step + 1), record


class MetricsWriter:
    """Append-only JSONL stream; writes happen on one worker thread, so lines land in submission order."""

    def __init__(self, path: str, flush_every: int = 50, append: bool = False):
        self.path = path
        self.flush_every = max(1, flush_every)
        self._buffer: List[str] = []
        self._pending: List[Future] = []
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="metrics")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if not append:
            open(path, "w", encoding="utf-8").close()

    def _write(self, chunk: str) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(chunk)

    def append(self, record: MetricsRecord) -> None:
        self._buffer.append(record.model_dump_json() + "\n")
        if len(self._buffer) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if self._buffer:
            self._pending.append(self._executor.submit(self._write, "".join(self._buffer)))
            self._buffer = []

    def close(self) -> None:
        self.flush()
        for future in self._pending:
            future.result()
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str) -> List[MetricsRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [MetricsRecord.model_validate_json(line) for line in fh if line.strip()]


def initial_state(config: TrainConfig, vocabulary: Vocabulary, feature_dim: int) -> TrainState:
    params = init_params(len(vocabulary), config.token_dim, config.embed_dim, feature_dim, config.seed)
    if config.threshold_mode == "fixed":
        thresholds = ThresholdState.fixed(config.fixed_threshold)
    else:
        thresholds = ThresholdState()
    return TrainState(params=params, optimizer=init_optimizer_state(OptimizerHyper.from_config(config), params), thresholds=thresholds)


def save_checkpoint(path: str, state: TrainState, vocabulary: Vocabulary, config: TrainConfig) -> CheckpointFile:
    ckpt = params_to_checkpoint(
        state.params,
        vocabulary.entries,
        vocabulary.ngrams,
        step=state.step,
        thresholds=state.thresholds,
        optimizer=state.optimizer.to_file(),
        config=config.model_dump(mode="json"),
    )
    atomic_write_text(path, ckpt.model_dump_json() + "\n")
    return ckpt


def load_checkpoint(path: str) -> CheckpointFile:
    with open(path, "r", encoding="utf-8") as fh:
        return CheckpointFile.model_validate_json(fh.read())


def state_from_checkpoint(ckpt: CheckpointFile, config: TrainConfig) -> TrainState:
    params = params_from_checkpoint(ckpt)
    hyper = OptimizerHyper.from_config(config)
    if ckpt.optimizer is not None and ckpt.optimizer.name == hyper.name:
        optimizer = OptimizerState.from_file(ckpt.optimizer, params)
    else:
        logger.warning("Trainer: checkpoint has no matching optimizer state; starting a fresh one.")
        optimizer = init_optimizer_state(hyper, params)
    thresholds = ckpt.thresholds or ThresholdState()
    return TrainState(params=params, optimizer=optimizer, thresholds=thresholds, step=ckpt.step)


def _dump_nonfinite(out_dir: str, batch: Batch, state: TrainState, error: NonFinite) -> str:
    path = os.path.join(out_dir, f"nonfinite-{batch.batch_id}.json")
    write_json(path, {
        "batch_id": batch.batch_id,
        "step": state.step,
        "record_ids": batch.record_ids,
        "temperature": state.params.tau,
        "thresholds": state.thresholds.as_dict(),
        "valid": batch.valid.astype(int).tolist(),
        "error": str(error),
    })
    return path


def train(
    config: TrainConfig,
    records: Sequence[DatasetRecord],
    out_dir: str,
    eval_hook: Optional[EvalHook] = None,
    resume: Optional[CheckpointFile] = None,
    lexicon: Optional[Lexicon] = None,
) -> TrainResult:
    """
    epochs x ceil(N / batch_size) steps. Writes `final.ckpt` and `metrics.jsonl` into
    out_dir. Records without hard negatives get them generated once (epoch 0 stream);
    regen_per_epoch regenerates every epoch.
    """
    if not records:
        raise BadRecord("Trainer: dataset is empty")
    lexicon = lexicon or default_lexicon()
    if resume is not None:
        vocabulary = Vocabulary(resume.vocabulary, resume.text_ngrams)
    else:
        vocabulary = Vocabulary.from_lexicon(lexicon, config.text_ngrams)

    generator: Optional[HardNegativeGenerator] = None
    needs_generation = config.regen_per_epoch or not all(r.has_hard_negatives() for r in records)
    if needs_generation:
        generator = build_generator(lexicon, [r.caption for r in records])
    base_records = list(records)
    if not config.regen_per_epoch and generator is not None:
        base_records = augment_records(base_records, generator, config.seed)
    prepared = prepare_records(base_records, vocabulary, config)

    feature_dim = len(prepared[0].feature)
    state = state_from_checkpoint(resume, config) if resume is not None else initial_state(config, vocabulary, feature_dim)
    steps_per_epoch = math.ceil(len(prepared) / config.batch_size)
    start_epoch, skip = divmod(state.step, steps_per_epoch)
    hyper = OptimizerHyper.from_config(config)

    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    logger.info(
        f"Trainer: {len(prepared)} records, {config.epochs} epochs x {steps_per_epoch} steps, "
        f"alpha={config.effective_alpha} beta={config.effective_beta} threshold_mode={config.threshold_mode} "
        f"(starting at step {state.step})."
    )

    steps_run = 0
    epoch_thresholds: List[List[float]] = []
    with MetricsWriter(metrics_path, flush_every=settings.metrics_flush_every, append=resume is not None) as writer:
        for epoch in range(start_epoch, config.epochs):
            epoch_prepared = prepared
            if config.regen_per_epoch:
                epoch_records = augment_records(list(records), generator, config.seed, epoch)
                epoch_prepared = prepare_records(epoch_records, vocabulary, config)
            for b, batch in enumerate(iter_batches(epoch_prepared, config, epoch)):
                if epoch == start_epoch and b < skip:
                    continue
                try:
                    state, record = train_step(state, batch, config, epoch=epoch, hyper=hyper)
                except NonFinite as e:
                    e.batch_id = batch.batch_id
                    e.dump_path = _dump_nonfinite(out_dir, batch, state, e)
                    logger.error(f"Trainer: non-finite values on batch {batch.batch_id}; diagnostics at {e.dump_path}")
                    raise
                writer.append(record)
                steps_run += 1
            epoch_thresholds.append(list(state.thresholds.values))
            logger.info(f"Trainer: epoch {epoch} done at step {state.step}, thresholds {state.thresholds.as_dict()}, tau {state.params.tau:.4f}.")
            if eval_hook is not None and (epoch + 1) % config.eval_every == 0:
                eval_hook(state.params, vocabulary, epoch)

    save_checkpoint(ckpt_path, state, vocabulary, config)
    return TrainResult(
        state=state,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        steps_run=steps_run,
        digest=state.params.digest(),
        epoch_thresholds=epoch_thresholds,
    )

