'''
Training loop: batching and masking, determinism, resume, the threshold trace
and the loss toggles.
'''

import math

import numpy as np
import pytest

import helpers.train_helpers as train_helpers
from errors import BadRecord, NonFinite
from models import HN_PLACEHOLDER, DatasetRecord, NegType, TrainConfig
from helpers.ablate_helpers import run_ablation
from helpers.dataset_helpers import run_synth
from helpers.train_helpers import (
    CHECKPOINT_NAME,
    assemble_batch,
    initial_state,
    load_checkpoint,
    prepare_records,
    read_metrics,
    train,
    train_step,
)
from services.encoder_service import TENSOR_NAMES, ModelParams, init_params
from services.loss_service import LossFlags, loss_gradients
from services.evaluation_service import EncoderScoringModel, bootstrap_ci, modality_gap_stats, pairwise_accuracy
from services.synthworld_service import make_dataset
from services.text_processing_service import Vocabulary


def run(config, records, out_dir, lexicon, **kwargs):
    return train(config, records, str(out_dir), lexicon=lexicon, **kwargs)


def record(record_id, caption, **hn):
    return DatasetRecord(id=record_id, feature=[0.1] * 35, caption=caption, **hn)


# -------------------------------------------------------------------------------------------------
# Batching
# -------------------------------------------------------------------------------------------------

def test_prepare_records_masks_placeholders_and_disabled_types(lexicon, tiny_config):
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=2)
    rec = record(
        "r0",
        "the red small circle is touching the blue large square",
        hn_rel="the blue large square is touching the red small circle",
        hn_att=HN_PLACEHOLDER,
        hn_act="the red small circle is facing the blue large square",
        hn_obj="the red small star is touching the blue large square",
    )
    prepared = prepare_records([rec], vocabulary, tiny_config)
    assert prepared[0].valid.tolist() == [True, False, True, True]
    assert prepared[0].neg_ids[1] is None

    only_rel = tiny_config.model_copy(update={"hn_types": [NegType.REL]})
    assert prepare_records([rec], vocabulary, only_rel)[0].valid.tolist() == [True, False, False, False]


def test_assemble_batch_stacks_rows(lexicon, tiny_config):
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=2)
    recs = [
        record("a", "the red circle", hn_rel=HN_PLACEHOLDER, hn_att="the blue circle"),
        record("b", "the blue square", hn_rel=HN_PLACEHOLDER, hn_obj="the blue star"),
    ]
    prepared = prepare_records(recs, vocabulary, tiny_config)
    batch = assemble_batch(prepared, [1, 0], "e0-b0")
    assert batch.record_ids == ["b", "a"]
    assert batch.features.shape == (2, 35)
    assert batch.valid.tolist() == [[False, False, False, True], [False, True, False, False]]
    assert len(batch) == 2


def test_empty_caption_is_bad_record(lexicon, tiny_config):
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=2)
    with pytest.raises(BadRecord):
        prepare_records([record("x", "...")], vocabulary, tiny_config)


def test_empty_dataset_is_bad_record(tmp_path, lexicon, tiny_config):
    with pytest.raises(BadRecord):
        run(tiny_config, [], tmp_path, lexicon)


# -------------------------------------------------------------------------------------------------
# Loop
# -------------------------------------------------------------------------------------------------

def test_training_is_deterministic(tmp_path, small_dataset, lexicon, tiny_config):
    a = run(tiny_config, small_dataset.train, tmp_path / "a", lexicon)
    b = run(tiny_config, small_dataset.train, tmp_path / "b", lexicon)
    assert a.digest == b.digest
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    steps_per_epoch = -(-len(small_dataset.train) // tiny_config.batch_size)
    assert a.steps_run == 2 * steps_per_epoch
    assert [m.step for m in read_metrics(a.metrics_path)] == list(range(a.steps_run))


def test_zero_epochs_writes_empty_metrics(tmp_path, small_dataset, lexicon, tiny_config):
    config = tiny_config.model_copy(update={"epochs": 0})
    result = run(config, small_dataset.train, tmp_path, lexicon)
    assert result.steps_run == 0
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    ckpt = load_checkpoint(str(tmp_path / CHECKPOINT_NAME))
    assert ckpt.step == 0
    assert ckpt.thresholds.values == [0.0] * 4


def test_threshold_trace_follows_previous_gaps(tmp_path, small_dataset, lexicon, tiny_config):
    result = run(tiny_config, small_dataset.train, tmp_path, lexicon)
    metrics = read_metrics(result.metrics_path)
    assert metrics[0].thresholds == {"REL": 0.0, "ATT": 0.0, "ACT": 0.0, "OBJ": 0.0}
    for prev, cur in zip(metrics, metrics[1:]):
        for key, gap in prev.mean_gap.items():
            expected = prev.thresholds[key] if gap is None else min(tiny_config.upper_bound, max(0.0, gap))
            assert cur.thresholds[key] == expected
            assert 0.0 <= cur.thresholds[key] <= tiny_config.upper_bound


def test_fixed_thresholds_stay_constant(tmp_path, small_dataset, lexicon, tiny_config):
    config = tiny_config.model_copy(update={"threshold_mode": "fixed", "fixed_threshold": 5.0})
    result = run(config, small_dataset.train, tmp_path, lexicon)
    for m in read_metrics(result.metrics_path):
        assert set(m.thresholds.values()) == {5.0}
    assert result.state.thresholds.values == [5.0] * 4


def test_zero_weight_equals_disabled_term(tmp_path, small_dataset, lexicon, tiny_config):
    zero_beta = run(tiny_config.model_copy(update={"beta": 0.0}), small_dataset.train, tmp_path / "b0", lexicon)
    no_cmr = run(tiny_config.model_copy(update={"use_cmr": False}), small_dataset.train, tmp_path / "nc", lexicon)
    assert zero_beta.digest == no_cmr.digest
    zero_alpha = run(tiny_config.model_copy(update={"alpha": 0.0}), small_dataset.train, tmp_path / "a0", lexicon)
    no_imc = run(tiny_config.model_copy(update={"use_imc": False}), small_dataset.train, tmp_path / "ni", lexicon)
    assert zero_alpha.digest == no_imc.digest


def test_components_add_up_in_metrics(tmp_path, small_dataset, lexicon, tiny_config):
    result = run(tiny_config, small_dataset.train, tmp_path, lexicon)
    for m in read_metrics(result.metrics_path):
        assert m.total == pytest.approx(m.itc_hn + tiny_config.alpha * m.imc + tiny_config.beta * m.cmr, abs=1e-9)
        assert m.itc_hn >= 0.0
        assert m.cmr_hinge >= 0.0
        assert m.temperature >= tiny_config.min_temperature


def test_resume_reproduces_uninterrupted_run(tmp_path, small_dataset, lexicon, tiny_config):
    full = run(tiny_config, small_dataset.train, tmp_path / "full", lexicon)
    run(tiny_config.model_copy(update={"epochs": 1}), small_dataset.train, tmp_path / "part", lexicon)
    ckpt = load_checkpoint(str(tmp_path / "part" / CHECKPOINT_NAME))
    resumed = run(tiny_config, small_dataset.train, tmp_path / "part", lexicon, resume=ckpt)
    assert resumed.digest == full.digest
    assert resumed.state.thresholds.values == full.state.thresholds.values
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_eval_hook_runs_every_epoch(tmp_path, small_dataset, lexicon, tiny_config):
    seen = []
    run(tiny_config, small_dataset.train, tmp_path, lexicon, eval_hook=lambda params, vocabulary, epoch: seen.append(epoch))
    assert seen == [0, 1]


def test_nonfinite_batch_leaves_diagnostics(tmp_path, small_dataset, lexicon, tiny_config, monkeypatch):
    def explode(*args, **kwargs):
        raise NonFinite("Trainer: injected")

    monkeypatch.setattr(train_helpers, "loss_gradients", explode)
    with pytest.raises(NonFinite) as info:
        run(tiny_config, small_dataset.train, tmp_path, lexicon)
    assert info.value.batch_id == "e0-b0"
    assert (tmp_path / "nonfinite-e0-b0.json").exists()


def micro_batch(lexicon, config):
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=config.text_ngrams)
    first = [0.0] * 35
    first[0] = 1.0
    recs = [
        DatasetRecord(
            id="m0", feature=first, caption="the red small circle is touching the blue large square",
            hn_rel="the blue large square is touching the red small circle",
            hn_att="the green small circle is touching the blue large square",
            hn_act="the red small circle is facing the blue large square",
            hn_obj="the red small star is touching the blue large square",
        ),
        DatasetRecord(
            id="m1", feature=[0.5] * 35, caption="the yellow large cross is above the purple small hexagon",
            hn_rel="the yellow large hexagon is above the purple small cross",
            hn_att="the yellow small cross is above the purple small hexagon",
            hn_obj="the yellow large cross is above the purple small triangle",
        ),
    ]
    prepared = prepare_records(recs, vocabulary, config)
    return vocabulary, assemble_batch(prepared, [0, 1], "e0-b0")


def test_one_step_matches_closed_form_adam(lexicon, tiny_config):
    vocabulary, batch = micro_batch(lexicon, tiny_config)
    state = initial_state(tiny_config, vocabulary, 35)
    new_state, record = train_step(state, batch, tiny_config)

    flags = LossFlags(use_hn=True, hn_pool=tiny_config.hn_pool, include_rel_term=True)
    breakdown, grads, _ = loss_gradients(
        state.params, batch, state.thresholds, tiny_config.alpha, tiny_config.beta, flags,
    )
    # first Adam step: bias-corrected moments reduce to g and g*g
    expected = {}
    for name in TENSOR_NAMES:
        g = getattr(grads, name)
        expected[name] = getattr(state.params, name) - tiny_config.lr * g / (np.abs(g) + tiny_config.adam_eps)
    expected["log_tau"] = np.maximum(expected["log_tau"], math.log(tiny_config.min_temperature))
    reference = ModelParams(**expected)
    for name in TENSOR_NAMES:
        np.testing.assert_allclose(getattr(new_state.params, name), getattr(reference, name), rtol=1e-12, atol=1e-15)
    assert record.total == pytest.approx(breakdown.total)
    assert record.step == 0 and new_state.step == 1
    again, _ = train_step(state, batch, tiny_config)
    assert again.params.digest() == new_state.params.digest()


def test_end_to_end_digest_is_reproducible(tmp_path, lexicon, world, tiny_config):
    dataset = make_dataset(world, 64, 0.05, seed=0)
    a = run(tiny_config, dataset.train, tmp_path / "a", lexicon)
    b = run(tiny_config, dataset.train, tmp_path / "b", lexicon)
    assert a.digest == b.digest
    assert (tmp_path / "a" / CHECKPOINT_NAME).read_bytes() == (tmp_path / "b" / CHECKPOINT_NAME).read_bytes()
    other = run(tiny_config.model_copy(update={"seed": 1}), dataset.train, tmp_path / "c", lexicon)
    assert other.digest != a.digest


# -------------------------------------------------------------------------------------------------
# Directional checks on the default world, slow
# -------------------------------------------------------------------------------------------------

ACCEPTANCE_SEEDS = [0, 1, 2, 3, 4]
ABLATION_TOLERANCE = 0.005


@pytest.fixture(scope="module")
def default_world_runs(tmp_path_factory, lexicon, world):
    '''Full objective and ITC-only fine-tuning on the default world (n=2000), five training seeds.'''
    root = tmp_path_factory.mktemp("default_world")
    dataset = make_dataset(world, 2000, 0.05, seed=0)
    full = TrainConfig()
    itc_only = full.model_copy(update={"use_hn": False, "use_imc": False, "use_cmr": False})
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=full.text_ngrams)
    runs = {"full": {}, "itc": {}}
    for name, config in (("full", full), ("itc", itc_only)):
        for seed in ACCEPTANCE_SEEDS:
            result = run(config.model_copy(update={"seed": seed}), dataset.train, root / name / f"seed{seed}", lexicon)
            report = pairwise_accuracy(EncoderScoringModel(result.state.params, vocabulary), dataset.eval_items)
            runs[name][seed] = (result, report)
    return dataset, vocabulary, full, runs


@pytest.mark.slow
def test_training_beats_initialisation(tmp_path, lexicon, world):
    dataset = make_dataset(world, 400, 0.05, seed=0)
    config = TrainConfig(epochs=15, batch_size=32, token_dim=32, embed_dim=32, seed=0, lr=5e-3)
    result = run(config, dataset.train, tmp_path, lexicon)
    vocabulary = Vocabulary.from_lexicon(lexicon, ngrams=config.text_ngrams)
    before = init_params(len(vocabulary), config.token_dim, config.embed_dim, world.feature_dim, config.seed)
    acc_before = pairwise_accuracy(EncoderScoringModel(before, vocabulary), dataset.eval_items).overall_accuracy
    acc_after = pairwise_accuracy(EncoderScoringModel(result.state.params, vocabulary), dataset.eval_items).overall_accuracy
    assert acc_after > acc_before
    assert acc_after > 0.6


@pytest.mark.slow
def test_full_objective_beats_itc_only_on_relations(default_world_runs):
    _, _, _, runs = default_world_runs
    full_rel = [runs["full"][s][1].per_type_accuracy["REL"] for s in ACCEPTANCE_SEEDS]
    itc_rel = [runs["itc"][s][1].per_type_accuracy["REL"] for s in ACCEPTANCE_SEEDS]
    diffs = [f - i for f, i in zip(full_rel, itc_rel)]
    # bag-of-words failure of the baseline, then a paired gain of at least ten points
    assert np.mean(itc_rel) <= 0.65
    assert np.mean(diffs) >= 0.10
    low, _ = bootstrap_ci(diffs, 50000, 0.99, seed=0)
    assert low > 0.0


@pytest.mark.slow
def test_relation_threshold_rises_over_training(default_world_runs):
    _, _, config, runs = default_world_runs
    result, _ = runs["full"][0]
    metrics = read_metrics(result.metrics_path)
    first = [m.thresholds["REL"] for m in metrics if m.epoch == 0]
    last = [m.thresholds["REL"] for m in metrics if m.epoch == config.epochs - 1]
    assert np.mean(last) >= np.mean(first)
    for prev, cur in zip(metrics, metrics[1:]):
        for key, gap in prev.mean_gap.items():
            expected = prev.thresholds[key] if gap is None else min(config.upper_bound, max(0.0, gap))
            assert cur.thresholds[key] == pytest.approx(expected, abs=1e-9)


@pytest.mark.slow
def test_full_objective_separates_captions_more_than_itc_only(default_world_runs):
    dataset, vocabulary, _, runs = default_world_runs
    stats = {}
    for name in ("full", "itc"):
        result, _ = runs[name][0]
        model = EncoderScoringModel(result.state.params, vocabulary)
        stats[name] = modality_gap_stats(model, dataset.eval_items, n_resamples=50000, confidence=0.99, seed=0)
    full, itc = stats["full"], stats["itc"]
    # pooled over every negative type; the intervals must not overlap
    assert full.intra_modal["ALL"].mean < itc.intra_modal["ALL"].mean
    assert full.intra_modal["ALL"].ci_high < itc.intra_modal["ALL"].ci_low
    assert full.cross_modal_gap["ALL"].mean > itc.cross_modal_gap["ALL"].mean
    assert full.cross_modal_gap["ALL"].ci_low > itc.cross_modal_gap["ALL"].ci_high


@pytest.mark.slow
def test_loss_ablation_ordering(tmp_path, world):
    paths = run_synth(world, 2000, 0.05, 0, str(tmp_path / "data"))
    grid = {
        "baseline": "itc_hn",
        "points": [
            {"name": "full"},
            {"name": "itc_hn+imc", "use_cmr": False},
            {"name": "itc_hn+cmr", "use_imc": False},
            {"name": "itc_hn", "use_imc": False, "use_cmr": False},
        ],
    }
    report = run_ablation(grid, {}, ACCEPTANCE_SEEDS, paths["train"], paths["eval"], str(tmp_path / "ablate"))
    assert not report.errors
    overall = {row.point: row.overall_mean for row in report.rows}
    assert all(len(row.seeds) == len(ACCEPTANCE_SEEDS) for row in report.rows)
    assert overall["full"] >= overall["itc_hn+imc"]
    assert overall["full"] >= overall["itc_hn+cmr"]
    # "at least or about": within half a point of the hard-negative-only run
    assert overall["itc_hn+cmr"] >= overall["itc_hn"] - ABLATION_TOLERANCE
