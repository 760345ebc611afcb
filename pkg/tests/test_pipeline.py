import dataclasses

import numpy as np
import pytest
import torch

from cephalo.config import RunConfig
from cephalo.data import split_folds
from cephalo.decode import ensemble_coords
from cephalo.model import ModelSpec, build_model, load_checkpoint
from cephalo.predict import predict_records, read_submission, write_submission
from cephalo.train import _prepare_samples, train_all, train_fold, validate_fold
from conftest import make_record


def tiny_config(**overrides) -> RunConfig:
    spec = ModelSpec(variant="nano", encoder_drop_path=0.0, decoder_drop_path=0.0,
                     residual_dropout2d=0.0)
    base = dict(
        model=spec,
        accumulation_schedule=((0, 2),),
        max_epochs=2,
        early_stop_patience=5,
        n_folds=2,
        top_k=4,
        rcnn_pad=16.0,
        target_height=64,
        preprocess="gt_box",
        augment_enabled=False,
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def records():
    rng = np.random.default_rng(7)
    return [make_record(rng, image_id=f"img{i}", height=200, width=170, spacing=0.1)
            for i in range(6)]


@pytest.fixture(scope="module")
def trained_fold(records, tmp_path_factory):
    out = tmp_path_factory.mktemp("fold0")
    config = tiny_config()
    folds = split_folds([r.image_id for r in records], config.n_folds, config.seed)
    state = train_fold(config, 0, records, folds.train_ids(0), folds.fold_ids(0), out)
    return config, records, folds, state


def test_train_fold_saves_checkpoint_with_provenance(trained_fold):
    config, _, _, state = trained_fold
    assert state.checkpoint_path is not None
    model, payload = load_checkpoint(state.checkpoint_path)
    assert payload["config_hash"] == config.hash()
    assert payload["run_config"]["seed"] == config.seed
    assert payload["fold_index"] == 0
    assert payload["best_val_mre_mm"] == state.best_val_mre_mm


def test_checkpoint_reload_reproduces_recorded_val_mre(trained_fold):
    config, records, folds, state = trained_fold
    model, payload = load_checkpoint(state.checkpoint_path)
    by_id = {r.image_id: r for r in records}
    val_samples = _prepare_samples([by_id[i] for i in folds.fold_ids(0)], config)
    mre_mm, _ = validate_fold(model, val_samples, config)
    assert mre_mm == pytest.approx(payload["best_val_mre_mm"], abs=1e-6)


def test_train_fold_with_augmentation_runs(records, tmp_path):
    config = tiny_config(augment_enabled=True, max_epochs=1)
    folds = split_folds([r.image_id for r in records], config.n_folds, config.seed)
    state = train_fold(config, 1, records, folds.train_ids(1), folds.fold_ids(1), tmp_path)
    assert state.checkpoint_path is not None


def _random_models(n, seed=0):
    models = []
    for i in range(n):
        torch.manual_seed(seed + i)
        spec = ModelSpec(variant="nano", encoder_drop_path=0.0, decoder_drop_path=0.0,
                         residual_dropout2d=0.0)
        models.append(build_model(spec).eval())
    return models


def test_predict_shapes_and_submission_round_trip(records, tmp_path):
    config = tiny_config()
    models = _random_models(1)
    bundles, failures = predict_records(config, models, records[:2], preprocess="gt_box")
    assert failures == []
    assert len(bundles) == 2
    for b in bundles:
        assert b.ensembled_coords.shape == (53, 2)
        assert len(b.per_model_coords) == 1
        np.testing.assert_array_equal(b.per_model_coords[0], b.ensembled_coords)

    path = tmp_path / "submission.csv"
    write_submission(bundles, path)
    back = read_submission(path)
    assert set(back) == {b.image_id for b in bundles}
    for b in bundles:
        np.testing.assert_array_equal(back[b.image_id], b.ensembled_coords)


def test_ensemble_compositionality(records, tmp_path):
    """4-model predict equals the mean of 4 single-model predicts within 1e-9."""
    config = tiny_config()
    models = _random_models(4)
    joint, _ = predict_records(config, models, records[:2], preprocess="gt_box")
    singles = [predict_records(config, [m], records[:2], preprocess="gt_box")[0]
               for m in models]
    for img_idx, bundle in enumerate(joint):
        per_model = [singles[m][img_idx].ensembled_coords for m in range(4)]
        manual_mean = ensemble_coords(per_model)
        assert np.abs(bundle.ensembled_coords - manual_mean).max() < 1e-9


def test_predict_skips_unreadable_image(records, tmp_path):
    import copy

    config = tiny_config()
    broken = copy.copy(records[0])
    broken.image_id = "broken"
    broken._pixels = None
    broken.path = tmp_path / "missing.png"
    bundles, failures = predict_records(config, _random_models(1), [broken, records[1]],
                                        preprocess="gt_box")
    assert failures == ["broken"]
    assert [b.image_id for b in bundles] == [records[1].image_id]


def test_train_all_produces_n_checkpoints(records, tmp_path):
    config = tiny_config(n_folds=4, max_epochs=1, augment_enabled=False)
    result = train_all(config, records, tmp_path, detector=None, detector_train=None)
    assert len(result["checkpoints"]) == 4
    assert result["detector_path"] is None
    metrics = result["metrics"]
    assert len(metrics["folds"]) == 4
    for row in metrics["folds"]:
        assert row["mre_mm"] >= 0 and 0 <= row["sdr_2mm_pct"] <= 100
    assert "mre_mm" in metrics["ensemble"]
    assert (tmp_path / "fold_metrics.json").exists()
    # identical seed reruns give identical fold assignments
    again = split_folds([r.image_id for r in records], 4, config.seed)
    assert again.assignment == result["fold_assignment"]


def test_nonfinite_loss_aborts_with_dump(records, tmp_path):
    import copy

    config = tiny_config(max_epochs=1)
    poisoned = [copy.copy(r) for r in records]
    for rec in poisoned:  # nan pixels force non-finite activations mid-epoch
        rec._pixels = np.full((rec.height, rec.width), np.nan, dtype=np.float32)
    folds = split_folds([r.image_id for r in poisoned], config.n_folds, config.seed)
    with pytest.raises(RuntimeError, match="non-finite"):
        train_fold(config, 0, poisoned, folds.train_ids(0), folds.fold_ids(0), tmp_path)
    assert (tmp_path / "abort_fold0.json").exists()