import math
import os

import numpy as np
import pytest
from conftest import tiny_config_dict

from d2hnet.api.models import RunConfig
from d2hnet.nn.pipeline import build_deblurnet
from d2hnet.services.eval_service import EvalService, psnr, ssim, upscale_nearest
from d2hnet.services.file_service import FileService
from d2hnet.services.synth_service import SynthService
from d2hnet.services.train_service import TrainService, smoothed
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.procedural import moving_scene, write_video


def config_with(**sections) -> RunConfig:
    data = tiny_config_dict()
    for section, values in sections.items():
        data[section] = {**data.get(section, {}), **values}
    return RunConfig.model_validate(data)


@pytest.fixture
def trained(tmp_path, dataset, tiny_cfg):
    trainer = TrainService(tiny_cfg)
    out_dir = str(tmp_path / "run")
    deblur = trainer.train_stage(dataset.train, "deblur", out_dir)
    enhance = trainer.train_stage(dataset.train, "enhance", out_dir, deblur_checkpoint=deblur.checkpoint_path)
    return deblur, enhance


def test_psnr_oracles():
    x = np.full((1, 3, 16, 16), 0.5)
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)[None, None]
    assert psnr(checker, 1.0 - checker) == pytest.approx(0.0, abs=1e-12)


def test_ssim_oracles(rng):
    x = rng.random((1, 3, 24, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, np.clip(x + rng.normal(0, 0.3, x.shape), 0, 1)) < 0.9
    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)[None, None]
    assert ssim(checker, 1.0 - checker) < 0.0
    with pytest.raises(ShapeError):
        ssim(x[..., :10, :10], x[..., :10, :10])


def test_upscale_nearest_repeats_pixels():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(upscale_nearest(x, 2)[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_training_writes_checkpoints_and_loss_logs(trained, tiny_cfg):
    deblur, enhance = trained
    for result in (deblur, enhance):
        assert os.path.exists(result.checkpoint_path)
        assert len(result.losses) == tiny_cfg.train.steps_per_epoch
        assert FileService.read_loss_log(result.loss_log_path) == pytest.approx(result.losses)
        assert all(np.isfinite(result.losses))
    ckpt = FileService.load_checkpoint(enhance.checkpoint_path)
    assert ckpt.meta["stage"] == "enhance"
    assert any(key.startswith("enhance.optim/") for key in ckpt.tensors)
    assert ckpt.meta["optim_step"] == str(len(enhance.losses))
    assert "enhance.optim/step" not in ckpt.tensors


def test_enhance_stage_needs_a_deblur_checkpoint(tmp_path, dataset, tiny_cfg):
    with pytest.raises(ValueError, match="train-deblur"):
        TrainService(tiny_cfg).train_stage(dataset.train, "enhance", str(tmp_path), deblur_checkpoint=None)


def test_crop_must_fit_both_networks(tmp_path, dataset):
    cfg = config_with(augment={"crop_size": 12})
    with pytest.raises(ShapeError):
        TrainService(cfg).train_stage(dataset.train, "deblur", str(tmp_path))


def test_zero_learning_rate_keeps_initial_weights(tmp_path, dataset):
    cfg = config_with(train={"deblur_lr": 0.0})
    result = TrainService(cfg).train_stage(dataset.train, "deblur", str(tmp_path))
    initial = build_deblurnet(cfg.model, cfg.seed).state_dict(prefix="deblur.")
    tensors = FileService.load_checkpoint(result.checkpoint_path).tensors
    for key, value in initial.items():
        np.testing.assert_array_equal(tensors[key], value)


def test_training_is_thread_count_invariant(tmp_path, dataset, tiny_cfg):
    one = TrainService(tiny_cfg, threads=1).train_stage(dataset.train, "deblur", str(tmp_path / "t1"))
    four = TrainService(tiny_cfg, threads=4).train_stage(dataset.train, "deblur", str(tmp_path / "t4"))
    assert one.losses == four.losses
    with open(one.checkpoint_path, "rb") as a, open(four.checkpoint_path, "rb") as b:
        assert a.read() == b.read()


def test_evaluate_report_is_deterministic(tmp_path, dataset, tiny_cfg, trained):
    deblur_result, enhance_result = trained
    trainer = TrainService(tiny_cfg)
    deblur, enhance, warnings = trainer.load_models(deblur_result.checkpoint_path, enhance_result.checkpoint_path)
    assert warnings == []
    cache = str(tmp_path / "cache")
    first = EvalService.evaluate(dataset.train, deblur, enhance, tiny_cfg, cache, manifest_hash="abc")
    second = EvalService.evaluate(dataset.train, deblur, enhance, tiny_cfg, cache, manifest_hash="abc", threads=3)
    assert len(first.rows) == len(dataset.train)
    assert all(row.stage == "two-phase" for row in first.rows)
    assert first.stage2_present
    text = EvalService.render_tsv(first)
    assert text == EvalService.render_tsv(second)
    lines = text.splitlines()
    assert lines[0] == "#setting\tfull"
    assert "#manifest_hash\tabc" in lines
    assert lines[-1].startswith("mean\t-\t-\t")
    assert len([line for line in lines if not line.startswith("#")]) == len(dataset.train) + 1


def test_evaluate_upscaled_copies(tmp_path, dataset, trained):
    deblur_result, enhance_result = trained
    cfg = config_with(eval={"upscale_factors": [1, 2]})
    deblur, enhance, _ = TrainService(cfg).load_models(deblur_result.checkpoint_path, enhance_result.checkpoint_path)
    entries = dataset.train[:2]
    report = EvalService.evaluate(entries, deblur, enhance, cfg, str(tmp_path / "cache"))
    assert [(row.tuple_id, row.upscale) for row in report.rows] == (
        [(e.tuple_id, 1) for e in entries] + [(e.tuple_id, 2) for e in entries])


def test_deblur_only_report_marks_stage2_absent(tmp_path, dataset, tiny_cfg, trained):
    deblur_result, _ = trained
    cfg = tiny_cfg.with_overrides(ablations=("deblur-only",))
    deblur, enhance, warnings = TrainService(cfg).load_models(deblur_result.checkpoint_path, None)
    assert enhance is None
    assert warnings
    report = EvalService.evaluate(dataset.train[:2], deblur, None, cfg, str(tmp_path / "cache"), setting="deblur-only")
    assert not report.stage2_present
    assert {row.stage for row in report.rows} == {"deblur"}
    assert "#stage2_present\tfalse" in EvalService.render_tsv(report)
    assert "absent" in EvalService.summary_table([report])


@pytest.fixture
def overfit_set(tmp_path):
    """Four 32x32 procedural tuples and a small configuration that memorizes them."""
    frames = moving_scene(seed=11, n_frames=12, height=32, width=32)
    video = str(tmp_path / "overfit_video")
    write_video(video, frames)
    cfg = config_with(
        augment={"crop_size": 16, "p_ia": 0.0, "p_ca": 0.0, "p_cutnoise": 0.0},
        model={"deblur_base_width": 4, "enhance_base_width": 4},
        train={"deblur_lr": 2e-3, "enhance_lr": 2e-3, "steps_per_epoch": 150, "loss_smoothing": 10},
    )
    data = SynthService.build_dataset([video], cfg.synth, str(tmp_path / "overfit_data"), seed=cfg.seed)
    assert len(data.train) == 4
    return cfg, data.train


def train_and_evaluate(cfg, entries, out_dir):
    trainer = TrainService(cfg)
    deblur = trainer.train_stage(entries, "deblur", out_dir)
    enhance_path = None
    losses = [deblur.losses]
    if not cfg.model.has("deblur-only"):
        enhance = trainer.train_stage(entries, "enhance", out_dir, deblur_checkpoint=deblur.checkpoint_path)
        enhance_path = enhance.checkpoint_path
        losses.append(enhance.losses)
    nets = trainer.load_models(deblur.checkpoint_path, enhance_path)
    report = EvalService.evaluate(entries, nets[0], nets[1], cfg, os.path.join(out_dir, "cache"))
    return losses, report


@pytest.mark.slow
def test_both_stages_overfit_four_tuples(tmp_path, overfit_set):
    cfg, entries = overfit_set
    losses, report = train_and_evaluate(cfg, entries, str(tmp_path / "full"))
    window = cfg.train.loss_smoothing
    for stage_losses in losses:
        assert smoothed(stage_losses, window) < 0.5 * smoothed(stage_losses, window, tail=False)
    assert report.mean_psnr >= report.mean_psnr_input + 2.0


@pytest.mark.slow
def test_long_only_input_scores_below_full_model(tmp_path, overfit_set):
    cfg, entries = overfit_set
    _, full = train_and_evaluate(cfg, entries, str(tmp_path / "full"))
    _, long_only = train_and_evaluate(cfg.with_overrides(ablations=("only-long",)), entries, str(tmp_path / "long"))
    assert long_only.mean_psnr < full.mean_psnr


@pytest.mark.slow
def test_ablation_writes_one_report_per_setting(tmp_path, dataset, tiny_cfg):
    settings = [("full", ()), ("deblur-only", ("deblur-only", "no-varmap-selection"))]
    reports = EvalService.run_ablation(settings, dataset.train, dataset.train[:2], tiny_cfg, str(tmp_path))
    assert [r.setting for r in reports] == ["full", "deblur-only"]
    for name in ("full", "deblur-only"):
        assert os.path.exists(tmp_path / name / "report.tsv")
    assert reports[0].stage2_present and not reports[1].stage2_present
    assert not os.path.exists(tmp_path / "deblur-only" / "enhance.d2ck")
