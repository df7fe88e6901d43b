import dataclasses
import math

import numpy as np
import pytest
import torch

from anglemae import transport
from anglemae.errors import TrainingDiverged, ValidationError
from anglemae.images import DatasetSpec, generate_synthetic, write_dataset
from anglemae.model import build_model, gradcheck, read_checkpoint
from anglemae.patching import patchify
from anglemae.training import (
    METRICS_HEADER,
    LossReport,
    TrainConfig,
    batch_to,
    collate,
    compute_total_loss,
    config_for_inference,
    crop_cost,
    fit,
    format_train_config,
    frozen_loss_closure,
    lr_at_step,
    make_optimizer,
    make_sample,
    parse_train_config,
    reconstruct_panel,
    solve_plans,
    train_step,
)

from oracles import masked_mse_by_loops

TINY = TrainConfig(
    synth_count=4,
    image_size=32,
    p=8,
    enc_dim=16,
    enc_depth=1,
    enc_heads=4,
    dec_dim=8,
    dec_depth=1,
    dec_heads=4,
    a=16,
    batch_size=2,
    steps=3,
    warmup_steps=1,
    checkpoint_every=2,
)


def tiny_batch(cfg=TINY, seed=0, batch=2):
    imgs = generate_synthetic(
        DatasetSpec(count=batch, size=cfg.image_size, seed=seed)
    )
    rng = np.random.default_rng(seed)
    return collate([make_sample(img, cfg, rng) for img in imgs], cfg)


def metrics_without_seconds(text: str) -> list[str]:
    return [line.rsplit(",", 1)[0] for line in text.splitlines()]


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()
        TINY.validate()

    def test_peak_lr_linear_scaling(self):
        assert TrainConfig().peak_lr == pytest.approx(1.5e-4 * 64 / 256)
        assert dataclasses.replace(TINY, batch_size=256, base_lr=1e-3).peak_lr == 1e-3

    def test_rejects_misaligned_crop_side(self):
        with pytest.raises(ValidationError):
            dataclasses.replace(TINY, a=12).validate()

    def test_rejects_crop_larger_than_image(self):
        with pytest.raises(ValidationError):
            dataclasses.replace(TINY, a=40).validate()

    def test_rejects_warmup_past_total(self):
        with pytest.raises(ValidationError):
            dataclasses.replace(TINY, warmup_steps=4).validate()

    def test_format_parse_round_trip(self):
        cfg = dataclasses.replace(TINY, theta_max=0.5, use_ot_loss=False)
        assert parse_train_config(format_train_config(cfg)) == cfg

    def test_parse_allows_comments_and_blanks(self):
        cfg = parse_train_config("# header\n\nsteps = 5 # inline\nwarmup_steps=0\n")
        assert cfg.steps == 5 and cfg.warmup_steps == 0

    def test_parse_rejects_unknown_key(self):
        with pytest.raises(ValidationError):
            parse_train_config("stepz = 5\n")

    def test_parse_rejects_bad_value(self):
        with pytest.raises(ValidationError):
            parse_train_config("steps = many\n")
        with pytest.raises(ValidationError):
            parse_train_config("use_ot_loss = yes\n")


class TestLrSchedule:
    def test_warmup_then_cosine(self):
        peak = 0.01
        assert lr_at_step(0, peak, 10, 110) == 0.0
        assert lr_at_step(5, peak, 10, 110) == pytest.approx(peak / 2)
        assert lr_at_step(10, peak, 10, 110) == pytest.approx(peak)
        assert lr_at_step(60, peak, 10, 110) == pytest.approx(peak / 2)
        assert lr_at_step(110, peak, 10, 110) == pytest.approx(0.0, abs=1e-18)

    def test_no_warmup_starts_at_peak(self):
        assert lr_at_step(0, 0.01, 0, 100) == 0.01

    def test_nonincreasing_after_peak(self):
        values = [lr_at_step(s, 1.0, 30, 300) for s in range(30, 301)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_all_warmup_edge(self):
        assert lr_at_step(7, 0.5, 7, 7) == 0.5

    def test_rejects_out_of_range_step(self):
        with pytest.raises(ValidationError):
            lr_at_step(11, 1.0, 0, 10)


class TestSamplesAndBatches:
    def test_visible_counts_and_flags(self):
        batch = tiny_batch()
        # 16-patch grid, 4-patch crop: 1 + 3 visible at ratio 0.75.
        assert batch.visible.shape == (2, 4)
        assert batch.angle_flags.shape == (2, 4)
        assert batch.angle_flags[:, 0].all()
        assert not batch.angle_flags[:, 1:].any()
        assert batch.is_crop.sum(dim=1).tolist() == [4, 4]
        assert batch.is_visible.sum(dim=1).tolist() == [4, 4]
        assert batch.crop_idx.shape == (2, 4)

    def test_view_is_composite_only_when_enabled(self):
        img = generate_synthetic(DatasetSpec(count=1, size=32, seed=3))[0]
        on = make_sample(img, TINY, np.random.default_rng(1))
        assert not np.array_equal(on.view, img)
        off_cfg = dataclasses.replace(TINY, use_scaling_center_crop=False)
        off = make_sample(img, off_cfg, np.random.default_rng(1))
        assert np.array_equal(off.view, img)
        assert np.array_equal(off.original, img)

    def test_joint_masking_when_split_disabled(self):
        img = generate_synthetic(DatasetSpec(count=1, size=32, seed=4))[0]
        cfg = dataclasses.replace(TINY, use_split_masking=False)
        sizes = set()
        for seed in range(30):
            s = make_sample(img, cfg, np.random.default_rng(seed))
            total = s.layout.crop_visible.size + s.layout.bg_visible.size
            assert total == 4
            sizes.add(int(s.layout.crop_visible.size))
        assert len(sizes) > 1  # per-population size floats under a joint mask

    def test_patches_match_images(self):
        batch = tiny_batch()
        s = batch.samples[0]
        assert np.allclose(batch.patches_in[0].numpy(), patchify(s.view, 8), atol=1e-7)
        assert np.allclose(
            batch.patches_tgt[0].numpy(), patchify(s.original, 8), atol=1e-7
        )

    def test_batch_to_casts_floats_only(self):
        batch = batch_to(tiny_batch(), torch.float64)
        assert batch.patches_in.dtype == torch.float64
        assert batch.patches_tgt.dtype == torch.float64
        assert batch.visible.dtype == torch.int64
        assert batch.angle_flags.dtype == torch.bool


class TestLoss:
    def test_report_rejects_divergence(self):
        with pytest.raises(TrainingDiverged):
            LossReport(l_mse=float("nan"), l_ot=0.0, l_rec=0.0)
        with pytest.raises(TrainingDiverged):
            LossReport(l_mse=0.0, l_ot=float("inf"), l_rec=0.0)
        with pytest.raises(TrainingDiverged):
            LossReport(l_mse=-1.0, l_ot=0.0, l_rec=0.0)

    def test_additivity(self):
        batch = tiny_batch()
        model = build_model(TINY.model_config())
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        _, report = compute_total_loss(preds, batch, TINY)
        assert report.l_rec == pytest.approx(report.l_mse + report.l_ot, abs=1e-15)

    def test_background_term_matches_loop_oracle(self):
        batch = batch_to(tiny_batch(), torch.float64)
        model = build_model(TINY.model_config()).double()
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        _, report = compute_total_loss(preds, batch, TINY)
        p = preds.detach().numpy()
        t = batch.patches_tgt.numpy()
        expect = np.mean(
            [
                masked_mse_by_loops(
                    p[b], t[b], s.layout.bg_masked
                )
                for b, s in enumerate(batch.samples)
            ]
        )
        assert report.l_mse == pytest.approx(expect, abs=1e-12)

    def test_ot_term_matches_independent_solve(self):
        batch = batch_to(tiny_batch(), torch.float64)
        model = build_model(TINY.model_config()).double()
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        _, report = compute_total_loss(preds, batch, TINY)
        values = []
        for b, s in enumerate(batch.samples):
            crop = s.layout.crop_indices
            targets = batch.patches_tgt[b].numpy()[crop]
            out = preds.detach().numpy()[b][crop]
            cost = transport.cost_matrix(targets, out)
            prob = transport.make_problem(
                cost,
                epsilon_rel=TINY.epsilon_rel,
                max_iters=TINY.sinkhorn_max_iters,
                tol=TINY.sinkhorn_tol,
            )
            values.append(transport.ot_loss(cost, transport.sinkhorn_solve(prob).plan))
        assert report.l_ot == pytest.approx(np.mean(values), abs=1e-12)

    def test_crop_term_is_masked_mse_when_ot_disabled(self):
        cfg = dataclasses.replace(TINY, use_ot_loss=False)
        batch = batch_to(tiny_batch(cfg), torch.float64)
        model = build_model(cfg.model_config()).double()
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        _, report = compute_total_loss(preds, batch, cfg)
        p = preds.detach().numpy()
        t = batch.patches_tgt.numpy()
        expect = np.mean(
            [
                masked_mse_by_loops(p[b], t[b], s.layout.crop_masked)
                for b, s in enumerate(batch.samples)
            ]
        )
        assert report.l_ot == pytest.approx(expect, abs=1e-12)

    def test_all_toggles_off_is_plain_masked_mse(self):
        cfg = dataclasses.replace(
            TINY,
            use_ot_loss=False,
            use_split_masking=False,
            use_scaling_center_crop=False,
            use_angle_embedding=False,
        )
        batch = batch_to(tiny_batch(cfg), torch.float64)
        model = build_model(cfg.model_config()).double()
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        _, report = compute_total_loss(preds, batch, cfg)
        assert report.l_ot == 0.0
        p = preds.detach().numpy()
        t = batch.patches_tgt.numpy()
        expect = np.mean(
            [
                masked_mse_by_loops(
                    p[b],
                    t[b],
                    np.concatenate([s.layout.crop_masked, s.layout.bg_masked]),
                )
                for b, s in enumerate(batch.samples)
            ]
        )
        assert report.l_rec == pytest.approx(expect, abs=1e-12)

    def test_frozen_plan_reproduces_fresh_solve(self):
        batch = batch_to(tiny_batch(), torch.float64)
        model = build_model(TINY.model_config()).double()
        preds = model(batch.patches_in, batch.visible, batch.angle_flags).predictions
        plan = solve_plans(crop_cost(preds, batch), TINY)
        fresh, _ = compute_total_loss(preds, batch, TINY)
        frozen, _ = compute_total_loss(preds, batch, TINY, frozen_plan=plan)
        assert fresh.detach().item() == pytest.approx(frozen.detach().item(), abs=1e-15)

    def test_nan_predictions_raise(self):
        batch = tiny_batch()
        preds = torch.full((2, 16, 192), float("nan"))
        with pytest.raises(TrainingDiverged):
            compute_total_loss(preds, batch, TINY)


class TestGradients:
    def test_full_loss_gradcheck(self):
        cfg = TINY
        batch = batch_to(tiny_batch(cfg), torch.float64)
        model = build_model(cfg.model_config()).double()
        worst = gradcheck(model, frozen_loss_closure(model, batch, cfg), n_samples=60)
        assert worst <= 1e-4

    def test_closure_is_deterministic(self):
        batch = batch_to(tiny_batch(), torch.float64)
        model = build_model(TINY.model_config()).double()
        loss_fn = frozen_loss_closure(model, batch, TINY)
        assert loss_fn().detach().item() == loss_fn().detach().item()


class TestOptimization:
    def test_optimizer_settings(self):
        model = build_model(TINY.model_config())
        opt = make_optimizer(model, TINY)
        group = opt.param_groups[0]
        assert group["lr"] == TINY.peak_lr
        assert group["betas"] == (0.9, 0.95)
        assert group["weight_decay"] == 0.05

    def test_train_step_updates_parameters_and_sets_lr(self):
        model = build_model(TINY.model_config())
        opt = make_optimizer(model, TINY)
        batch = tiny_batch()
        before = model.patch_embed.weight.detach().clone()
        report = train_step(model, opt, batch, TINY, step=1)
        assert not torch.equal(before, model.patch_embed.weight)
        assert opt.param_groups[0]["lr"] == pytest.approx(
            lr_at_step(1, TINY.peak_lr, TINY.warmup_steps, TINY.steps)
        )
        assert math.isfinite(report.l_rec)


class TestFit:
    def test_outputs_and_determinism(self, tmp_path):
        r1 = fit(TINY, tmp_path / "run1")
        r2 = fit(TINY, tmp_path / "run2")
        m1 = r1.metrics_path.read_text()
        m2 = r2.metrics_path.read_text()
        lines = m1.splitlines()
        assert lines[0] == METRICS_HEADER
        assert len(lines) == 1 + TINY.steps
        assert metrics_without_seconds(m1) == metrics_without_seconds(m2)
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()
        assert (r1.out_dir / "checkpoint_000002.bin").exists()
        cfg_text = (r1.out_dir / "config.txt").read_text()
        assert parse_train_config(cfg_text) == TINY
        assert len(r1.reports) == TINY.steps

    def test_seed_changes_outcome(self, tmp_path):
        r1 = fit(TINY, tmp_path / "a")
        r2 = fit(dataclasses.replace(TINY, seed=1), tmp_path / "b")
        assert r1.checkpoint_path.read_bytes() != r2.checkpoint_path.read_bytes()

    def test_final_checkpoint_records_compositing(self, tmp_path):
        result = fit(TINY, tmp_path / "run")
        config_map, _ = read_checkpoint(result.checkpoint_path)
        assert config_map["a"] == "16"
        assert config_map["use_ot_loss"] == "True"
        assert float(config_map["epsilon_rel"]) == TINY.epsilon_rel

    def test_rejects_mismatched_dataset(self, tmp_path):
        write_dataset(DatasetSpec(count=2, size=48, seed=0), tmp_path / "data")
        cfg = dataclasses.replace(TINY, data_dir=str(tmp_path / "data"))
        with pytest.raises(ValidationError):
            fit(cfg, tmp_path / "run")


class TestInferenceHelpers:
    def test_config_for_inference_round_trip(self, tmp_path):
        result = fit(TINY, tmp_path / "run")
        config_map, _ = read_checkpoint(result.checkpoint_path)
        cfg = config_for_inference(config_map)
        assert cfg.a == TINY.a
        assert cfg.theta_min == pytest.approx(TINY.theta_min)
        assert cfg.ratio_crop == TINY.ratio_crop
        assert cfg.use_ot_loss == TINY.use_ot_loss
        assert cfg.image_size == TINY.image_size

    def test_reconstruct_panel_layout(self):
        model = build_model(TINY.model_config())
        img = generate_synthetic(DatasetSpec(count=1, size=32, seed=6))[0]
        panel, sample = reconstruct_panel(model, img, TINY, np.random.default_rng(2))
        assert panel.shape == (32, 4 * 32 + 3, 3)
        for col in (32, 65, 98):
            assert np.array_equal(panel[:, col], np.ones((32, 3)))
        assert np.array_equal(panel[:, :32], img)
        assert np.array_equal(panel[:, 33:65], sample.view)
        hidden = int(np.concatenate([sample.layout.crop_masked,
                                     sample.layout.bg_masked])[0])
        r, c = divmod(hidden, 4)
        block = panel[r * 8 : (r + 1) * 8, 66 + c * 8 : 66 + (c + 1) * 8]
        assert np.all(block == 0.5)
        assert panel[:, 99:].min() >= 0.0 and panel[:, 99:].max() <= 1.0

    def test_reconstruct_panel_rejects_wrong_size(self):
        model = build_model(TINY.model_config())
        img = np.zeros((48, 48, 3))
        with pytest.raises(ValidationError):
            reconstruct_panel(model, img, TINY, np.random.default_rng(0))
