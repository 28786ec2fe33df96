import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from gazedet.data import SynthConfig, generate_dataset
from gazedet.harness import (
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    one_cycle_lr,
    rescore_predictions,
    save_checkpoint,
    train,
)
from gazedet.model import ModelConfig, build_model

TINY_MODEL = ModelConfig(
    input_size=32,
    heatmap_size=(16, 16),
    num_proposals=4,
    decoded_channels=6,
    backbone_spec="tiny",
    head_hidden=3,
    oof_channels=4,
)


def tiny_dataset(n=8, seed=0, p_oof=0.25):
    cfg = SynthConfig(image_size=32, max_people=2, p_out_of_frame=p_oof, rng_seed=seed)
    return generate_dataset(cfg, n)


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestOneCycle:
    def test_start_value(self):
        assert one_cycle_lr(0, 1000, 1e-3) == pytest.approx(1e-3 / 25, rel=1e-12)

    def test_peak_at_thirty_percent(self):
        assert one_cycle_lr(300, 1000, 1e-3) == pytest.approx(1e-3, rel=1e-12)

    def test_final_value(self):
        last = one_cycle_lr(999, 1000, 1e-3)
        assert last <= 1e-3 / 1e3
        assert last == pytest.approx(1e-3 / 1e4, rel=1e-9)

    def test_continuity_at_peak(self):
        total = 1000
        vals = [one_cycle_lr(s, total, 1.0) for s in (298, 299, 300, 301, 302)]
        steps = np.diff(vals)
        assert abs(steps).max() < 0.01  # no jump across the phase switch

    def test_monotone_phases(self):
        total = 200
        lrs = [one_cycle_lr(s, total, 1.0) for s in range(total)]
        peak = int(np.argmax(lrs))
        assert peak == round(0.3 * total)
        assert all(np.diff(lrs[: peak + 1]) >= 0)
        assert all(np.diff(lrs[peak:]) <= 0)

    def test_range_checks(self):
        with pytest.raises(ValueError):
            one_cycle_lr(-1, 100, 1.0)
        with pytest.raises(ValueError):
            one_cycle_lr(100, 100, 1.0)
        with pytest.raises(ValueError):
            one_cycle_lr(0, 1, 1.0)


class TestOptimizerContract:
    def test_zero_grad_zero_decay_is_identity(self):
        model = build_model(TINY_MODEL, seed=0)
        before = [p.detach().clone() for p in model.parameters()]
        opt = torch.optim.AdamW(model.parameters(), lr=0.1, weight_decay=0.0)
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for p, b in zip(model.parameters(), before):
            assert torch.equal(p.detach(), b)

    def test_decay_is_scaled_by_lr(self):
        model = build_model(TINY_MODEL, seed=0)
        before = [p.detach().clone() for p in model.parameters()]
        opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=0.9)
        for p in model.parameters():
            p.grad = torch.randn(p.shape)
        opt.step()
        for p, b in zip(model.parameters(), before):
            assert torch.equal(p.detach(), b)


class TestTrain:
    def test_loss_decreases_on_smoke_run(self, tmp_path):
        ds = tiny_dataset(8)
        cfg = TrainConfig(max_lr=2e-3, epochs=60, batch_size=4, seed=0, max_steps=80)
        train(ds, cfg, TINY_MODEL, tmp_path)
        rows = read_log(tmp_path / "train_log.csv")
        first = np.mean([float(r["total"]) for r in rows[:5]])
        last = np.mean([float(r["total"]) for r in rows[-5:]])
        assert last < 0.5 * first

    def test_log_columns(self, tmp_path):
        ds = tiny_dataset(4)
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0, max_steps=2)
        train(ds, cfg, TINY_MODEL, tmp_path)
        rows = read_log(tmp_path / "train_log.csv")
        assert list(rows[0].keys()) == ["step", "l_h", "l_g", "l_c", "l_det", "l_o", "total", "lr"]
        assert [r["step"] for r in rows] == ["0", "1"]

    def test_deterministic_mode_reproduces_log(self, tmp_path):
        ds = tiny_dataset(6)
        cfg = TrainConfig(epochs=4, batch_size=3, seed=11, deterministic=True)
        train(ds, cfg, TINY_MODEL, tmp_path / "a")
        train(ds, cfg, TINY_MODEL, tmp_path / "b")
        assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        # resume from the run's own epoch checkpoint: the remaining steps
        # must replay exactly as the uninterrupted run logged them
        ds = tiny_dataset(6)
        cfg = TrainConfig(epochs=6, batch_size=3, seed=2, deterministic=True)
        train(ds, cfg, TINY_MODEL, tmp_path / "full")
        full = read_log(tmp_path / "full/train_log.csv")

        train(
            ds,
            cfg,
            TINY_MODEL,
            tmp_path / "resumed",
            resume=tmp_path / "full/checkpoint_epoch002.pt",
        )
        resumed = read_log(tmp_path / "resumed/train_log.csv")
        assert resumed[0]["step"] == "6"  # 3 epochs x 2 steps already done
        merged = {r["step"]: r for r in resumed}
        for row in full:
            if row["step"] in merged:
                for key in ("l_h", "l_g", "l_c", "l_det", "l_o", "total", "lr"):
                    assert math.isclose(
                        float(row[key]), float(merged[row["step"]][key]), abs_tol=1e-6, rel_tol=1e-6
                    ), f"step {row['step']} column {key}"

    def test_resume_config_mismatch_rejected(self, tmp_path):
        ds = tiny_dataset(4)
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0, max_steps=2)
        ckpt = train(ds, cfg, TINY_MODEL, tmp_path)
        other = replace(TINY_MODEL, head_hidden=4)
        with pytest.raises(CheckpointError):
            train(ds, cfg, other, tmp_path / "resumed", resume=ckpt)

    def test_non_finite_loss_aborts_with_scene_ids(self, tmp_path):
        ds = tiny_dataset(4)
        ds[2].image = np.full_like(ds[2].image, np.nan)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0)
        with pytest.raises(NonFiniteLossError) as err:
            train(ds, cfg, TINY_MODEL, tmp_path)
        assert ds[2].scene_id in err.value.scene_ids

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            train([], TrainConfig(), TINY_MODEL, tmp_path)

    def test_overflowing_scene_rejected(self, tmp_path):
        ds = tiny_dataset(4)
        tight = replace(TINY_MODEL, num_proposals=1)
        sizes = [len(s.annotations) for s in ds]
        if max(sizes) < 2:
            pytest.skip("dataset has no multi-person scene")
        with pytest.raises(ValueError, match="proposals"):
            train(ds, TrainConfig(epochs=1), tight, tmp_path)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = build_model(TINY_MODEL, seed=5)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        save_checkpoint(tmp_path / "c.pt", model, opt, TrainConfig(), epoch=0, step=0)
        payload = load_checkpoint(tmp_path / "c.pt")
        restored = model_from_checkpoint(payload)
        assert restored.config == TINY_MODEL
        for a, b in zip(restored.parameters(), model.parameters()):
            assert torch.equal(a, b)

    def test_bad_version_rejected(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "bad.pt")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "bad.pt")

    def test_garbage_file_rejected(self, tmp_path):
        (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.pt")


class TestEvaluate:
    def test_oracle_ideal_metrics(self):
        ds = tiny_dataset(10, p_oof=0.3)
        report, _ = evaluate(None, ds, oracle=True)
        assert report.map_instance == 1.0
        assert report.avg_dist == 0.0 and report.min_dist == 0.0
        assert report.auc == 1.0
        assert report.oof_ap == 1.0

    def test_oracle_without_oof_skips_ap(self):
        ds = tiny_dataset(6, p_oof=0.0)
        report, _ = evaluate(None, ds, oracle=True)
        assert report.oof_ap is None

    def test_evaluate_is_deterministic(self):
        ds = tiny_dataset(4)
        model = build_model(TINY_MODEL, seed=0)
        r1, _ = evaluate(model, ds)
        r2, _ = evaluate(model, ds)
        assert r1.as_dict() == r2.as_dict()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            evaluate(None, [], oracle=True)

    def test_model_required_without_oracle(self):
        with pytest.raises(ValueError):
            evaluate(None, tiny_dataset(2))

    def test_dump_and_rescore_round_trip(self):
        ds = tiny_dataset(6, p_oof=0.2)
        model = build_model(TINY_MODEL, seed=1)
        report, rows = evaluate(model, ds, collect_predictions=True)
        assert rescore_predictions(rows, ds) == pytest.approx(report.map_instance, abs=1e-12)

    def test_counts(self):
        ds = tiny_dataset(5, p_oof=0.3)
        report, _ = evaluate(None, ds, oracle=True)
        n_inst = sum(len(s.annotations) for s in ds)
        assert report.counts["scenes"] == 5
        assert report.counts["instances"] == n_inst
        assert report.counts["in_frame"] + report.counts["out_of_frame"] == n_inst
