import json
import math

import numpy as np
import pytest
import torch

from eenda.datagen import FrameFeatures, SpeakerActivityMatrix
from eenda.encoder import EncoderConfig
from eenda.losses import LossWeights
from eenda.model import (
    DiarizationModel,
    ModelConfig,
    checkpoint_metadata,
    load_checkpoint,
    save_checkpoint,
)
from eenda.scoring import RttmSegment
from eenda.training import (
    TrainConfig,
    TrainingDiverged,
    TrainSample,
    average_checkpoints,
    compute_sample_losses,
    noam_lr,
    route_domain,
    select_best,
    train,
    train_step,
)

TINY = ModelConfig(encoder=EncoderConfig(
    num_blocks=1, d_model=16, num_heads=2, ff_hidden=32, conv_kernel=7,
    subsample_factor=10, adapter_bottleneck=4, domains=("a", "b"),
    num_mels=23))


def make_sample(fid="s0", domain="a", t=100, n_spk=2, seed=0):
    rng = np.random.default_rng(seed)
    feats = FrameFeatures(
        rng.standard_normal((t, 23)).astype(np.float32), 0.01, 0.025)
    vals = np.zeros((t, n_spk), dtype=np.float32)
    for s in range(n_spk):
        vals[s * t // n_spk:(s + 1) * t // n_spk, s] = 1.0
    labels = SpeakerActivityMatrix(vals, list(range(n_spk)))
    ref = [RttmSegment(fid, s * t // n_spk * 0.01, t // n_spk * 0.01, f"A{s}")
           for s in range(n_spk)]
    return TrainSample(fid, feats, labels, domain, ref)


class TestNoamSchedule:
    def test_step_one_value(self):
        assert noam_lr(1, 256, 100_000) == pytest.approx(1.9764e-9, rel=1e-3)

    def test_peak_at_warmup(self):
        w = 1000
        peak = noam_lr(w, 256, w)
        assert peak == pytest.approx(256 ** -0.5 * w ** -0.5, rel=1e-12)
        assert noam_lr(w - 1, 256, w) < peak
        assert noam_lr(w + 200, 256, w) < peak

    def test_monotone_rise_then_decay(self):
        w = 100
        values = [noam_lr(s, 64, w) for s in range(1, 301)]
        assert all(a < b for a, b in zip(values[:w - 1], values[1:w]))
        assert all(a > b for a, b in zip(values[w:], values[w + 1:]))

    def test_rejects_step_zero(self):
        with pytest.raises(ValueError):
            noam_lr(0, 256, 100)

    def test_warmup_constant_schedule(self, tmp_path):
        torch.manual_seed(0)
        model = DiarizationModel(TINY)
        cfg = TrainConfig(epochs=1, batch_size=1, lr=1e-3,
                          scheduler="warmup_constant", warmup_steps=4, seed=0)
        samples = [make_sample(f"s{i}", "a", seed=i) for i in range(6)]
        result = train(model, samples, cfg, tmp_path / "warm",
                       val_samples=[samples[0]])
        lrs = [rec["lr"] for rec in result.log if "lr" in rec]
        assert lrs[:4] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3])
        assert all(lr == pytest.approx(1e-3) for lr in lrs[4:])

    def test_rejects_unknown_scheduler(self):
        with pytest.raises(ValueError):
            TrainConfig(scheduler="cosine")


class TestRouting:
    def test_zero_dropout_keeps_domain(self):
        rng = np.random.default_rng(0)
        assert all(route_domain("a", 0.0, rng) == "a" for _ in range(100))

    def test_full_dropout_always_none(self):
        rng = np.random.default_rng(0)
        assert all(route_domain("a", 1.0, rng) is None for _ in range(100))

    def test_dropout_frequency(self):
        rng = np.random.default_rng(1)
        n = 10_000
        dropped = sum(route_domain("a", 0.3, rng) is None for _ in range(n))
        assert abs(dropped / n - 0.3) <= 0.02


class TestGradientCut:
    def _losses(self, model, domain="a", routing="a"):
        sample = make_sample(domain=domain)
        x = torch.as_tensor(sample.features.values)
        y = torch.as_tensor(sample.labels.values)
        return compute_sample_losses(
            model, x, y, routing, sample.domain, LossWeights())

    def _encoder_grad_norm(self, model, loss):
        for p in model.parameters():
            p.grad = None
        loss.backward(retain_graph=True)
        return sum(
            p.grad.abs().sum().item()
            for p in model.encoder.parameters() if p.grad is not None)

    def test_attractor_loss_never_reaches_encoder(self):
        model = DiarizationModel(TINY)
        losses = self._losses(model)
        assert self._encoder_grad_norm(model, losses["l_attr"]) == 0.0

    def test_diarization_loss_reaches_encoder(self):
        model = DiarizationModel(TINY)
        losses = self._losses(model)
        assert self._encoder_grad_norm(model, losses["l_diar"]) > 0.0

    def test_domain_loss_from_eda_states_skips_encoder(self):
        cfg = ModelConfig(encoder=TINY.encoder, domain_head_input="eda_states")
        model = DiarizationModel(cfg)
        losses = self._losses(model)
        assert self._encoder_grad_norm(model, losses["l_domain"]) == 0.0

    def test_domain_loss_from_summary_reaches_encoder(self):
        enc = EncoderConfig(**{**TINY.encoder.__dict__, "use_summary_vector": True})
        model = DiarizationModel(ModelConfig(encoder=enc, domain_head_input="summary"))
        losses = self._losses(model)
        assert self._encoder_grad_norm(model, losses["l_domain"]) > 0.0


class TestTrainStep:
    def _setup(self, dropout=0.0):
        model = DiarizationModel(TINY)
        # knock the adapters off identity so they can move
        with torch.no_grad():
            for p in model.encoder.adapters.parameters():
                p.add_(torch.randn_like(p) * 0.01)
        cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3,
                          adapter_dropout=dropout)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        return model, cfg, opt

    def test_only_routed_domain_adapter_moves(self):
        model, cfg, opt = self._setup()
        before_a = [p.clone() for p in model.encoder.adapters["a"].parameters()]
        before_b = [p.clone() for p in model.encoder.adapters["b"].parameters()]
        batch = [make_sample("s0", "a", seed=1), make_sample("s1", "a", seed=2)]
        train_step(batch, model, opt, cfg, np.random.default_rng(0))
        moved_a = any(not torch.equal(p, q) for p, q in
                      zip(before_a, model.encoder.adapters["a"].parameters()))
        moved_b = any(not torch.equal(p, q) for p, q in
                      zip(before_b, model.encoder.adapters["b"].parameters()))
        assert moved_a and not moved_b

    def test_full_dropout_freezes_all_adapters(self):
        model, cfg, opt = self._setup(dropout=1.0)
        before = [p.clone() for p in model.encoder.adapters.parameters()]
        batch = [make_sample("s0", "a", seed=1), make_sample("s1", "b", seed=2)]
        train_step(batch, model, opt, cfg, np.random.default_rng(0))
        assert all(torch.equal(p, q) for p, q in
                   zip(before, model.encoder.adapters.parameters()))

    def test_encoder_always_moves(self):
        model, cfg, opt = self._setup(dropout=1.0)
        before = [p.clone() for p in model.encoder.blocks.parameters()]
        train_step([make_sample()], model, opt, cfg, np.random.default_rng(0))
        assert any(not torch.equal(p, q) for p, q in
                   zip(before, model.encoder.blocks.parameters()))

    def test_unknown_sample_domain_rejected(self):
        model, cfg, opt = self._setup()
        with pytest.raises(KeyError):
            train_step([make_sample(domain="zz")], model, opt, cfg,
                       np.random.default_rng(0))

    def test_nan_features_abort(self):
        model, cfg, opt = self._setup()
        sample = make_sample()
        sample.features.values[0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train_step([sample], model, opt, cfg, np.random.default_rng(0))

    def test_reported_losses_finite(self):
        model, cfg, opt = self._setup()
        rec = train_step([make_sample()], model, opt, cfg, np.random.default_rng(0))
        assert math.isfinite(rec["loss"])
        assert math.isfinite(rec["l_diar"])
        assert math.isfinite(rec["l_attr"])
        assert rec["l_domain"] is None


class TestSelection:
    def test_orders_by_der(self):
        cks = [{"epoch": 1, "validation_der": 0.5},
               {"epoch": 2, "validation_der": 0.2},
               {"epoch": 3, "validation_der": 0.4}]
        best = select_best(cks, 2)
        assert [c["epoch"] for c in best] == [2, 3]

    def test_ties_go_to_earlier_epoch(self):
        cks = [{"epoch": 2, "validation_der": 0.3},
               {"epoch": 1, "validation_der": 0.3}]
        assert select_best(cks, 1)[0]["epoch"] == 1

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            select_best([{"epoch": 1, "validation_der": 0.1}], 2)


class TestCheckpoints:
    def test_save_load_round_trip(self, tmp_path):
        model = DiarizationModel(TINY)
        path = tmp_path / "m.pt"
        save_checkpoint(model, path, epoch=3, validation_der=0.25)
        loaded = load_checkpoint(path)
        for p, q in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(p, q)
        meta = checkpoint_metadata(path)
        assert meta["epoch"] == 3
        assert meta["validation_der"] == 0.25

    def test_load_into_mismatched_model_rejected(self, tmp_path):
        model = DiarizationModel(TINY)
        path = tmp_path / "m.pt"
        save_checkpoint(model, path)
        other_cfg = ModelConfig(encoder=EncoderConfig(
            **{**TINY.encoder.__dict__, "adapter_bottleneck": 8}))
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path, DiarizationModel(other_cfg))

    def test_average_is_elementwise_mean(self, tmp_path):
        m1 = DiarizationModel(TINY)
        m2 = DiarizationModel(TINY)
        p1 = tmp_path / "a.pt"
        p2 = tmp_path / "b.pt"
        save_checkpoint(m1, p1)
        save_checkpoint(m2, p2)
        avg = average_checkpoints([p1, p2])
        s1, s2 = m1.state_dict(), m2.state_dict()
        for key in s1:
            expected = (s1[key].double() + s2[key].double()) / 2
            assert torch.allclose(avg[key].double(), expected, atol=1e-7)

    def test_average_rejects_mixed_configs(self, tmp_path):
        m1 = DiarizationModel(TINY)
        other = ModelConfig(encoder=EncoderConfig(
            **{**TINY.encoder.__dict__, "adapter_bottleneck": 8}))
        m2 = DiarizationModel(other)
        p1 = tmp_path / "a.pt"
        p2 = tmp_path / "b.pt"
        save_checkpoint(m1, p1)
        save_checkpoint(m2, p2)
        with pytest.raises(ValueError, match="hash"):
            average_checkpoints([p1, p2])


class TestTrainLoop:
    def _samples(self, n=6):
        return [make_sample(f"s{i}", "ab"[i % 2], seed=i) for i in range(n)]

    def _run(self, tmp_path, tag):
        torch.manual_seed(7)
        model = DiarizationModel(TINY)
        cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3, seed=5)
        return train(model, self._samples(), cfg, tmp_path / tag)

    def test_artifacts_written(self, tmp_path):
        result = self._run(tmp_path, "run")
        out = tmp_path / "run"
        assert (out / "checkpoints" / "epoch_0001.pt").exists()
        assert (out / "checkpoints" / "epoch_0002.pt").exists()
        assert result.final_path == out / "model_final.pt"
        assert result.final_path.exists()
        lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
        assert any("validation_der" in rec for rec in lines)
        assert any("loss" in rec for rec in lines)

    def test_reproducible_across_runs(self, tmp_path):
        r1 = self._run(tmp_path, "one")
        r2 = self._run(tmp_path, "two")
        for p, q in zip(r1.model.parameters(), r2.model.parameters()):
            assert torch.equal(p, q)
        assert [rec.get("loss") for rec in r1.log] == [rec.get("loss") for rec in r2.log]

    def test_loss_decreases_when_overfitting(self, tmp_path):
        torch.manual_seed(0)
        model = DiarizationModel(TINY)
        cfg = TrainConfig(epochs=20, batch_size=1, lr=2e-3, seed=0)
        sample = make_sample(t=200)
        result = train(model, [sample], cfg, tmp_path / "fit",
                       val_samples=[sample])
        losses = [rec["loss"] for rec in result.log if "loss" in rec]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_head_config_mismatch_rejected(self, tmp_path):
        model = DiarizationModel(TINY)
        cfg = TrainConfig(domain_head_input="eda_states")
        with pytest.raises(ValueError):
            train(model, self._samples(), cfg, tmp_path / "x")

    def test_noam_lr_recorded(self, tmp_path):
        torch.manual_seed(0)
        model = DiarizationModel(TINY)
        cfg = TrainConfig(epochs=1, batch_size=2, scheduler="noam",
                          warmup_steps=100, seed=0)
        result = train(model, self._samples(4), cfg, tmp_path / "noam")
        steps = [rec for rec in result.log if "lr" in rec]
        for rec in steps:
            assert rec["lr"] == pytest.approx(
                noam_lr(rec["step"], TINY.encoder.d_model, 100), rel=1e-12)
