import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from blankskip.ctc import InfeasibleAlignment, ctc_forward_loss, greedy_decode, kl_frame_loss
from blankskip.data import TaskConfig, Utterance, gen_dataset
from blankskip.encoder import ModelConfig, build_model, subsample
from blankskip.train import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    batch_order,
    load_checkpoint,
    prepare_batch,
    save_checkpoint,
    total_loss,
    train,
)
from blankskip.numerics import Rng

TASK = TaskConfig(vocab_size=4, input_dim=6, tokens_per_utterance=(2, 4), silence_len=(3, 8), num_train=24, num_test=8)
MODEL = ModelConfig(input_dim=6, vocab_size=4, model_dim=16, num_layers=3, split_layer=2, ffn_dim=32)
CFG = TrainConfig(model=MODEL, task=TASK, epochs=2)


@pytest.fixture(scope="module")
def utts():
    return gen_dataset(TASK, "train")


@pytest.fixture
def model():
    return build_model(MODEL, 0)


class TestTotalLoss:
    def test_plain_ctc_when_both_off(self, model, utts):
        batch = utts[:3]
        terms = total_loss(model, batch, replace(CFG, use_kl=False, use_mtl=False))
        expected = []
        for u in batch:
            x = torch.tensor(subsample(u.features, MODEL.subsample_stride))
            out = model.forward_full(x[None], torch.tensor([x.shape[0]]))
            expected.append(ctc_forward_loss(out.log_p[0], u.labels).item())
        assert terms.total.item() == pytest.approx(np.mean(expected), abs=1e-10)
        assert terms.ctc_in == 0.0 and terms.kl == 0.0

    def test_decomposition(self, model, utts):
        terms = total_loss(model, utts[:4], CFG)
        assert terms.total.item() == pytest.approx(terms.ctc + terms.ctc_in + 0.5 * terms.kl, abs=1e-12)

    def test_lambda_half(self, model, utts):
        with_kl = total_loss(model, utts[:4], CFG)
        without = total_loss(model, utts[:4], replace(CFG, use_kl=False))
        k = kl_frame_loss(*_grids(model, utts[:4])).item()
        assert with_kl.total.item() == pytest.approx(without.total.item() + 0.5 * k, abs=1e-12)

    def test_identical_heads_give_zero_kl(self, model, utts, monkeypatch):
        orig = model.forward_full

        def tied(x, lengths):
            out = orig(x, lengths)
            out.log_p_in = out.log_p
            return out

        monkeypatch.setattr(model, "forward_full", tied)
        assert total_loss(model, utts[:3], CFG).kl == pytest.approx(0.0, abs=1e-15)

    def test_kl_never_reaches_final_head(self, model, utts):
        x, lengths = prepare_batch(utts[:4], MODEL.subsample_stride)
        out = model.forward_full(x, lengths)
        kl_frame_loss(out.log_p_in, out.log_p, out.valid()).backward()
        for name, p in model.named_parameters():
            if name.startswith(("head.", "upper.", "norm_out.")):
                assert p.grad is None or not p.grad.any(), name
        assert model.head_in.proj.weight.grad.abs().sum() > 0

    def test_intermediate_head_trains_without_kl(self, model, utts):
        terms = total_loss(model, utts[:4], replace(CFG, lambda_kl=0.0))
        terms.total.backward()
        assert model.head_in.proj.weight.grad.abs().sum() > 0

    def test_infeasible_names_utterance(self, model):
        short = Utterance("too-short", (1, 2, 3, 4), np.zeros((4, 6)))
        with pytest.raises(InfeasibleAlignment, match="too-short"):
            total_loss(model, [short], CFG)

    def test_frame_weight_hook(self, model, utts):
        def first_three(out):
            return out.valid() & (torch.arange(out.h.shape[1]) < 3)

        terms = total_loss(model, utts[:2], CFG, frame_weights=first_three)
        x, lengths = prepare_batch(utts[:2], MODEL.subsample_stride)
        out = model.forward_full(x, lengths)
        expected = kl_frame_loss(out.log_p_in[:, :3], out.log_p[:, :3]).item()
        assert terms.kl == pytest.approx(expected, abs=1e-12)


def _grids(model, batch):
    x, lengths = prepare_batch(batch, MODEL.subsample_stride)
    out = model.forward_full(x, lengths)
    valid = out.valid()
    return out.log_p_in[valid], out.log_p[valid]


class TestTrainLoop:
    def test_loss_decreases(self, utts):
        ckpt = train(replace(CFG, epochs=5), utts[:10])
        hist = [r["total"] for r in ckpt.loss_history]
        assert hist[-1] < hist[0]

    def test_deterministic(self, utts):
        a = train(replace(CFG, epochs=1), utts[:16])
        b = train(replace(CFG, epochs=1), utts[:16])
        for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(p, q), n

    def test_log_records(self, utts, tmp_path):
        log = tmp_path / "log.jsonl"
        train(replace(CFG, epochs=2), utts[:8], utts[8:12], log_path=log)
        recs = [json.loads(l) for l in log.read_text().splitlines()]
        assert recs[0]["header"] and recs[0]["lambda_kl"] == 0.5
        assert [r["epoch"] for r in recs[1:]] == [1, 2]
        assert {"step", "total", "ctc", "ctc_in", "kl", "ter"} <= set(recs[1])

    def test_non_finite_aborts(self, utts):
        bad = Utterance("bad", utts[0].labels, np.full_like(utts[0].features, np.nan))
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(replace(CFG, epochs=1, batch_size=1), [bad])

    def test_warmup(self, utts):
        ckpt = train(replace(CFG, epochs=1, warmup_steps=5), utts[:8])
        assert ckpt.step == 1

    def test_batch_order_covers_everything(self):
        lengths = list(np.random.default_rng(0).integers(10, 100, size=50))
        batches = batch_order(lengths, 8, Rng(3))
        assert sorted(i for b in batches for i in b) == list(range(50))
        assert batches == batch_order(lengths, 8, Rng(3))


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path):
        from blankskip.train import Checkpoint

        p = tmp_path / "ck.json"
        save_checkpoint(Checkpoint(model, 3, [{"epoch": 1}], CFG), p)
        back = load_checkpoint(p)
        assert back.step == 3 and back.loss_history == [{"epoch": 1}]
        assert back.config == MODEL and back.train_config == CFG
        for (n, a), (_, b) in zip(model.state_dict().items(), back.model.state_dict().items()):
            assert torch.allclose(a, b, atol=1e-9, rtol=0), n

    def test_mismatched_model_dim(self, model, tmp_path):
        from blankskip.train import Checkpoint

        p = tmp_path / "ck.json"
        save_checkpoint(Checkpoint(model), p)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(p, expect=replace(MODEL, model_dim=8, ffn_dim=16))

    def test_missing_weight(self, model, tmp_path):
        from blankskip.train import Checkpoint

        p = tmp_path / "ck.json"
        save_checkpoint(Checkpoint(model), p)
        doc = json.loads(p.read_text())
        del doc["weights"]["head.proj.bias"]
        doc["weights"]["bogus"] = [1.0]
        p.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match=r"missing=\['head.proj.bias'\] extra=\['bogus'\]"):
            load_checkpoint(p)

    def test_same_decodes_after_reload(self, utts, tmp_path):
        ckpt = train(replace(CFG, epochs=2), utts[:12])
        p = tmp_path / "ck.json"
        save_checkpoint(ckpt, p)
        back = load_checkpoint(p)
        frames = [subsample(u.features, MODEL.subsample_stride) for u in utts[:10]]
        before = [greedy_decode(ckpt.model.encode_full(f).p) for f in frames]
        after = [greedy_decode(back.model.encode_full(f).p) for f in frames]
        assert before == after
