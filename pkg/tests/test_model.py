import json
import math

import numpy as np
import pytest

from fnr.autodiff import Tape, Tensor
from fnr.data import QaRecord, collate, make_example
from fnr.model import (CheckpointError, SanConfig, SanParams, batch_loss,
                       extract_spans, forward, forward_batch, load_model,
                       predict_tags, save_model, sequence_loss)
from fnr.optim import adam_step, grad_check
from fnr.vocab import EOS_TOKEN, PAD_ID


def build(cfg, vocab, seed=0):
    return SanParams.build(cfg, len(vocab), np.random.default_rng(seed))


class TestForward:
    def test_valid_rows_sum_to_one(self, tiny_cfg, tiny_vocab, fig_example):
        params = build(tiny_cfg, tiny_vocab)
        probs, _ = forward(fig_example, params, tiny_cfg)
        assert np.allclose(probs[:4].sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_projection_gives_uniform(self, tiny_cfg, tiny_vocab, fig_example):
        params = build(tiny_cfg, tiny_vocab)
        params.proj_w.data[...] = 0.0
        params.proj_b.data[...] = 0.0
        probs, _ = forward(fig_example, params, tiny_cfg)
        assert np.allclose(probs[:4], 0.5, atol=1e-12)

    def test_unpreprocessed_length_rejected(self, tiny_cfg, tiny_vocab, fig_example):
        params = build(tiny_cfg, tiny_vocab)
        import dataclasses
        bad_cfg = dataclasses.replace(tiny_cfg, max_len=9)
        with pytest.raises(ValueError, match="max_len"):
            forward(fig_example, params, bad_cfg)

    def test_train_mode_needs_rng(self, tiny_vocab, fig_example):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.2, variant="san", seed=1)
        params = build(cfg, tiny_vocab)
        with pytest.raises(ValueError, match="rng"):
            forward(fig_example, params, cfg, mode="train")

    def test_sblstm_independent_of_bank_contents(self, tiny_vocab):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="sblstm", seed=2)
        params = build(cfg, tiny_vocab)
        rec = QaRecord("p", "c", ["works", "with", "iphone", "?"], tags=None)
        bank_a = [QaRecord("a", "c", ["video", "calls"])]
        bank_b = [QaRecord("b", "c", ["good", "it", "does"]),
                  QaRecord("b2", "c", ["?"])]
        ex_a = make_example(rec, bank_a, tiny_vocab, max_len=6, bank_size=2)
        ex_b = make_example(rec, bank_b, tiny_vocab, max_len=6, bank_size=2)
        pa, _ = forward(ex_a, params, cfg)
        pb, _ = forward(ex_b, params, cfg)
        assert np.array_equal(pa, pb)

    def test_zero_attention_params_match_empty_bank(self, tiny_vocab, fig_example):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="san", seed=3)
        params = build(cfg, tiny_vocab)
        for name in params.group.names():
            if name.startswith("attention."):
                params.group[name].data[...] = 0.0
        with_banks, _ = forward(fig_example, params, cfg)
        empty = make_example(fig_example.record, [], tiny_vocab, max_len=6, bank_size=2)
        without, _ = forward(empty, params, cfg)
        assert np.allclose(with_banks, without, atol=1e-12)

    def test_variant_wiring_widths(self, tiny_vocab):
        for variant, has_bank, has_l2 in (("san", True, True),
                                          ("sblstm", False, True),
                                          ("san-noblstm2", True, False)):
            cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                            bank_size=2, dropout=0.0, variant=variant, seed=4)
            params = build(cfg, tiny_vocab)
            names = params.group.names()
            assert any(n.startswith("bank.") for n in names) == has_bank
            assert any(n.startswith("attention.") for n in names) == has_bank
            assert any(n.startswith("blstm2.") for n in names) == has_l2
            assert params.proj_w.shape == (2, cfg.projection_width)

    def test_shared_bank_encoder_single_param_set(self, tiny_vocab):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="san", seed=5,
                        share_bank_encoder=True)
        params = build(cfg, tiny_vocab)
        assert params.bank_blstm is params.blstm1
        assert not any(n.startswith("bank.") for n in params.group.names())

    def test_one_bank_encoder_regardless_of_bank_count(self, tiny_vocab):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=5, dropout=0.0, variant="san", seed=6)
        params = build(cfg, tiny_vocab)
        bank_tensors = [n for n in params.group.names() if n.startswith("bank.")]
        assert len(bank_tensors) == 24  # 2 directions x 4 gates x 3 tensors

    def test_dropout_deterministic_given_seed(self, tiny_vocab, fig_example):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.3, variant="san", seed=7)
        params = build(cfg, tiny_vocab)
        a, _ = forward(fig_example, params, cfg, mode="train",
                       rng=np.random.default_rng(42))
        b, _ = forward(fig_example, params, cfg, mode="train",
                       rng=np.random.default_rng(42))
        assert np.array_equal(a, b)


class TestLoss:
    def test_perfect_predictions_zero_loss(self):
        probs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        gold = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = sequence_loss(probs, gold, np.ones(2))
        assert loss.item() < 1e-6

    def test_uniform_probs_ln2_per_token(self):
        n = 5
        probs = Tensor(np.full((n, 2), 0.5))
        gold = np.zeros((n, 2))
        gold[:, 0] = 1.0
        loss = sequence_loss(probs, gold, np.ones(n))
        assert abs(loss.item() - n * math.log(2)) < 1e-9

    def test_hand_case(self):
        probs = Tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
        gold = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = sequence_loss(probs, gold, np.ones(2))
        assert abs(loss.item() - (-(math.log(0.9) + math.log(0.8)))) < 1e-12

    def test_padding_excluded(self):
        probs = Tensor(np.array([[0.9, 0.1], [0.5, 0.5]]))
        gold = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = sequence_loss(probs, gold, np.array([1.0, 0.0]))
        assert abs(loss.item() - (-math.log(0.9))) < 1e-12

    def test_gold_not_one_hot_rejected(self):
        probs = Tensor(np.full((2, 2), 0.5))
        gold = np.array([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(ValueError, match="one-hot"):
            sequence_loss(probs, gold, np.ones(2))

    def test_batch_loss_sums_over_examples(self):
        probs = Tensor(np.full((3, 2, 2), 0.5))
        gold = np.zeros((3, 2, 2))
        gold[:, :, 1] = 1.0
        loss = batch_loss(probs, gold, np.ones((3, 2)))
        assert abs(loss.item() - 6 * math.log(2)) < 1e-9


class TestPredictTags:
    def test_argmax(self):
        probs = np.array([[0.9, 0.1], [0.3, 0.7]])
        assert predict_tags(probs, [1, 1]) == ["F", "O"]

    def test_tie_goes_to_o(self):
        assert predict_tags(np.array([[0.5, 0.5]]), [1]) == ["O"]

    def test_masked_positions_produce_no_tags(self):
        probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.9, 0.1]])
        assert predict_tags(probs, [1, 1, 0]) == ["F", "F"]


class TestExtractSpans:
    def test_fig_case(self):
        spans = extract_spans(["F", "F", "F", "O"], ["Works", "with", "iphone", "?"])
        assert len(spans) == 1
        assert spans[0].text == "Works with iphone"
        assert (spans[0].start, spans[0].end) == (0, 2)

    def test_all_o(self):
        assert extract_spans(["O", "O"], ["a", "b"]) == []

    def test_two_single_token_spans(self):
        spans = extract_spans(["F", "O", "F"], ["a", "b", "c"])
        assert [(s.start, s.end) for s in spans] == [(0, 0), (2, 2)]

    def test_span_reaching_end(self):
        spans = extract_spans(["O", "F", "F"], ["a", "b", "c"])
        assert [(s.start, s.end, s.text) for s in spans] == [(1, 2, "b c")]

    def test_eos_terminates_and_never_inside(self):
        spans = extract_spans(["F", "F", "F"], ["a", EOS_TOKEN, "b"])
        assert [(s.start, s.end) for s in spans] == [(0, 0), (2, 2)]

    def test_total_and_deterministic_on_any_probs(self):
        # extract_spans(predict_tags(.)) must succeed on arbitrary
        # probability matrices and always give the same answer.
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 8))
            raw = rng.random((n, 2))
            probs = raw / raw.sum(axis=-1, keepdims=True)
            tokens = [f"t{i}" for i in range(n)]
            first = extract_spans(predict_tags(probs, np.ones(n)), tokens)
            second = extract_spans(predict_tags(probs, np.ones(n)), tokens)
            assert first == second
            for span in first:
                assert 0 <= span.start <= span.end < n


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path, tiny_cfg, tiny_vocab, fig_example):
        params = build(tiny_cfg, tiny_vocab, seed=8)
        before, _ = forward(fig_example, params, tiny_cfg)
        path = tmp_path / "model.json"
        save_model(path, params, tiny_cfg, tiny_vocab)
        loaded, cfg2, vocab2 = load_model(path)
        after, _ = forward(fig_example, loaded, cfg2)
        assert np.array_equal(before, after)
        assert vocab2.id_to_token == tiny_vocab.id_to_token

    def test_save_deterministic_bytes(self, tmp_path, tiny_cfg, tiny_vocab):
        params = build(tiny_cfg, tiny_vocab, seed=9)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(p1, params, tiny_cfg, tiny_vocab)
        save_model(p2, params, tiny_cfg, tiny_vocab)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tampered_shape_names_tensor(self, tmp_path, tiny_cfg, tiny_vocab):
        params = build(tiny_cfg, tiny_vocab)
        path = tmp_path / "model.json"
        save_model(path, params, tiny_cfg, tiny_vocab)
        payload = json.loads(path.read_text())
        payload["tensors"]["proj.w"]["shape"] = [3, 8]
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="proj.w"):
            load_model(path)

    def test_cross_variant_load_rejected(self, tmp_path, tiny_vocab):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="sblstm", seed=10)
        params = build(cfg, tiny_vocab)
        path = tmp_path / "model.json"
        save_model(path, params, cfg, tiny_vocab)
        import dataclasses
        san_cfg = dataclasses.replace(cfg, variant="san")
        with pytest.raises(CheckpointError, match="variant"):
            load_model(path, expected=san_cfg)

    def test_version_mismatch_rejected(self, tmp_path, tiny_cfg, tiny_vocab):
        params = build(tiny_cfg, tiny_vocab)
        path = tmp_path / "model.json"
        save_model(path, params, tiny_cfg, tiny_vocab)
        payload = json.loads(path.read_text())
        payload["format_version"] = 2
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="format_version"):
            load_model(path)

    def test_missing_tensor_named(self, tmp_path, tiny_cfg, tiny_vocab):
        params = build(tiny_cfg, tiny_vocab)
        path = tmp_path / "model.json"
        save_model(path, params, tiny_cfg, tiny_vocab)
        payload = json.loads(path.read_text())
        del payload["tensors"]["embedding"]
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="embedding"):
            load_model(path)

    def test_noblstm2_checkpoint_has_no_layer2_tensors(self, tmp_path, tiny_vocab):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="san-noblstm2", seed=11)
        params = build(cfg, tiny_vocab)
        path = tmp_path / "model.json"
        save_model(path, params, cfg, tiny_vocab)
        payload = json.loads(path.read_text())
        assert not any(name.startswith("blstm2.") for name in payload["tensors"])


class TestEmbeddingGradients:
    def test_pad_row_stays_zero_through_training(self, tiny_vocab, fig_example):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="san", seed=12)
        params = build(cfg, tiny_vocab)
        batch = collate([fig_example])
        for _ in range(3):
            with Tape() as tape:
                probs, _ = forward_batch(batch, params, cfg)
                loss = batch_loss(probs, batch.gold, batch.mask)
            adam_step(params.group, tape.gradients(loss), lr=0.01)
        assert np.array_equal(params.embedding.data[PAD_ID], np.zeros(4))

    def test_bank_only_token_embedding_gets_gradient(self, tiny_vocab):
        # "video" and "calls" appear only in the bank; attending over the bank
        # must still tune their embedding rows.
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant="san", seed=13)
        params = build(cfg, tiny_vocab)
        rec = QaRecord("p", "c", ["works", "with", "iphone", "?"],
                       tags=["F", "F", "F", "O"])
        bank = [QaRecord("b", "c", ["video", "calls"])]
        ex = make_example(rec, bank, tiny_vocab, max_len=6, bank_size=2)
        batch = collate([ex])
        with Tape() as tape:
            probs, _ = forward_batch(batch, params, cfg)
            loss = batch_loss(probs, batch.gold, batch.mask)
        grad = tape.gradients(loss)[params.embedding]
        video_row = tiny_vocab.lookup("video")
        assert np.any(grad[video_row] != 0.0)
        assert np.array_equal(grad[PAD_ID], np.zeros(4))


class TestEndToEndGradients:
    @pytest.mark.parametrize("variant", ["san", "sblstm", "san-noblstm2"])
    def test_tiny_gradcheck_sampled(self, variant, tiny_vocab, fig_example):
        cfg = SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                        bank_size=2, dropout=0.0, variant=variant, seed=14)
        params = build(cfg, tiny_vocab)
        batch = collate([fig_example])

        def loss(group):
            probs, _ = forward_batch(batch, params, cfg)
            return batch_loss(probs, batch.gold, batch.mask)

        err = grad_check(loss, params.group, h=1e-5, max_coords_per_tensor=4,
                         rng=np.random.default_rng(0))
        assert err < 1e-4


class TestConfig:
    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            SanConfig(variant="crf")

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            SanConfig.from_dict({"variant": "san", "bogus": 1})

    def test_round_trip(self, tiny_cfg):
        assert SanConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg
