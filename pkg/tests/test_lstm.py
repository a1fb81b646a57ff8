import numpy as np
import pytest

from fnr.autodiff import Tensor, reduce_sum
from fnr.lstm import BlstmParams, blstm_forward, init_blstm, init_lstm, lstm_step
from fnr.optim import ParamGroup, grad_check


def zero_lstm(din, hidden, forget_bias=0.0):
    g = ParamGroup()
    p = init_lstm(g, "z", din, hidden, np.random.default_rng(0))
    for name, t in g.items():
        t.data[...] = 0.0
    p.b_f.data[...] = forget_bias
    return p


def rand_lstm(din, hidden, seed):
    g = ParamGroup()
    return g, init_lstm(g, "r", din, hidden, np.random.default_rng(seed))


def reference_lstm_step(x, h, c, p):
    """Straight-line transcription of the gate equations, numpy only."""
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    i = sig(p.w_xi.data @ x + p.w_hi.data @ h + p.b_i.data)
    f = sig(p.w_xf.data @ x + p.w_hf.data @ h + p.b_f.data)
    o = sig(p.w_xo.data @ x + p.w_ho.data @ h + p.b_o.data)
    g = np.tanh(p.w_xg.data @ x + p.w_hg.data @ h + p.b_g.data)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


class TestLstmStep:
    def test_all_zero_parameters(self):
        p = zero_lstm(3, 2)
        h, c = lstm_step(Tensor([1.0, -1.0, 2.0]), Tensor(np.zeros(2)), Tensor(np.zeros(2)), p)
        assert np.array_equal(h.data, np.zeros(2))
        assert np.array_equal(c.data, np.zeros(2))

    def test_saturated_forget_gate_preserves_cell(self):
        p = zero_lstm(3, 2, forget_bias=50.0)
        c_prev = np.array([0.7, -0.3])
        h, c = lstm_step(Tensor([1.0, 0.0, 0.0]), Tensor(np.zeros(2)), Tensor(c_prev), p)
        assert np.allclose(c.data, c_prev, atol=1e-12)

    def test_matches_reference_recurrence(self):
        _, p = rand_lstm(3, 3, seed=42)
        rng = np.random.default_rng(1)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        h, c = lstm_step(Tensor(x), Tensor(h0), Tensor(c0), p)
        h_ref, c_ref = reference_lstm_step(x, h0, c0, p)
        assert np.allclose(h.data, h_ref, atol=1e-12)
        assert np.allclose(c.data, c_ref, atol=1e-12)

    def test_batched_matches_single(self):
        _, p = rand_lstm(3, 4, seed=5)
        rng = np.random.default_rng(2)
        xs = rng.normal(size=(2, 3))
        h0 = rng.normal(size=(2, 4))
        c0 = rng.normal(size=(2, 4))
        hb, cb = lstm_step(Tensor(xs), Tensor(h0), Tensor(c0), p)
        for b in range(2):
            hs, cs = lstm_step(Tensor(xs[b]), Tensor(h0[b]), Tensor(c0[b]), p)
            assert np.allclose(hb.data[b], hs.data, atol=1e-12, rtol=0)
            assert np.allclose(cb.data[b], cs.data, atol=1e-12, rtol=0)


def rand_blstm(din, hidden, seed):
    g = ParamGroup()
    return g, init_blstm(g, "b", din, hidden, np.random.default_rng(seed))


class TestBlstmForward:
    def test_output_shape(self):
        _, p = rand_blstm(3, 8, seed=0)
        out = blstm_forward(Tensor(np.random.default_rng(0).normal(size=(5, 3))),
                            np.ones(5), p)
        assert out.shape == (5, 16)

    def test_masked_rows_exactly_zero(self):
        _, p = rand_blstm(3, 4, seed=1)
        x = np.random.default_rng(1).normal(size=(5, 3))
        mask = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
        out = blstm_forward(Tensor(x), mask, p)
        assert np.array_equal(out.data[3:], np.zeros((2, 8)))

    def test_reversal_oracle(self):
        # Backward-direction outputs on s equal forward-direction outputs on
        # reversed s, re-reversed, when both directions share parameters.
        g = ParamGroup()
        fwd = init_lstm(g, "only", 3, 4, np.random.default_rng(3))
        p = BlstmParams(fwd=fwd, bwd=fwd)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        out = blstm_forward(Tensor(x), np.ones(6), p)
        out_rev = blstm_forward(Tensor(x[::-1].copy()), np.ones(6), p)
        fwd_half, bwd_half = out.data[:, :4], out.data[:, 4:]
        fwd_half_rev = out_rev.data[:, :4]
        assert np.allclose(bwd_half, fwd_half_rev[::-1], atol=1e-12)

    def test_pad_extension_bit_for_bit(self):
        _, p = rand_blstm(3, 4, seed=5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 3))
        base = blstm_forward(Tensor(x), np.ones(4), p)
        extended = np.vstack([x, rng.normal(size=(3, 3))])
        mask = np.array([1.0] * 4 + [0.0] * 3)
        out = blstm_forward(Tensor(extended), mask, p)
        assert np.array_equal(out.data[:4], base.data)
        assert np.array_equal(out.data[4:], np.zeros((3, 8)))

    def test_gradcheck_small_instance(self):
        group = ParamGroup()
        p = init_blstm(group, "b", 2, 3, np.random.default_rng(7))
        x = np.random.default_rng(8).normal(size=(4, 2))
        mask = np.array([1.0, 1.0, 1.0, 0.0])
        weights = np.random.default_rng(9).normal(size=(4, 6))

        def loss(g):
            out = blstm_forward(Tensor(x, const=True), mask, p)
            return reduce_sum(out * Tensor(weights, const=True))

        assert grad_check(loss, group, h=1e-5) < 1e-5

    def test_dropout_training_only(self):
        _, p = rand_blstm(2, 3, seed=10)
        x = Tensor(np.random.default_rng(11).normal(size=(4, 2)))
        eval_out = blstm_forward(x, np.ones(4), p, dropout_rate=0.5, training=False)
        ref = blstm_forward(x, np.ones(4), p)
        assert np.array_equal(eval_out.data, ref.data)
        train_out = blstm_forward(x, np.ones(4), p, dropout_rate=0.5, training=True,
                                  rng=np.random.default_rng(12))
        assert (train_out.data == 0.0).sum() > (ref.data == 0.0).sum()

    def test_batched_matches_single(self):
        _, p = rand_blstm(3, 4, seed=13)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(3, 5, 3))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], dtype=float)
        batched = blstm_forward(Tensor(x), mask, p)
        for b in range(3):
            single = blstm_forward(Tensor(x[b]), mask[b], p)
            assert np.allclose(batched.data[b], single.data, atol=1e-12, rtol=0)

    def test_mask_must_be_prefix_shaped(self):
        _, p = rand_blstm(2, 2, seed=15)
        with pytest.raises(ValueError):
            blstm_forward(Tensor(np.zeros((3, 2))), np.ones(4), p)
