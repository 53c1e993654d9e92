import numpy as np
import pytest

from ccorl import tensor_nn as tn
from ccorl.rng import make_rng
from ccorl.tensor_nn import ParamStore, Tape, backward


def fd_check(build, params, **kw):
    """Wrapper tightening the default tolerance at step 1e-5."""
    err = tn.check_gradients(build, params, **kw)
    assert err < 1e-4, f"finite-difference mismatch: {err}"
    return err


def store_of(**arrays) -> ParamStore:
    ps = ParamStore()
    for k, v in arrays.items():
        ps.add(k, tn.param(np.asarray(v, dtype=np.float64)))
    return ps


class TestForwardBasics:
    def test_relu(self):
        assert tn.relu(tn.tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_sigmoid_at_zero(self):
        assert tn.sigmoid(tn.tensor(0.0)).data == pytest.approx(0.5)

    def test_softmax_symmetry(self):
        out = tn.softmax(tn.tensor([[3.0, 3.0, 3.0]])).data
        assert np.allclose(out, 1.0 / 3.0)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = make_rng(0)
        x = tn.tensor(rng.normal(size=(7, 5)) * 30)
        out = tn.softmax(x).data
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_linear_shape_mismatch(self):
        with pytest.raises(ValueError):
            tn.linear(tn.tensor(np.zeros((2, 3))), tn.param(np.zeros((4, 2))),
                      tn.param(np.zeros(2)))

    def test_log_softmax_stable_and_shift_invariant(self):
        rng = make_rng(1)
        x = rng.normal(size=(4, 6))
        out = tn.log_softmax(tn.tensor(x)).data
        assert (out <= 0).all()
        naive = np.log(np.exp(x) / np.exp(x).sum(axis=1, keepdims=True))
        assert np.allclose(out, naive, atol=1e-10)
        shifted = tn.log_softmax(tn.tensor(x + 123.0)).data
        assert np.allclose(out, shifted, atol=1e-10)
        # extreme logits stay finite in the fused form
        big = tn.log_softmax(tn.tensor(np.array([[1e4, 0.0, -1e4]]))).data
        assert np.isfinite(big[0, 0])

    def test_finite_check_flag(self):
        old = tn.CHECK_FINITE
        tn.CHECK_FINITE = True
        try:
            with pytest.raises(FloatingPointError):
                tn.mul(tn.tensor([1.0]), np.array([np.inf]))
        finally:
            tn.CHECK_FINITE = old


class TestGradients:
    """Central finite differences, step 1e-5, relative error < 1e-4."""

    def test_linear_grad_is_outer_product(self):
        rng = make_rng(2)
        x = rng.normal(size=(4, 3))
        ps = store_of(w=rng.normal(size=(3, 2)), b=rng.normal(size=2))
        t = Tape()
        loss = tn.tsum(tn.linear(tn.tensor(x), ps["w"], ps["b"], t), tape=t)
        backward(loss, t)
        # d/dw sum(x @ w + b) = x^T @ ones
        assert np.allclose(ps["w"].grad, x.T @ np.ones((4, 2)))
        assert np.allclose(ps["b"].grad, 4.0)

    def test_every_op_against_finite_differences(self):
        rng = make_rng(3)
        cases = {
            "linear": lambda p, t: tn.linear(tn.tensor(rng0(4, 3)), p["a33"], p["b3"], t),
            "matmul": lambda p, t: tn.matmul(p["a33"], p["c34"], t),
            "add": lambda p, t: tn.add(p["a33"], p["d33"], t),
            "add_broadcast": lambda p, t: tn.add(p["a33"], p["b3"], t),
            "mul": lambda p, t: tn.mul(p["a33"], p["d33"], t),
            "mul_const": lambda p, t: tn.mul(p["a33"], 2.5, t),
            "relu": lambda p, t: tn.relu(p["a33"], t),
            "sigmoid": lambda p, t: tn.sigmoid(p["a33"], t),
            "tanh": lambda p, t: tn.tanh(p["a33"], t),
            "log_sigmoid": lambda p, t: tn.log_sigmoid(p["a33"], t),
            "softmax": lambda p, t: tn.softmax(p["a33"], -1, t),
            "log_softmax": lambda p, t: tn.log_softmax(p["a33"], -1, t),
            "concat": lambda p, t: tn.concat([p["a33"], p["d33"]], 1, t),
            "slice": lambda p, t: tn.slice_cols(p["a33"], 1, 3, t),
            "reshape": lambda p, t: tn.reshape(p["a33"], (1, 9), t),
            "gather": lambda p, t: tn.gather_rows(p["a33"], np.array([0, 2, 2]), t),
            "repeat": lambda p, t: tn.repeat_rows(p["a33"], 3, t),
            "sum_axis": lambda p, t: tn.tsum(p["a33"], 1, t),
        }

        def rng0(*s):
            return make_rng(99).normal(size=s)

        for name, fn in cases.items():
            r = make_rng(hash(name) % 2 ** 31)
            # keep relu inputs away from the kink
            a = r.normal(size=(3, 3))
            a[np.abs(a) < 0.05] += 0.1
            ps = store_of(a33=a, d33=r.normal(size=(3, 3)),
                          b3=r.normal(size=3), c34=r.normal(size=(3, 4)))

            def build(t, fn=fn, ps=ps):
                out = fn(ps, t)
                return tn.tsum(tn.mul(out, 0.37, t), tape=t)

            fd_check(build, ps)

    def test_backward_accumulates_exactly_twice(self):
        rng = make_rng(5)
        ps = store_of(w=rng.normal(size=(3, 2)))
        x = rng.normal(size=(2, 3))

        def run():
            t = Tape()
            loss = tn.tsum(tn.matmul(tn.tensor(x), ps["w"], t), tape=t)
            backward(loss, t)

        ps.zero_grads()
        run()
        once = ps["w"].grad.copy()
        ps.zero_grads()
        run()
        run()
        assert np.allclose(ps["w"].grad, 2 * once)

    def test_repeated_backward_same_tape_accumulates(self):
        rng = make_rng(6)
        ps = store_of(w=rng.normal(size=(3, 2)))
        x = rng.normal(size=(2, 3))
        t = Tape()
        loss = tn.tsum(tn.matmul(tn.tensor(x), ps["w"], t), tape=t)
        ps.zero_grads()
        backward(loss, t)
        once = ps["w"].grad.copy()
        backward(loss, t)
        assert np.allclose(ps["w"].grad, 2 * once)

    def test_backward_errors(self):
        ps = store_of(w=np.ones((2, 2)))
        t = Tape()
        out = tn.matmul(tn.tensor(np.ones((2, 2))), ps["w"], t)
        with pytest.raises(ValueError, match="scalar"):
            backward(out, t)
        with pytest.raises(ValueError, match="empty"):
            backward(tn.tensor(1.0), Tape())


class TestLstm:
    def params(self, in_dim=3, hidden=4, seed=7):
        rng = make_rng(seed)
        ps = ParamStore()
        for k, v in tn.lstm_params(in_dim, hidden, rng).items():
            ps.add(k, v)
        return ps

    def test_length_one_equals_single_cell(self):
        ps = self.params()
        x = tn.tensor(make_rng(8).normal(size=(2, 3)))
        out = tn.lstm_encode_backward([x], {k: ps[k] for k in ps.names()})
        h0 = tn.tensor(np.zeros((2, 4)))
        c0 = tn.tensor(np.zeros((2, 4)))
        h, _ = tn.lstm_cell(x, h0, c0, ps["wx"], ps["wh"], ps["b"])
        assert np.allclose(out[0].data, h.data)

    def test_zero_inputs_zero_params_give_zero_states(self):
        ps = store_of(wx=np.zeros((3, 16)), wh=np.zeros((4, 16)), b=np.zeros(16))
        seq = [tn.tensor(np.zeros((2, 3))) for _ in range(3)]
        outs = tn.lstm_encode_backward(seq, {k: ps[k] for k in ps.names()})
        for h in outs:
            assert np.allclose(h.data, 0.0)

    def test_backward_direction(self):
        # output at the last position depends only on the last input
        ps = self.params()
        rng = make_rng(9)
        seq_a = [tn.tensor(rng.normal(size=(1, 3))) for _ in range(4)]
        seq_b = [tn.tensor(s.data + (10.0 if j < 3 else 0.0))
                 for j, s in enumerate(seq_a)]
        pd = {k: ps[k] for k in ps.names()}
        out_a = tn.lstm_encode_backward(seq_a, pd)
        out_b = tn.lstm_encode_backward(seq_b, pd)
        assert np.allclose(out_a[3].data, out_b[3].data)
        assert not np.allclose(out_a[0].data, out_b[0].data)

    def test_gradients_match_finite_differences(self):
        ps = self.params(seed=11)
        x = make_rng(12).normal(size=(4, 2, 3))

        def build(t):
            seq = [tn.tensor(x[j]) for j in range(4)]
            outs = tn.lstm_encode_backward(seq, {k: ps[k] for k in ps.names()}, t)
            total = outs[0]
            for h in outs[1:]:
                total = tn.add(total, h, t)
            return tn.tsum(tn.mul(total, 0.21, t), tape=t)

        fd_check(build, ps)

    def test_empty_sequence_rejected(self):
        ps = self.params()
        with pytest.raises(ValueError):
            tn.lstm_encode_backward([], {k: ps[k] for k in ps.names()})


class TestDropout:
    def test_p_zero_identity(self):
        x = tn.tensor([1.0, 2.0])
        assert tn.dropout(x, 0.0, True, make_rng(0)) is x

    def test_inference_identity(self):
        x = tn.tensor([1.0, 2.0])
        assert tn.dropout(x, 0.5, False) is x

    def test_drop_fraction(self):
        rng = make_rng(13)
        x = tn.tensor(np.ones(100_000))
        out = tn.dropout(x, 0.1, True, rng).data
        frac = (out == 0.0).mean()
        assert abs(frac - 0.1) <= 0.01
        # survivors are scaled by 1/(1-p)
        assert np.allclose(out[out != 0], 1.0 / 0.9)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            tn.dropout(tn.tensor([1.0]), 1.0, True, make_rng(0))
        with pytest.raises(ValueError):
            tn.dropout(tn.tensor([1.0]), -0.1, True, make_rng(0))


class TestXavier:
    def test_bounds(self):
        t = tn.xavier_init((30, 50), make_rng(14))
        a = np.sqrt(6.0 / 80)
        assert (np.abs(t.data) <= a).all()

    def test_variance(self):
        t = tn.xavier_init((250, 400), make_rng(15))
        target = 2.0 / (250 + 400)
        assert t.data.var() == pytest.approx(target, rel=0.05)

    def test_deterministic(self):
        a = tn.xavier_init((4, 4), make_rng(16)).data
        b = tn.xavier_init((4, 4), make_rng(16)).data
        assert np.array_equal(a, b)

    def test_requires_2d(self):
        with pytest.raises(ValueError):
            tn.xavier_init((4,), make_rng(0))


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = make_rng(17)
        ps = ParamStore()
        ps.add("enc.w", tn.param(rng.normal(size=(5, 7))))
        ps.add("head.b", tn.param(np.array([0.0, -0.0, 1e-308, np.pi])))
        ps.add("scalar", tn.param(np.array(3.5)))
        path = tmp_path / "model.ckpt"
        ps.save(path)
        raw = ParamStore.load_raw(path)
        assert set(raw) == {"enc.w", "head.b", "scalar"}
        for k, p in ps.items():
            assert raw[k].shape == p.data.shape
            assert raw[k].tobytes() == p.data.tobytes()
        # file starts with the format magic
        assert path.read_bytes().startswith(b"ccorl-v1\n")

    def test_save_load_values(self, tmp_path):
        rng = make_rng(18)
        ps = ParamStore()
        ps.add("w", tn.param(rng.normal(size=(3, 3))))
        path = tmp_path / "m.ckpt"
        ps.save(path)
        other = ParamStore()
        other.add("w", tn.param(np.zeros((3, 3))))
        other.load_values(ParamStore.load_raw(path))
        assert np.array_equal(other["w"].data, ps["w"].data)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="ccorl-v1"):
            tn.load_params_bytes(b"nope\n")

    def test_duplicate_name_rejected(self):
        ps = ParamStore()
        ps.add("w", tn.param(np.zeros(2)))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", tn.param(np.zeros(2)))
