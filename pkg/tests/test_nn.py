import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajtensor.nn import (
    Adam,
    Conv,
    ConvTranspose,
    Crop,
    Dense,
    Flatten,
    GlobalAvgPool,
    GRUCell,
    LSTMCell,
    MaxPool,
    Recurrent,
    ReLU,
    Repeat,
    Reshape,
    Sequential,
    ShapeError,
    Sigmoid,
    StateError,
    Tanh,
    TimeDistributed,
    Transpose,
    bce_loss,
    grad_check,
    gradients,
    gru_step,
    load_parameters,
    load_weights,
    lstm_step,
    parameter_count,
    parameters,
    save_weights,
    weights_from_bytes,
    weights_to_bytes,
)


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def naive_conv(x, w, b, stride, pad):
    """Direct loop cross-correlation for any spatial rank."""
    nd = x.ndim - 2
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    k = w.shape[2:]
    out_sp = tuple((xp.shape[2 + i] - k[i]) // stride[i] + 1 for i in range(nd))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in itertools.product(*(range(d) for d in out_sp)):
                sl = tuple(slice(pos[i] * stride[i], pos[i] * stride[i] + k[i]) for i in range(nd))
                out[(n, o) + pos] = np.sum(xp[(n, slice(None)) + sl] * w[o]) + b[o]
    return out


class TestLayerExamples:
    def test_conv3d_identity_kernel(self):
        conv = Conv(3, 1, 1, kernel=1, padding=0)
        conv.params["W"][...] = 1.0
        x = np.random.default_rng(0).random((2, 1, 3, 4, 5))
        np.testing.assert_array_equal(conv.forward(x), x)

    def test_dense_zero_weights(self):
        d = Dense(3, 2)
        d.params["W"][...] = 0
        d.params["b"][...] = [1, 2]
        np.testing.assert_array_equal(d.forward(np.random.default_rng(0).random((4, 3))), np.tile([1.0, 2.0], (4, 1)))

    def test_all_ones_conv2d(self):
        conv = Conv(2, 1, 1, kernel=3)
        conv.params["W"][...] = 1.0
        y = conv.forward(np.full((1, 1, 5, 6), 0.7))
        np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 9 * 0.7, rtol=1e-14)
        assert y[0, 0, 0, 0] == pytest.approx(4 * 0.7)

    def test_sigmoid_derivative_at_zero(self):
        s = Sigmoid()
        assert s.forward(np.zeros((1, 1)))[0, 0] == 0.5
        assert s.backward(np.ones((1, 1)))[0, 0] == 0.25

    def test_relu_dead_region(self):
        r = ReLU()
        x = np.array([[-2.0, -0.0, 0.0, 3.0]])
        np.testing.assert_array_equal(r.forward(x), [[0, 0, 0, 3]])
        np.testing.assert_array_equal(r.backward(np.ones((1, 4))), [[0, 0, 0, 1]])

    def test_tanh_backward(self):
        t = Tanh()
        y = t.forward(np.array([[0.3]]))
        assert t.backward(np.array([[1.0]]))[0, 0] == pytest.approx(1 - np.tanh(0.3) ** 2)

    def test_dense_gradient(self):
        rng = np.random.default_rng(3)
        rep = grad_check(Dense(5, 3, rng), rng.standard_normal((4, 5)), tolerance=1e-6, max_entries=None)
        assert rep.passed, str(rep)


class TestErrors:
    def test_backward_before_forward(self):
        for layer in (Dense(2, 2), Conv(1, 1, 1), ReLU(), MaxPool(2), Recurrent("gru", 2, 2)):
            with pytest.raises(StateError):
                layer.backward(np.zeros((1, 2)))

    def test_backward_twice(self):
        d = Dense(2, 2)
        d.forward(np.ones((1, 2)))
        d.backward(np.ones((1, 2)))
        with pytest.raises(StateError):
            d.backward(np.ones((1, 2)))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            Dense(3, 2).forward(np.ones((2, 4)))
        with pytest.raises(ShapeError):
            Conv(2, 3, 1).forward(np.ones((1, 2, 4, 4)))
        with pytest.raises(ShapeError):
            Conv(2, 1, 1, kernel=5, padding=0).forward(np.ones((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            MaxPool(3).forward(np.ones((1, 1, 4, 4)))
        with pytest.raises(ShapeError):
            Recurrent("lstm", 3, 2).forward(np.ones((1, 4, 2)))
        with pytest.raises(ShapeError):
            Reshape(5).forward(np.ones((2, 4)))
        with pytest.raises(ShapeError):
            Crop(5).forward(np.ones((2, 4)))
        with pytest.raises(ShapeError):
            bce_loss(np.ones(3), np.ones(2))
        with pytest.raises(ShapeError):
            gru_step(GRUCell(3, 2), np.zeros(2), np.zeros(4))

    def test_unknown_cell(self):
        with pytest.raises(ValueError):
            Recurrent("rnn", 2, 2)


class TestConvOracle:
    @pytest.mark.parametrize(
        "ndim,spatial,kernel,stride,pad",
        [
            (1, (9,), 3, 1, 1),
            (1, (10,), 4, 2, 0),
            (2, (7, 6), 3, 1, 1),
            (2, (8, 9), (3, 2), (2, 1), (1, 0)),
            (3, (5, 6, 4), 3, 1, 1),
            (3, (6, 5, 7), (2, 3, 3), (2, 2, 1), (0, 1, 1)),
        ],
    )
    def test_forward_matches_loops(self, ndim, spatial, kernel, stride, pad):
        rng = np.random.default_rng(ndim)
        conv = Conv(ndim, 2, 3, kernel=kernel, stride=stride, padding=pad, rng=rng)
        conv.params["b"][...] = rng.standard_normal(3)
        x = rng.standard_normal((2, 2) + spatial)
        ref = naive_conv(x, conv.params["W"], conv.params["b"], conv.stride, conv.padding)
        np.testing.assert_allclose(conv.forward(x), ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize(
        "ndim,spatial,kernel,stride,pad",
        [
            (1, (9,), 3, 1, 1),
            (1, (10,), 2, 2, 0),
            (2, (8, 6), 2, 2, 0),
            (2, (7, 7), 3, 2, 1),
            (3, (4, 6, 4), 2, 2, 0),
            (3, (5, 4, 3), 3, 1, 1),
        ],
    )
    def test_transpose_is_adjoint(self, ndim, spatial, kernel, stride, pad):
        rng = np.random.default_rng(10 + ndim)
        conv = Conv(ndim, 2, 3, kernel=kernel, stride=stride, padding=pad, rng=rng)
        tconv = ConvTranspose(ndim, 3, 2, kernel=kernel, stride=stride, padding=pad)
        tconv.params["W"][...] = conv.params["W"]
        x = rng.standard_normal((2, 2) + spatial)
        cx = conv.forward(x)
        y = rng.standard_normal(cx.shape)
        ty = tconv.forward(y)
        assert ty.shape == x.shape
        assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10

    @pytest.mark.parametrize("ndim,spatial", [(1, (8,)), (2, (6, 5)), (3, (4, 4, 6))])
    def test_conv_gradients(self, ndim, spatial):
        rng = np.random.default_rng(20 + ndim)
        for stride in (1, 2):
            conv = Conv(ndim, 2, 3, kernel=3, stride=stride, padding=1, rng=rng)
            conv.params["b"][...] = rng.standard_normal(3)
            rep = grad_check(conv, rng.standard_normal((2, 2) + spatial), tolerance=1e-6)
            assert rep.passed, str(rep)

    @pytest.mark.parametrize("ndim,spatial", [(1, (5,)), (2, (3, 4)), (3, (2, 3, 2))])
    def test_tconv_gradients(self, ndim, spatial):
        rng = np.random.default_rng(30 + ndim)
        tconv = ConvTranspose(ndim, 3, 2, rng=rng)
        rep = grad_check(tconv, rng.standard_normal((2, 3) + spatial), tolerance=1e-6)
        assert rep.passed, str(rep)

    def test_skipped_input_gradient(self):
        conv = Conv(2, 1, 2, input_grad=False)
        x = np.random.default_rng(0).random((1, 1, 4, 4))
        conv.forward(x)
        assert conv.backward(np.ones((1, 2, 4, 4))) is None
        rep = grad_check(Sequential(conv, ReLU()), x, tolerance=1e-6)
        assert rep.passed and "input" not in rep.errors


class TestMaxPool:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 3), st.lists(st.integers(1, 5), min_size=3, max_size=3), st.integers(0, 10**6))
    def test_matches_brute_force(self, ndim, dims, seed):
        spatial = tuple(dims[:ndim])
        x = np.random.default_rng(seed).standard_normal((2, 2) + spatial)
        pool = MaxPool(ndim)
        y = pool.forward(x)
        k = [2 if d >= 2 else 1 for d in spatial]
        out_sp = tuple(d // q for d, q in zip(spatial, k))
        assert y.shape == (2, 2) + out_sp
        for n, c in itertools.product(range(2), range(2)):
            for pos in itertools.product(*(range(d) for d in out_sp)):
                sl = tuple(slice(p * q, p * q + q) for p, q in zip(pos, k))
                assert y[(n, c) + pos] == x[(n, c) + sl].max()

    def test_gradient_routes_to_argmax(self):
        x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
        pool = MaxPool(2)
        pool.forward(x)
        np.testing.assert_array_equal(pool.backward(np.array([[[[7.0]]]])), [[[[0, 7], [0, 0]]]])


def gru_reference(p, h, x, hd):
    z = sig(x @ p["W"][:, :hd] + h @ p["U"][:, :hd] + p["b"][:hd])
    r = sig(x @ p["W"][:, hd : 2 * hd] + h @ p["U"][:, hd : 2 * hd] + p["b"][hd : 2 * hd])
    n = np.tanh(x @ p["W"][:, 2 * hd :] + (r * h) @ p["U"][:, 2 * hd :] + p["b"][2 * hd :])
    return (1 - z) * h + z * n


def lstm_reference(p, h, c, x, hd):
    a = x @ p["W"] + h @ p["U"] + p["b"]
    i, f, g, o = sig(a[:hd]), sig(a[hd : 2 * hd]), np.tanh(a[2 * hd : 3 * hd]), sig(a[3 * hd :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestRecurrent:
    def test_gru_step_formula(self):
        rng = np.random.default_rng(0)
        cell = GRUCell(3, 4, rng)
        cell.params["b"][...] = rng.standard_normal(12)
        h, x = rng.standard_normal(4), rng.standard_normal(3)
        np.testing.assert_allclose(gru_step(cell, h, x), gru_reference(cell.params, h, x, 4), rtol=1e-12)

    def test_lstm_step_formula(self):
        rng = np.random.default_rng(1)
        cell = LSTMCell(3, 4, rng)
        assert np.all(cell.params["b"][4:8] == 1) and not cell.params["b"][:4].any()
        h, c, x = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(3)
        hn, cn = lstm_step(cell, h, c, x)
        rh, rc = lstm_reference(cell.params, h, c, x, 4)
        np.testing.assert_allclose(hn, rh, rtol=1e-12)
        np.testing.assert_allclose(cn, rc, rtol=1e-12)

    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    def test_unrolled_matches_steps(self, cell):
        rng = np.random.default_rng(2)
        layer = Recurrent(cell, 3, 4, return_sequences=True, rng=rng)
        x = rng.standard_normal((2, 5, 3))
        hs = layer.forward(x)
        for n in range(2):
            h, c = np.zeros(4), np.zeros(4)
            for t in range(5):
                if cell == "gru":
                    h = gru_reference(layer.params, h, x[n, t], 4)
                else:
                    h, c = lstm_reference(layer.params, h, c, x[n, t], 4)
                np.testing.assert_allclose(hs[n, t], h, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    @pytest.mark.parametrize("seq", [True, False])
    def test_gradients(self, cell, seq):
        rng = np.random.default_rng(3)
        layer = Recurrent(cell, 3, 4, return_sequences=seq, rng=rng)
        rep = grad_check(layer, rng.standard_normal((2, 5, 3)), tolerance=1e-6, max_entries=None)
        assert rep.passed, str(rep)

    def test_last_state(self):
        layer = Recurrent("gru", 2, 3)
        x = np.random.default_rng(4).standard_normal((3, 4, 2))
        last = layer.forward(x)
        layer.return_sequences = True
        np.testing.assert_array_equal(layer.forward(x)[:, -1], last)


class TestOptim:
    def test_adam_first_step_is_sign(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -4.0, 1e-3])}
        Adam(lr=0.01).step(p, g)
        np.testing.assert_allclose(p["w"], [0.99, -1.99, 0.49], rtol=1e-6)

    def test_adam_zero_lr_keeps_params(self):
        p = {"w": np.array([1.0, 2.0])}
        opt = Adam(lr=0.0)
        for _ in range(3):
            opt.step(p, {"w": np.array([1.0, -1.0])})
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_adam_state_round_trip(self):
        p = {"w": np.array([1.0, 2.0])}
        a = Adam()
        a.step(p, {"w": np.array([0.5, 0.1])})
        b = Adam()
        b.load_state_arrays(a.state_arrays())
        assert b.step_count == 1
        np.testing.assert_array_equal(b.m["w"], a.m["w"])

    def test_adam_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})

    def test_bce_value_and_gradient(self):
        loss, grad = bce_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(-(np.log(0.9) + np.log(0.8)) / 2, rel=1e-12)
        np.testing.assert_allclose(grad, [-1 / 0.9 / 2, 1 / 0.8 / 2], rtol=1e-12)

    def test_bce_clamps(self):
        loss, _ = bce_loss(np.array([0.0]), np.array([1.0]))
        assert loss == pytest.approx(-np.log(1e-7))

    def test_bce_rejects_soft_targets_by_default(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([0.5]), np.array([0.5]))
        assert bce_loss(np.array([0.5]), np.array([0.5]), soft=True)[0] == pytest.approx(np.log(2))


class TestNetworks:
    def make(self):
        rng = np.random.default_rng(0)
        return Sequential(TimeDistributed(Dense(3, 4, rng)), Recurrent("lstm", 4, 5, rng=rng), Dense(5, 2, rng), Sigmoid())

    def test_parameter_names(self):
        net = self.make()
        assert list(parameters(net)) == ["0.td.W", "0.td.b", "1.W", "1.U", "1.b", "2.W", "2.b"]
        assert parameter_count(net) == 3 * 4 + 4 + 4 * 20 + 5 * 20 + 20 + 5 * 2 + 2

    def test_gradient_check_composite(self):
        net = self.make()
        x = np.random.default_rng(1).standard_normal((3, 4, 3))
        target = np.array([[1, 0], [0, 1], [1, 1]], dtype=float)
        rep = grad_check(net, x, target=target, tolerance=1e-6, max_entries=None)
        assert rep.passed, str(rep)
        assert set(gradients(net)) == set(parameters(net))

    def test_shape_plumbing_gradients(self):
        rng = np.random.default_rng(2)
        net = Sequential(
            Transpose(0, 2, 1), Dense(3, 4, rng), Reshape(2, 2, 2), Flatten(), Repeat(3),
            Crop(2, 6), GlobalAvgPool(), Tanh(),
        )
        rep = grad_check(net, rng.standard_normal((2, 3, 2)), tolerance=1e-6, max_entries=None)
        assert rep.passed, str(rep)

    def test_load_parameters(self):
        a, b = self.make(), Sequential(*self.make().layers)
        for arr in parameters(b).values():
            arr[...] = 0
        load_parameters(b, parameters(a))
        x = np.random.default_rng(5).standard_normal((2, 4, 3))
        np.testing.assert_array_equal(a.forward(x), b.forward(x))
        with pytest.raises(KeyError):
            load_parameters(b, {})
        with pytest.raises(KeyError):
            load_parameters(b, {**parameters(a), "extra": np.zeros(1)})
        with pytest.raises(ShapeError):
            load_parameters(b, {**parameters(a), "2.b": np.zeros(3)})
        load_parameters(b, {}, strict=False)

    def test_batch_invariance(self):
        net = self.make()
        x = np.random.default_rng(6).standard_normal((7, 4, 3))
        batch = net.forward(x)
        for i in range(7):
            np.testing.assert_array_equal(net.forward(x[i : i + 1])[0], batch[i])


class TestWeightFiles:
    def test_round_trip(self, tmp_path):
        blocks = {"a.W": np.arange(6.0).reshape(2, 3), "ä": np.array(1.5), "c": np.zeros((1, 0))}
        save_weights(tmp_path / "w.ttwt", blocks)
        back = load_weights(tmp_path / "w.ttwt")
        assert list(back) == list(blocks)
        for k in blocks:
            np.testing.assert_array_equal(back[k], blocks[k])

    def test_values_stored_as_float32(self):
        back = weights_from_bytes(weights_to_bytes({"x": np.array([0.1])}))
        assert back["x"][0] == np.float32(0.1)

    def test_corrupt(self):
        buf = weights_to_bytes({"x": np.ones((2, 2))})
        with pytest.raises(ValueError):
            weights_from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(ValueError):
            weights_from_bytes(buf[:4] + b"\x09" + buf[5:])
        with pytest.raises(ValueError):
            weights_from_bytes(buf[:-3])
        with pytest.raises(ValueError):
            weights_from_bytes(buf + b"\x00")
        with pytest.raises(ValueError):
            weights_from_bytes(buf[:12])


class TestStepExamples:
    def test_gru_zero_parameters_halves_state(self):
        cell = GRUCell(3, 4)
        for arr in cell.params.values():
            arr[...] = 0
        h = np.array([0.4, -1.0, 2.0, 0.0])
        np.testing.assert_array_equal(gru_step(cell, h, np.ones(3)), 0.5 * h)
        np.testing.assert_array_equal(gru_step(cell, np.zeros(4), np.ones(3)), np.zeros(4))

    def test_gru_three_steps_gradient(self):
        rng = np.random.default_rng(9)
        rep = grad_check(Recurrent("gru", 2, 3, rng=rng), rng.standard_normal((1, 3, 2)), tolerance=1e-5, max_entries=None)
        assert rep.passed, str(rep)

    def test_adam_first_step_from_zero(self):
        p = {"t": np.zeros(1)}
        opt = Adam(lr=1e-3)
        opt.step(p, {"t": np.array([2.0])})
        assert p["t"][0] == pytest.approx(-1e-3, rel=1e-6)
        opt.step(p, {"t": np.array([2.0])})
        assert p["t"][0] < -1e-3

    def test_adam_zero_gradient(self):
        p = {"t": np.array([0.7])}
        Adam().step(p, {"t": np.zeros(1)})
        assert p["t"][0] == 0.7

    def test_bce_examples(self):
        assert bce_loss(np.full(5, 0.5), np.array([0, 1, 1, 0, 1.0]))[0] == pytest.approx(np.log(2), rel=1e-12)
        assert bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))[0] < 1e-6
        assert bce_loss(np.array([0.9]), np.array([1.0]))[0] == pytest.approx(0.10536, abs=1e-5)

    def test_dense_sigmoid_bce_gradient(self):
        rng = np.random.default_rng(11)
        net = Sequential(Dense(4, 3, rng), Sigmoid())
        target = (rng.random((5, 3)) > 0.5).astype(float)
        rep = grad_check(net, rng.standard_normal((5, 4)), target=target, tolerance=1e-6, max_entries=None)
        assert rep.passed and rep.max_error < 1e-6, str(rep)

    def test_zero_parameter_network_passes(self):
        rep = grad_check(Sequential(ReLU(), Tanh()), np.array([[0.3, -0.2]]), check_input=False)
        assert rep.passed and rep.errors == {}

    def test_forward_is_pure(self):
        rng = np.random.default_rng(12)
        net = Sequential(Conv(2, 1, 2, rng=rng), MaxPool(2), Flatten(), Dense(8, 1, rng))
        x = rng.standard_normal((2, 1, 4, 4))
        before = {k: v.copy() for k, v in parameters(net).items()}
        a = net.forward(x)
        net.backward(np.ones_like(a))
        np.testing.assert_array_equal(net.forward(x), a)
        for k, v in parameters(net).items():
            np.testing.assert_array_equal(v, before[k])


class _WrongDense(Dense):
    def backward(self, grad):
        dx = super().backward(grad)
        self.grads["W"] = self.grads["W"] * 1.01
        return dx


class TestGradCheckDetects:
    def test_wrong_gradient_fails_despite_kinks(self):
        rng = np.random.default_rng(13)
        net = Sequential(_WrongDense(4, 6, rng), ReLU(), Dense(6, 2, rng))
        rep = grad_check(net, rng.standard_normal((3, 4)), max_entries=None)
        assert not rep.passed and "0.W" in rep.failures()

    def test_kink_is_remeasured(self):
        # pre-activation 5e-5 lies inside the 1e-4 step of the ReLU switch
        d = Dense(1, 1)
        d.params["W"][...] = 1.0
        net = Sequential(d, ReLU())
        rep = grad_check(net, np.array([[5e-5]]), max_entries=None)
        assert rep.passed and rep.kinks >= 1
