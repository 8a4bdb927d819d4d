import numpy as np
import pytest

import cscomp.lamp as lamp_mod
from cscomp.errors import FormatError, ParameterError, SolverError
from cscomp.lamp import (
    AdamState,
    LampModel,
    TrainConfig,
    adam_step,
    decode_model,
    encode_model,
    lamp_backward,
    lamp_forward,
    lamp_layer,
    load_model,
    loss,
    save_model,
    split_gradients,
    train,
    training_batch,
)
from cscomp.model import SensingMatrix, build_sensing_matrix, complex_normal, generate_sparse_sample, synthesize_measurements
from cscomp.solvers import amp_mmv, row_norms

from conftest import gaussian_matrix, sparse_rows


def random_model(f, T, rng, gamma=0.5):
    alpha = rng.uniform(0.2, 0.6, T)
    beta = rng.uniform(0.8, 1.2, T)
    B = f.H + complex_normal(rng, f.H.shape, 0.01)
    return LampModel(alpha, beta, B, f, gamma)


def objective(model, y, x_true):
    x_hat, _ = lamp_forward(model, y)
    return loss(x_hat, x_true, y, model.F, model.gamma)


class TestModel:
    def test_initial(self, dft1):
        m = LampModel.initial(dft1, 5)
        assert m.T == 5
        assert np.array_equal(m.B, dft1.H)
        assert np.all(m.alpha == 1) and np.all(m.beta == 1)
        assert m.num_parameters() == 2 * 5 + 2 * 257 * 52

    def test_b_not_aliased(self, dft1):
        m = LampModel.initial(dft1, 2)
        m.B[0, 0] = 5
        assert dft1.H[0, 0] != 5

    def test_validation(self, dft1):
        with pytest.raises(ParameterError):
            LampModel.initial(dft1, 0)
        with pytest.raises(ParameterError):
            LampModel(np.ones(2), np.ones(2), np.zeros((3, 3)), dft1)
        with pytest.raises(ParameterError):
            LampModel.initial(dft1, 2, gamma=1.5)


class TestLayer:
    def test_fixed_point(self):
        rng = np.random.default_rng(0)
        f = gaussian_matrix(20, 40, rng)
        x_star, _ = sparse_rows(40, 2, 3, rng)
        y = f.entries @ x_star
        st = lamp_layer(x_star, np.zeros_like(y), y, 1.0, 0.7, f.H, f)
        assert np.allclose(st.X, 0.7 * x_star)
        assert np.allclose(st.V, y - 0.7 * f.entries @ x_star)
        st = lamp_layer(x_star, np.zeros_like(y), y, 1.0, 1.0, f.H, f)
        assert np.allclose(st.X, x_star) and np.allclose(st.V, 0)

    def test_full_shrinkage(self, dft1):
        y = complex_normal(np.random.default_rng(1), (52, 3))
        st = lamp_layer(np.zeros((257, 3)), y, y, 1e6, 1.0, dft1.H, dft1)
        assert np.all(st.X == 0)
        assert np.array_equal(st.V, y)

    def test_two_by_two(self):
        f = SensingMatrix.from_array(np.eye(2))
        y = np.array([[1.0], [0.1]], dtype=complex)
        st = lamp_layer(np.zeros((2, 1)), y, y, 1.0, 1.0, np.eye(2), f)
        lam = np.sqrt(1.01) / np.sqrt(2)
        assert st.lam == pytest.approx(lam, abs=1e-15)
        assert np.allclose(st.X, [[1 - lam], [0]], atol=1e-15)


class TestForward:
    @pytest.mark.parametrize("os_", [1, 4])
    def test_fresh_matches_amp_mmv(self, os_):
        f = build_sensing_matrix(os_)
        m = LampModel.initial(f, 20)
        x = generate_sparse_sample(f.N, 16, 10, 3)
        y = synthesize_measurements(f, x, None)
        x_hat, _ = lamp_forward(m, y)
        assert np.max(np.abs(x_hat - amp_mmv(f, y, 1.0, 20).estimate)) <= 1e-10

    def test_matches_amp_mmv_nontrivial(self, dft1):
        # smaller alpha so that rows actually pass the threshold
        m = LampModel.initial(dft1, 8)
        m.alpha[:] = 0.3
        rng = np.random.default_rng(2)
        for _ in range(5):
            y = complex_normal(rng, (52, 4))
            x_hat, _ = lamp_forward(m, y)
            ref = amp_mmv(dft1, y, 0.3, 8).estimate
            assert np.any(ref != 0)
            assert np.max(np.abs(x_hat - ref)) <= 1e-10

    def test_zero_input(self, dft1):
        x_hat, states = lamp_forward(LampModel.initial(dft1, 4), np.zeros((52, 3)))
        assert np.all(x_hat == 0) and len(states) == 4

    def test_single_layer(self, dft1):
        rng = np.random.default_rng(3)
        m = random_model(dft1, 1, rng)
        y = complex_normal(rng, (52, 3))
        x_hat, _ = lamp_forward(m, y)
        st = lamp_layer(np.zeros((257, 3)), y, y, m.alpha[0], m.beta[0], m.B, dft1)
        assert np.array_equal(x_hat, st.X)

    def test_batched_equals_loop(self, dft1):
        rng = np.random.default_rng(4)
        m = random_model(dft1, 3, rng)
        ys = complex_normal(rng, (5, 52, 2))
        xb, _ = lamp_forward(m, ys)
        for i in range(5):
            assert np.allclose(xb[i], lamp_forward(m, ys[i])[0], atol=1e-13)

    def test_shape_error(self, dft1):
        with pytest.raises(ParameterError):
            lamp_forward(LampModel.initial(dft1, 2), np.zeros((51, 2)))
        with pytest.raises(ParameterError):
            lamp_forward(LampModel.initial(dft1, 2), np.zeros((52, 2)), layers=3)


class TestLoss:
    def test_zero(self, dft1):
        x = generate_sparse_sample(257, 2, 3, 0)
        assert loss(x, x, dft1.entries @ x, dft1, 0.3) == 0.0

    def test_gamma_zero(self, dft1):
        rng = np.random.default_rng(5)
        x, x_hat = complex_normal(rng, (257, 2)), complex_normal(rng, (257, 2))
        y = complex_normal(rng, (52, 2))
        assert loss(x_hat, x, y, dft1, 0.0) == pytest.approx(np.linalg.norm(x - x_hat) ** 2)

    def test_noise_only(self, dft1):
        rng = np.random.default_rng(6)
        x = complex_normal(rng, (257, 2))
        eta = complex_normal(rng, (52, 2))
        assert loss(x, x, dft1.entries @ x + eta, dft1, 0.5) == pytest.approx(0.5 * np.linalg.norm(eta) ** 2)

    def test_nonnegative(self, dft1):
        rng = np.random.default_rng(7)
        for g in (0.0, 0.25, 1.0):
            assert loss(complex_normal(rng, (257, 1)), complex_normal(rng, (257, 1)),
                        complex_normal(rng, (52, 1)), dft1, g) >= 0


def fd_gradients(model, y, x_true, h=1e-6):
    params = model.parameters()
    out = {}
    for key, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[key][idx] += h
            minus[key][idx] -= h
            mp, mm = model.copy(), model.copy()
            mp.set_parameters(plus)
            mm.set_parameters(minus)
            g[idx] = (objective(mp, y, x_true) - objective(mm, y, x_true)) / (2 * h)
        out[key] = g
    return out


def kink_free(model, y, margin=1e-3):
    _, states = lamp_forward(model, y)
    return all(np.all(np.abs(row_norms(st.pre_shrink) - st.lam) > margin) for st in states) and \
        any(np.any(st.active_rows) for st in states)


class TestBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 4:
            f = gaussian_matrix(8, 16, rng)
            m = random_model(f, 3, rng, gamma=0.5)
            x_true, _ = sparse_rows(16, 2, 2, rng)
            y = f.entries @ x_true + complex_normal(rng, (8, 2), 0.01)
            if not kink_free(m, y):
                continue
            _, states = lamp_forward(m, y)
            g = split_gradients(lamp_backward(m, states, x_true, y))
            fd = fd_gradients(m, y, x_true)
            for key in g:
                assert np.linalg.norm(g[key] - fd[key]) <= 1e-4 * max(np.linalg.norm(fd[key]), 1e-8), key
            checked += 1

    def test_final_beta_analytic(self):
        rng = np.random.default_rng(9)
        f = gaussian_matrix(20, 40, rng)
        x_star, _ = sparse_rows(40, 2, 3, rng)
        x_star *= 5
        y = f.entries @ x_star
        m = LampModel.initial(f, 2, gamma=1.0)
        m.alpha[:] = 0.05
        m.beta[-1] = 0.9
        x_hat, states = lamp_forward(m, y)
        st = states[-1]
        assert np.any(st.active_rows)
        S = st.shrunk
        FS = f.entries @ S
        b = m.beta[-1]
        # beta_T reaches the output only through X_T = beta_T * S
        analytic = -2 * np.vdot(FS, y - b * FS).real
        g = lamp_backward(m, states, x_star, y)
        assert g["beta"][-1] == pytest.approx(analytic, rel=1e-10, abs=1e-12)

    def test_zero_input(self, dft1):
        m = random_model(dft1, 3, np.random.default_rng(10))
        y = np.zeros((52, 2), complex)
        _, states = lamp_forward(m, y)
        g = lamp_backward(m, states, np.zeros((257, 2)), y)
        assert all(np.all(v == 0) for v in g.values())

    def test_batch_is_mean(self):
        rng = np.random.default_rng(11)
        f = gaussian_matrix(8, 16, rng)
        m = random_model(f, 3, rng)
        xs = np.stack([sparse_rows(16, 2, 2, rng)[0] for _ in range(4)])
        ys = np.einsum("mn,bnp->bmp", f.entries, xs)
        _, states = lamp_forward(m, ys)
        gb = lamp_backward(m, states, xs, ys)
        singles = []
        for i in range(4):
            _, st = lamp_forward(m, ys[i])
            singles.append(lamp_backward(m, st, xs[i], ys[i]))
        for key in gb:
            assert np.allclose(gb[key], np.mean([s[key] for s in singles], axis=0), atol=1e-12)


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(m={"w": np.array([0.5, 0.5])}, v={"w": np.array([1.0, 1.0])}, step=3)
        new, st = adam_step(params, {"w": np.zeros(2)}, state)
        assert np.allclose(new["w"], params["w"] - 1e-3 * (0.45 / (1 - 0.9 ** 4)) /
                           (np.sqrt(0.999 / (1 - 0.999 ** 4)) + 1e-8))
        assert np.all(st.m["w"] < state.m["w"]) and np.all(st.v["w"] < state.v["w"])
        fresh, _ = adam_step(params, {"w": np.zeros(2)}, AdamState())
        assert np.array_equal(fresh["w"], params["w"])

    def test_first_step(self):
        new, st = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState())
        assert new["w"][0] == pytest.approx(-1e-3, rel=1e-7)
        assert st.step == 1

    def test_deterministic_and_pure(self):
        params = {"w": np.arange(3.0)}
        grads = {"w": np.array([0.1, -0.2, 0.3])}
        state = AdamState()
        a, sa = adam_step(params, grads, state)
        b, sb = adam_step(params, grads, state)
        assert np.array_equal(a["w"], b["w"]) and state.step == 0
        assert np.array_equal(params["w"], np.arange(3.0))

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


@pytest.fixture(scope="module")
def small_f():
    return gaussian_matrix(12, 24, np.random.default_rng(12))


def small_cfg(**kw):
    base = dict(T=1, n_pre=1, n_post=0, batches_per_epoch=10, batch_size=4, s=2, p=2,
                snr_db=20.0, gamma=0.5, lr=1e-2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestTraining:
    def test_batch_normalized(self, small_f):
        x, y = training_batch(small_f, 6, 2, 3, 20.0, np.random.default_rng(0))
        assert x.shape == (6, 24, 3) and y.shape == (6, 12, 3)
        assert np.allclose(np.linalg.norm(y, axis=(1, 2)), 1)
        for i in range(6):
            assert np.count_nonzero(row_norms(x[i])) == 2

    def test_base_case(self, small_f):
        m = train(small_f, small_cfg())
        fresh = LampModel.initial(small_f, 1)
        assert m.T == 1
        assert not m.same_parameters(fresh)

    def test_deterministic(self, small_f):
        a = train(small_f, small_cfg(T=2, n_post=1))
        b = train(small_f, small_cfg(T=2, n_post=1))
        assert a.same_parameters(b)

    def test_earlier_layers_frozen_in_pretraining(self, small_f):
        one = train(small_f, small_cfg(T=1))
        two = train(small_f, small_cfg(T=2))
        assert one.alpha[0] == two.alpha[0] and one.beta[0] == two.beta[0]
        assert not np.array_equal(one.B, two.B)

    def test_does_not_mutate_matrix(self, small_f):
        before = small_f.entries.copy()
        train(small_f, small_cfg(T=2, n_post=1))
        assert np.array_equal(small_f.entries, before)

    def test_progress_callback(self, small_f):
        seen = []
        train(small_f, small_cfg(T=2, n_post=1), on_batch=lambda *a: seen.append(a[:4]))
        assert len(seen) == 2 * 2 * 10
        assert seen[0] == (1, "pre", 0, 0) and seen[-1] == (2, "post", 0, 9)

    def test_divergence_reported(self, small_f, monkeypatch):
        monkeypatch.setattr(lamp_mod, "loss", lambda *a, **k: float("nan"))
        with pytest.raises(SolverError, match="layer 1.*batch 0"):
            train(small_f, small_cfg())

    def test_loss_decreases(self, small_f):
        values = []
        train(small_f, small_cfg(T=2, n_pre=2, n_post=2, batches_per_epoch=100),
              on_batch=lambda *a: values.append(a[4]))
        assert np.mean(values[-100:]) <= np.mean(values[:100])

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(T=0)
        with pytest.raises(ParameterError):
            TrainConfig(lr=0)


class TestModelFiles:
    def test_round_trip(self, tmp_path, dft1):
        m = random_model(dft1, 4, np.random.default_rng(13), gamma=0.25)
        path = tmp_path / "m.lmp"
        save_model(m, path)
        back = load_model(path)
        assert back.same_parameters(m) and back.F.os == 1
        assert encode_model(back) == path.read_bytes()

    def test_layout(self, dft1):
        m = LampModel.initial(dft1, 2)
        data = encode_model(m)
        assert data[:4] == b"LMP1"
        assert len(data) == 4 + 12 + 8 + 16 * 2 + 16 * 257 * 52
        B = np.frombuffer(data, "<f8", offset=4 + 12 + 8 + 32).reshape(-1, 2)
        assert B[1, 0] == m.B[1, 0].real and B[1, 1] == m.B[1, 0].imag

    def test_truncated(self, tmp_path, dft1):
        data = encode_model(LampModel.initial(dft1, 2))
        for cut in (2, 20, len(data) - 1):
            with pytest.raises(FormatError):
                decode_model(data[:cut])

    def test_bad_magic(self, dft1):
        data = bytearray(encode_model(LampModel.initial(dft1, 1)))
        data[0:4] = b"LMP2"
        with pytest.raises(FormatError):
            decode_model(bytes(data))

    def test_shape_mismatch(self, dft1, dft4):
        with pytest.raises(FormatError):
            decode_model(encode_model(LampModel.initial(dft1, 1)), dft4)

    def test_custom_matrix_needs_f(self, small_f):
        data = encode_model(LampModel.initial(small_f, 1))
        with pytest.raises(FormatError):
            decode_model(data)
        assert decode_model(data, small_f).same_parameters(LampModel.initial(small_f, 1))

    def test_os4_reload_same_outputs(self, tmp_path, dft4):
        m = random_model(dft4, 3, np.random.default_rng(14))
        save_model(m, tmp_path / "m4.lmp")
        back = load_model(tmp_path / "m4.lmp")
        y = complex_normal(np.random.default_rng(15), (52, 16))
        assert np.array_equal(lamp_forward(m, y)[0], lamp_forward(back, y)[0])
