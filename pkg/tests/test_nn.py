"""Autodiff, parameter store, and optimizer tests with finite-difference oracles."""

import numpy as np
import pytest
from scipy.special import erf

from funkflow import nn
from funkflow.errors import NonFiniteLossError, ValidationError


def fd_gradient(f, x, h_scale=1e-6):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        h = h_scale * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b):
    denom = np.maximum.reduce([np.abs(a), np.abs(b), np.ones_like(a)])
    return float(np.max(np.abs(a - b) / denom))


class TestPrimitives:
    def test_broadcast_add_mul_backward(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)

        def f_np(a_):
            return float(((a_ + b) * b**2).sum())

        va = nn.Var(a)
        out = nn.vsum(nn.mul(nn.add(va, b), b**2))
        nn.backward(out)
        assert max_rel_err(va.grad, fd_gradient(f_np, a)) < 1e-8

    def test_matmul_batched_backward(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))

        va, vb = nn.Var(a), nn.Var(b)
        out = nn.vsum(nn.mul(nn.matmul(va, vb), rng.standard_normal((2, 3, 5))))
        weights = out  # scalar
        nn.backward(weights)
        # gradients must exist and b's must be summed over the batch dim
        assert va.grad.shape == a.shape
        assert vb.grad.shape == b.shape

    def test_div_exp_backward_fd(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(6) * 0.5 + 1.5

        def f_np(x_):
            return float((np.exp(x_) / (x_ + 2.0)).sum())

        vx = nn.Var(x)
        out = nn.vsum(nn.div(nn.vexp(vx), nn.add(vx, 2.0)))
        nn.backward(out)
        assert max_rel_err(vx.grad, fd_gradient(f_np, x)) < 1e-7

    def test_gelu_matches_erf_form(self):
        x = np.linspace(-4, 4, 41)
        out = nn.gelu(nn.Var(x))
        want = 0.5 * x * (1 + erf(x / np.sqrt(2)))
        np.testing.assert_allclose(out.data, want, rtol=1e-12, atol=1e-18)

    def test_gelu_backward_fd(self):
        x = np.linspace(-3, 3, 13)

        def f_np(x_):
            return float((0.5 * x_ * (1 + erf(x_ / np.sqrt(2)))).sum())

        vx = nn.Var(x)
        out = nn.vsum(nn.gelu(vx))
        nn.backward(out)
        assert max_rel_err(vx.grad, fd_gradient(f_np, x)) < 1e-8

    def test_transpose_reshape_roundtrip_backward(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4))
        vx = nn.Var(x)
        y = nn.transpose(vx, (1, 0, 2))
        z = nn.reshape(y, (3, 8))
        out = nn.vsum(nn.mul(z, 2.0))
        nn.backward(out)
        np.testing.assert_allclose(vx.grad, np.full_like(x, 2.0))

    def test_no_grad_skips_tape(self):
        with nn.no_grad():
            out = nn.mul(nn.Var(np.ones(3)), 2.0)
        assert out.parents == ()


class TestLayerNorm:
    def test_constant_input_zeros_pre_affine(self):
        x = np.full((2, 5), 3.7)
        out = nn.layer_norm(nn.Var(x), np.ones(5), np.zeros(5))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_normalization_contract(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((10, 32)) * 3 + 1
        out = nn.layer_norm(nn.Var(x), np.ones(32), np.zeros(32)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gradient_matches_fd_on_4_vector(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(4)
        gain = rng.standard_normal(4)
        shift = rng.standard_normal(4)
        w = rng.standard_normal(4)

        def run(x_, g_, s_):
            mu = x_.mean()
            var = ((x_ - mu) ** 2).mean()
            xhat = (x_ - mu) / np.sqrt(var + nn.LN_EPS)
            return float(((xhat * g_ + s_) * w).sum())

        vx, vg, vs = nn.Var(x), nn.Var(gain), nn.Var(shift)
        out = nn.vsum(nn.mul(nn.layer_norm(vx, vg, vs), w))
        nn.backward(out)
        assert max_rel_err(vx.grad, fd_gradient(lambda a: run(a, gain, shift), x)) < 1e-6
        assert max_rel_err(vg.grad, fd_gradient(lambda a: run(x, a, shift), gain)) < 1e-6
        assert max_rel_err(vs.grad, fd_gradient(lambda a: run(x, gain, a), shift)) < 1e-6

    def test_rejects_singleton_axis(self):
        with pytest.raises(ValidationError):
            nn.layer_norm(nn.Var(np.ones((3, 1))), np.ones(1), np.zeros(1))


class TestMLP:
    def test_identity_single_layer(self):
        store = nn.ParamStore()
        store.add("f.l0.w", np.eye(4))
        store.add("f.l0.b", np.zeros(4))
        x = np.random.default_rng(6).standard_normal((2, 4))
        leaves = {k: nn.Var(v) for k, v in store.items()}
        out = nn.mlp_forward(leaves, "f", nn.Var(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights_broadcast_bias(self):
        leaves = {
            "f.l0.w": nn.Var(np.zeros((4, 3))),
            "f.l0.b": nn.Var(np.array([1.0, -2.0, 0.5])),
        }
        out = nn.mlp_forward(leaves, "f", nn.Var(np.ones((5, 4))), 1)
        np.testing.assert_allclose(out.data, np.tile([1.0, -2.0, 0.5], (5, 1)))

    def test_two_layer_matches_hand_computation(self):
        rng = np.random.default_rng(7)
        w0, b0 = rng.standard_normal((4, 6)), rng.standard_normal(6)
        w1, b1 = rng.standard_normal((6, 2)), rng.standard_normal(2)
        x = rng.standard_normal((3, 4))
        leaves = {"f.l0.w": nn.Var(w0), "f.l0.b": nn.Var(b0),
                  "f.l1.w": nn.Var(w1), "f.l1.b": nn.Var(b1)}
        out = nn.mlp_forward(leaves, "f", nn.Var(x), 2)
        h = x @ w0 + b0
        h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
        want = h @ w1 + b1
        np.testing.assert_allclose(out.data, want, atol=1e-12)


class TestFourierEmbed:
    def test_t_zero(self):
        emb = nn.fourier_time_embed(0.0, 8, 256.0)
        np.testing.assert_array_equal(emb[:4], 0.0)
        np.testing.assert_array_equal(emb[4:], 1.0)

    def test_frequency_endpoints(self):
        d, f_max = 16, 256.0
        emb_sin = nn.fourier_time_embed(1.0, d, f_max)[:d // 2]
        assert emb_sin[0] == pytest.approx(np.sin(1.0), rel=1e-15)
        assert emb_sin[-1] == pytest.approx(np.sin(1.0 / f_max), rel=1e-12)

    def test_d4_direct_evaluation(self):
        emb = nn.fourier_time_embed(1.0, 4, 256.0)
        want = [np.sin(1.0), np.sin(1.0 / 256), np.cos(1.0), np.cos(1.0 / 256)]
        np.testing.assert_allclose(emb, want, rtol=1e-14)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValidationError):
            nn.fourier_time_embed(0.5, 5, 256.0)

    def test_batched_shape(self):
        emb = nn.fourier_time_embed(np.array([0.1, 0.2, 0.9]), 8, 256.0)
        assert emb.shape == (3, 8)


class TestLossAndGrad:
    def test_zero_head_bias_gradient(self):
        # loss = mean((b - target)^2) at b=0 has d/db = -2 mean(target)
        target = np.array([0.3, -1.2, 2.0, 0.7])
        store = nn.ParamStore()
        store.add("b", np.zeros(1))

        def loss_fn(p):
            resid = nn.sub(p["b"], target)
            return nn.vmean(nn.mul(resid, resid))

        _, grads = nn.loss_and_grad(store, loss_fn)
        assert grads["b"][0] == pytest.approx(-2 * target.mean(), rel=1e-12)

    def test_stationary_point_zero_gradient(self):
        target = np.array([1.0, 2.0])
        store = nn.ParamStore()
        store.add("p", target.copy())

        def loss_fn(p):
            resid = nn.sub(p["p"], target)
            return nn.vmean(nn.mul(resid, resid))

        _, grads = nn.loss_and_grad(store, loss_fn)
        assert np.abs(grads["p"]).max() < 1e-10

    def test_small_mlp_fd_check(self):
        rng = np.random.default_rng(8)
        store = nn.ParamStore()
        nn.init_mlp(store, "net", [3, 5, 1], rng)
        x = rng.standard_normal((7, 3))
        y = rng.standard_normal((7, 1))

        def loss_fn(p):
            pred = nn.mlp_forward(p, "net", nn.Var(x), 2)
            resid = nn.sub(pred, y)
            return nn.vmean(nn.mul(resid, resid))

        _, grads = nn.loss_and_grad(store, loss_fn)

        def numeric(vec):
            trial = store.unflatten(vec)
            leaves = {k: nn.Var(v) for k, v in trial.items()}
            return float(loss_fn(leaves).data)

        flat_grad = np.concatenate([grads[k].ravel() for k in store.names()])
        fd = fd_gradient(numeric, store.flatten())
        assert max_rel_err(flat_grad, fd) < 1e-6

    def test_non_finite_loss_names_op(self):
        store = nn.ParamStore()
        store.add("p", np.array([1.0]))

        def loss_fn(p):
            bad = nn.div(p["p"], 0.0)
            return nn.vsum(bad)

        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteLossError) as exc:
                nn.loss_and_grad(store, loss_fn)
        assert exc.value.op == "div"


class TestParamStore:
    def test_flatten_unflatten_roundtrip_fuzz(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            store = nn.ParamStore()
            for i in range(rng.integers(1, 6)):
                shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
                store.add(f"p{i}", rng.standard_normal(shape))
            flat = store.flatten()
            back = store.unflatten(flat)
            assert back.names() == store.names()
            for k in store.names():
                np.testing.assert_array_equal(back[k], store[k])
            np.testing.assert_array_equal(back.flatten(), flat)

    def test_duplicate_name_rejected(self):
        store = nn.ParamStore()
        store.add("a", np.zeros(2))
        with pytest.raises(ValidationError):
            store.add("a", np.zeros(2))


class TestOptimizer:
    def test_zero_grad_zero_decay_fixed_point(self):
        store = nn.ParamStore()
        store.add("w", np.array([1.0, -2.0]))
        state = nn.adamw_init(store, weight_decay=0.0)
        before = store["w"].copy()
        nn.adamw_step(state, store, {"w": np.zeros(2)}, lr=1e-3)
        np.testing.assert_array_equal(store["w"], before)

    def test_first_step_magnitude_equals_lr(self):
        store = nn.ParamStore()
        store.add("w", np.array([0.0]))
        state = nn.adamw_init(store, weight_decay=0.0)
        lr = 1e-3
        nn.adamw_step(state, store, {"w": np.array([1.0])}, lr=lr)
        # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        assert store["w"][0] == pytest.approx(-lr / (1 + state.eps), rel=1e-12)

    def test_decoupled_decay_shrinks_weights(self):
        store = nn.ParamStore()
        store.add("w", np.array([2.0]))
        state = nn.adamw_init(store, weight_decay=0.1)
        nn.adamw_step(state, store, {"w": np.zeros(1)}, lr=0.01)
        assert store["w"][0] == pytest.approx(2.0 * (1 - 0.01 * 0.1), rel=1e-12)


class TestClipAndSchedule:
    def test_below_threshold_unchanged(self):
        grads = {"a": np.array([0.06]), "b": np.array([0.08])}
        out, norm = nn.clip_global_norm(grads, max_norm=0.5)
        assert norm == pytest.approx(0.1)
        np.testing.assert_array_equal(out["a"], grads["a"])

    def test_clip_rescales_to_max_norm(self):
        rng = np.random.default_rng(10)
        grads = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(5)}
        raw = np.sqrt(sum((g**2).sum() for g in grads.values()))
        grads = {k: g * (5.0 / raw) for k, g in grads.items()}
        out, _ = nn.clip_global_norm(grads, max_norm=0.5)
        new_norm = np.sqrt(sum((g**2).sum() for g in out.values()))
        assert abs(new_norm - 0.5) <= 1e-12

    def test_zero_gradients_stay_zero(self):
        out, norm = nn.clip_global_norm({"a": np.zeros(4)}, max_norm=0.5)
        assert norm == 0.0
        np.testing.assert_array_equal(out["a"], np.zeros(4))

    def test_schedule_ramp(self):
        assert nn.lr_schedule(0, base_lr=1e-5, warmup=5) == pytest.approx(1e-5 / 5)
        assert nn.lr_schedule(4, base_lr=1e-5, warmup=5) == pytest.approx(1e-5)
        for epoch in (5, 17, 299):
            assert nn.lr_schedule(epoch, base_lr=1e-5, warmup=5) == 1e-5

    def test_zero_warmup_constant(self):
        assert nn.lr_schedule(0, base_lr=3e-4, warmup=0) == 3e-4
