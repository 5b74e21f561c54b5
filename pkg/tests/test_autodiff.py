import math

import numpy as np
import pytest

from citecast import autodiff as ad


def finite_diff_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar fn over every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        dn = fn(x)
        flat[i] = orig
        gf[i] = (up - dn) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, rtol=1e-4):
    """Gradient-check an op against the finite-difference oracle.

    build(tensors) -> scalar Tensor; one check per differentiable input.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    for which in range(len(arrays)):
        tensors = [ad.Tensor(a.copy(), requires_grad=(i == which)) for i, a in enumerate(arrays)]
        with ad.Tape() as tape:
            loss = build(tensors)
        ad.backward(tape, loss)
        analytic = tensors[which].grad
        assert analytic is not None

        def scalar_fn(x, which=which):
            ts = [ad.Tensor(x if i == which else a) for i, a in enumerate(arrays)]
            return float(build(ts).data)

        numeric = finite_diff_grad(scalar_fn, arrays[which].copy())
        denom = np.maximum(np.abs(numeric), 1.0)
        rel = np.abs(analytic - numeric) / denom
        assert rel.max() <= rtol, f"input {which}: max rel err {rel.max():.3e}"


class TestForwardValues:
    def test_matmul_identity(self):
        a = ad.Tensor(np.arange(6.0).reshape(2, 3))
        out = ad.matmul(a, ad.Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.AutodiffError, match="shape"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_segment_softmax_symmetric(self):
        out = ad.segment_softmax(ad.Tensor([1.0, 1.0]), [0, 0], 1)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_segment_softmax_hand_value(self):
        out = ad.segment_softmax(ad.Tensor([0.0, math.log(3)]), [0, 0], 1)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_segment_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        scores = rng.standard_normal(50)
        seg = np.sort(rng.integers(0, 7, size=50))
        out = ad.segment_softmax(ad.Tensor(scores), seg, 7).data
        for s in range(7):
            m = seg == s
            if m.any():
                assert abs(out[m].sum() - 1.0) <= 1e-12

    def test_segment_ops_empty_segment(self):
        # segment 1 receives nothing: zero row from segment_sum, no NaN anywhere
        out = ad.segment_sum(ad.Tensor(np.ones((2, 3))), [0, 2], 3)
        np.testing.assert_array_equal(out.data[1], np.zeros(3))
        soft = ad.segment_softmax(ad.Tensor([0.3, -0.1]), [0, 2], 3)
        assert np.all(np.isfinite(soft.data))

    def test_l2_normalize_zero_row_stays_zero(self):
        x = ad.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]))
        out = ad.l2_normalize_rows(x)
        np.testing.assert_allclose(out.data, [[0.0, 0.0], [0.6, 0.8]], atol=1e-15)

    def test_finite_check_trips_on_overflow(self):
        with pytest.raises(ad.AutodiffError, match="non-finite"):
            ad.exp(ad.Tensor([1000.0]))


class TestBackwardBasics:
    def test_square_gradient(self):
        x = ad.Tensor(3.0, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mul(x, x)
        ad.backward(tape, loss)
        assert x.grad == pytest.approx(6.0)

    def test_dead_relu_region(self):
        x = ad.Tensor(np.array([-1.0, -2.0, -0.5]), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mean(ad.relu(x))
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_untouched_parameter_has_no_grad(self):
        x = ad.Tensor(2.0, requires_grad=True)
        unused = ad.Tensor(5.0, requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mul(x, x)
        ad.backward(tape, loss)
        assert unused.grad is None  # caller treats None as zero

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(tape, y)

    def test_grad_accumulates_across_tapes(self):
        x = ad.Tensor(3.0, requires_grad=True)
        for _ in range(2):
            with ad.Tape() as tape:
                loss = ad.mul(x, x)
            ad.backward(tape, loss)
        assert x.grad == pytest.approx(12.0)

    def test_no_tape_means_no_recording(self):
        x = ad.Tensor(3.0, requires_grad=True)
        y = ad.mul(x, x)
        assert float(y.data) == 9.0
        # nothing recorded: a later tape sees no history for y
        with ad.Tape() as tape:
            z = ad.mul(y, 1.0)
        ad.backward(tape, z)
        assert x.grad is None


class TestGradCheckPerPrimitive:
    """Every primitive against the central finite-difference oracle."""

    def test_add_broadcast(self):
        check_op(lambda t: ad.mean(ad.mul(ad.add(t[0], t[1]), t[0])), (3, 4), (4,))

    def test_mul_broadcast(self):
        check_op(lambda t: ad.mean(ad.mul(t[0], t[1])), (3, 4), (3, 1))

    def test_matmul(self):
        check_op(lambda t: ad.mean(ad.matmul(t[0], t[1])), (3, 4), (4, 2))

    def test_concat(self):
        check_op(lambda t: ad.mean(ad.mul(ad.concat([t[0], t[1]], axis=0), 1.5)), (2, 3), (4, 3))

    def test_reshape(self):
        check_op(lambda t: ad.mean(ad.mul(ad.reshape(t[0], (6,)), 2.0)), (2, 3))

    def test_gather_rows_with_duplicates(self):
        idx = [0, 2, 2, 1]
        check_op(lambda t: ad.mean(ad.mul(ad.gather_rows(t[0], idx), t[1])), (3, 2), (4, 2))

    def test_segment_sum(self):
        seg = [0, 0, 1, 2, 2]
        check_op(lambda t: ad.mean(ad.segment_sum(t[0], seg, 3)), (5, 3))

    def test_segment_softmax(self):
        seg = [0, 0, 0, 1, 1]
        check_op(lambda t: ad.mean(ad.mul(ad.segment_softmax(t[0], seg, 2), t[1])), (5,), (5,))

    def test_relu(self):
        # keep entries away from the kink
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3))
        x[np.abs(x) < 0.05] = 0.5

        def build(t):
            return ad.mean(ad.relu(t[0]))

        t0 = ad.Tensor(x.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = build([t0])
        ad.backward(tape, loss)
        numeric = finite_diff_grad(lambda a: float(build([ad.Tensor(a)]).data), x.copy())
        np.testing.assert_allclose(t0.grad, numeric, rtol=1e-4, atol=1e-8)

    def test_leaky_relu(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3))
        x[np.abs(x) < 0.05] = 0.5

        def build(t):
            return ad.mean(ad.leaky_relu(t[0], 0.2))

        t0 = ad.Tensor(x.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = build([t0])
        ad.backward(tape, loss)
        numeric = finite_diff_grad(lambda a: float(build([ad.Tensor(a)]).data), x.copy())
        np.testing.assert_allclose(t0.grad, numeric, rtol=1e-4, atol=1e-8)

    def test_exp(self):
        check_op(lambda t: ad.mean(ad.exp(t[0])), (3, 3))

    def test_log(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.5, 2.0, size=(3, 3))
        t0 = ad.Tensor(x.copy(), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.mean(ad.log(t0))
        ad.backward(tape, loss)
        numeric = finite_diff_grad(lambda a: float(ad.mean(ad.log(ad.Tensor(a))).data), x.copy())
        np.testing.assert_allclose(t0.grad, numeric, rtol=1e-4)

    def test_l2_normalize_rows(self):
        check_op(lambda t: ad.mean(ad.mul(ad.l2_normalize_rows(t[0]), t[1])), (3, 4), (3, 4), seed=9)

    def test_mean_and_total(self):
        check_op(lambda t: ad.mean(t[0]), (4, 2))
        check_op(lambda t: ad.total(ad.mul(t[0], t[0])), (4, 2))

    def test_scalar_ops(self):
        check_op(lambda t: ad.mean((t[0] * 3.0 - 1.0) * (t[0] / 2.0 + 0.5) + (-t[0])), (3, 3))


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        store = ad.ParamStore()
        w = store.create("w", np.array([1.0, -2.0]))
        opt = ad.AdamState(store, lr=0.1)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_first_step_magnitude_is_lr(self):
        # bias correction makes step one equal lr * sign(g) up to eps
        store = ad.ParamStore()
        w = store.create("w", np.zeros(4))
        w.grad = np.array([0.5, -0.5, 2.0, -2.0])
        opt = ad.AdamState(store, lr=1e-3)
        opt.step()
        np.testing.assert_allclose(w.data, [-1e-3, 1e-3, -1e-3, 1e-3], rtol=1e-6)

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(11)
            store = ad.ParamStore()
            w = store.create("w", rng.standard_normal((3, 2)))
            opt = ad.AdamState(store, lr=1e-2)
            x = ad.Tensor(rng.standard_normal((5, 3)))
            for _ in range(20):
                store.zero_grad()
                with ad.Tape() as tape:
                    out = ad.matmul(x, w)
                    loss = ad.mean(ad.mul(out, out))
                ad.backward(tape, loss)
                opt.step()
            return w.data.copy()

        np.testing.assert_array_equal(run(), run())


class TestParamStoreAndCheckpoint:
    def test_duplicate_name_rejected(self):
        store = ad.ParamStore()
        store.create("w", np.zeros(2))
        with pytest.raises(ad.AutodiffError, match="duplicate"):
            store.create("w", np.zeros(2))

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        store = ad.ParamStore()
        store.create("layer.w", rng.standard_normal((4, 3)))
        store.create("layer.b", rng.standard_normal(3))
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(str(path), store, meta={"config_hash": "abc"})
        state, meta = ad.load_checkpoint(str(path))
        assert meta["config_hash"] == "abc"
        for name in store.names():
            np.testing.assert_array_equal(state[name], store[name].data)

    def test_checkpoint_name_validation(self, tmp_path):
        store = ad.ParamStore()
        store.create("a", np.zeros(2))
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(str(path), store, meta={})
        state, _ = ad.load_checkpoint(str(path))
        other = ad.ParamStore()
        other.create("b", np.zeros(2))
        with pytest.raises(ad.AutodiffError, match="mismatch"):
            other.load_state(state)

    def test_checkpoint_shape_validation(self, tmp_path):
        store = ad.ParamStore()
        store.create("a", np.zeros(2))
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(str(path), store, meta={})
        state, _ = ad.load_checkpoint(str(path))
        other = ad.ParamStore()
        other.create("a", np.zeros(3))
        with pytest.raises(ad.AutodiffError, match="shape"):
            other.load_state(state)
