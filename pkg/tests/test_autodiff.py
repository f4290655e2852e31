import numpy as np
import pytest

from meshfield import autodiff as ad


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar f(list-of-arrays), independent of the tape."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(arrays)
            flat[j] = orig - h
            fm = f(arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4):
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(n), 1.0)
        np.testing.assert_allclose(a, n, atol=rtol * scale.max(), rtol=rtol)


def run_tape(build, arrays):
    """Build the graph once, return (loss value, grads w.r.t. leaf arrays)."""
    leaves = [ad.Tensor(a.copy()) for a in arrays]
    with ad.Tape() as tape:
        loss = build(leaves)
    ad.backward(tape, loss)
    grads = [l.grad if l.grad is not None else np.zeros_like(l.values) for l in leaves]
    return float(loss.values), grads


def tape_value(build, arrays):
    leaves = [ad.Tensor(a) for a in arrays]
    with ad.Tape() as tape:
        out = build(leaves)
    return float(out.values)


class TestPositionalEncoding:
    def test_zero_point(self):
        p = ad.Tensor(np.zeros((1, 3)))
        enc = ad.positional_encoding(p, 2).values[0]
        assert enc.shape == (15,)
        np.testing.assert_array_equal(enc[:3], 0.0)
        # per-frequency blocks: [sin(3), cos(3)]
        for i in range(2):
            np.testing.assert_array_equal(enc[3 + 6 * i : 6 + 6 * i], 0.0)
            np.testing.assert_array_equal(enc[6 + 6 * i : 9 + 6 * i], 1.0)

    def test_quarter_period(self):
        p = ad.Tensor(np.array([[0.5, 0.0, 0.0]]))
        enc = ad.positional_encoding(p, 1).values[0]
        assert enc.shape == (9,)
        assert enc[3] == pytest.approx(1.0, abs=1e-15)  # sin(pi/2)
        assert abs(enc[6]) < 1e-15  # cos(pi/2)

    def test_matches_bruteforce_loop(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(-1, 1, size=(5, 3))
        degree = 4
        enc = ad.positional_encoding(ad.Tensor(p), degree).values

        expected = np.zeros((5, 3 + 6 * degree))
        for r in range(5):
            expected[r, :3] = p[r]
            col = 3
            for i in range(degree):
                for fn in (np.sin, np.cos):
                    for c in range(3):
                        expected[r, col] = fn((2.0**i) * np.pi * p[r, c])
                        col += 1
        np.testing.assert_allclose(enc, expected, atol=1e-12)


class TestMlpForward:
    def test_zero_weights_sigmoid(self):
        layers = [
            (ad.Tensor(np.zeros((4, 3))), ad.Tensor(np.zeros(3)), "sigmoid"),
        ]
        y = ad.mlp_forward(layers, ad.Tensor(np.ones((2, 4))))
        np.testing.assert_array_equal(y.values, 0.5)

    def test_identity_layer(self):
        layers = [(ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)), "none")]
        x = np.random.default_rng(0).normal(size=(4, 3))
        y = ad.mlp_forward(layers, ad.Tensor(x))
        np.testing.assert_array_equal(y.values, x)

    def test_matches_manual_matmul(self):
        rng = np.random.default_rng(3)
        w1, b1 = rng.normal(size=(5, 7)), rng.normal(size=7)
        w2, b2 = rng.normal(size=(7, 2)), rng.normal(size=2)
        x = rng.normal(size=(6, 5))
        layers = [
            (ad.Tensor(w1), ad.Tensor(b1), "relu"),
            (ad.Tensor(w2), ad.Tensor(b2), "sigmoid"),
        ]
        y = ad.mlp_forward(layers, ad.Tensor(x)).values

        h = np.maximum(x @ w1 + b1, 0.0)
        expected = 1.0 / (1.0 + np.exp(-(h @ w2 + b2)))
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_dimension_mismatch_raises(self):
        layers = [(ad.Tensor(np.zeros((4, 3))), ad.Tensor(np.zeros(3)), "none")]
        with pytest.raises(ValueError, match="expects 4 inputs"):
            ad.mlp_forward(layers, ad.Tensor(np.ones((2, 5))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        with ad.Tape() as tape:
            loss = ad.tensor_sum(x)
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_stop_gradient_contract(self):
        rng = np.random.default_rng(2)
        xv, yv = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        x, y = ad.Tensor(xv), ad.Tensor(yv)
        with ad.Tape() as tape:
            prod = ad.mul(ad.stop_gradient(x), y)
            loss = ad.tensor_sum(prod)
        ad.backward(tape, loss)
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, xv)
        np.testing.assert_array_equal(prod.values, xv * yv)

    def test_mlp_mse_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        arrays = [
            rng.normal(size=(3, 4)) * 0.5,
            rng.normal(size=4) * 0.1,
            rng.normal(size=(4, 2)) * 0.5,
            rng.normal(size=2) * 0.1,
        ]
        x = rng.normal(size=(5, 3))
        target = rng.uniform(size=(5, 2))

        def build(leaves):
            w1, b1, w2, b2 = leaves
            layers = [(w1, b1, "relu"), (w2, b2, "sigmoid")]
            y = ad.mlp_forward(layers, ad.Tensor(x))
            d = ad.sub(y, ad.Tensor(target))
            return ad.mul(ad.tensor_sum(ad.mul(d, d)), 1.0 / 5)

        _, grads = run_tape(build, arrays)
        numeric = central_difference(lambda a: tape_value(build, a), arrays)
        assert_grads_close(grads, numeric)

    def test_unrecorded_tensor_has_no_grad(self):
        x = ad.Tensor(np.ones((2, 2)))
        bystander = ad.Tensor(np.ones((2, 2)))
        with ad.Tape() as tape:
            loss = ad.tensor_sum(x)
        ad.backward(tape, loss)
        assert bystander.grad is None


OPS = {
    "add": (lambda ls: ad.tensor_sum(ad.mul(ad.add(ls[0], ls[1]), ls[1])), 2),
    "sub": (lambda ls: ad.tensor_sum(ad.mul(ad.sub(ls[0], ls[1]), ls[0])), 2),
    "mul": (lambda ls: ad.tensor_sum(ad.mul(ls[0], ls[1])), 2),
    "matmul": (lambda ls: ad.tensor_sum(ad.matmul(ls[0], ls[1])), 2),
    "sigmoid": (lambda ls: ad.tensor_sum(ad.sigmoid(ls[0])), 1),
    "exp": (lambda ls: ad.tensor_sum(ad.exp(ls[0])), 1),
    "sin": (lambda ls: ad.tensor_sum(ad.mul(ad.sin(ls[0]), ls[0])), 1),
    "cos": (lambda ls: ad.tensor_sum(ad.mul(ad.cos(ls[0]), ls[0])), 1),
    "cumsum": (lambda ls: ad.tensor_sum(ad.mul(ad.cumsum(ls[0], 1), ls[0])), 1),
    "cumsum_excl": (
        lambda ls: ad.tensor_sum(ad.mul(ad.cumsum(ls[0], 1, exclusive=True), ls[0])),
        1,
    ),
    "concat": (lambda ls: ad.tensor_sum(ad.mul(ad.concat(ls, 1), 2.0)), 2),
    "slice": (lambda ls: ad.tensor_sum(ad.mul(ls[0][:, 1:3], ls[0][:, 0:2])), 1),
    "reshape": (lambda ls: ad.tensor_sum(ad.mul(ad.reshape(ls[0], (2, 8)), 3.0)), 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, n_args = OPS[name]
    for seed in range(10):
        rng = np.random.default_rng(seed * 131 + 7)
        arrays = [rng.normal(size=(4, 4)) * 0.8 + 0.1 for _ in range(n_args)]
        _, grads = run_tape(build, arrays)
        numeric = central_difference(lambda a: tape_value(build, a), arrays)
        assert_grads_close(grads, numeric)


class TestExclusiveCumprod:
    def test_forward_values(self):
        x = ad.Tensor(np.array([[0.5, 0.25, 0.5]]))
        t = ad.exclusive_cumprod(x).values
        np.testing.assert_allclose(t, [[1.0, 0.5, 0.125, 0.0625]])

    def test_forward_with_zeros(self):
        x = ad.Tensor(np.array([[0.5, 0.0, 0.5]]))
        t = ad.exclusive_cumprod(x).values
        np.testing.assert_allclose(t, [[1.0, 0.5, 0.0, 0.0]])

    def test_gradient_no_zeros(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            arrays = [rng.uniform(0.1, 0.9, size=(3, 5))]

            def build(ls):
                t = ad.exclusive_cumprod(ls[0])
                return ad.tensor_sum(ad.mul(t, t))

            _, grads = run_tape(build, arrays)
            numeric = central_difference(lambda a: tape_value(build, a), arrays)
            assert_grads_close(grads, numeric)

    def test_gradient_with_exact_zeros(self):
        # analytic check: x = [a, 0, b]; T = [1, a, 0, 0]
        # loss = sum(c * T) => dL/da = c1, dL/d0 = 0 + c3*(a*b)'... derive directly:
        # T2 = a*x1 -> d/dx1 = a; T3 = a*x1*b -> d/dx1 = a*b
        a, b = 0.7, 0.3
        c = np.array([[2.0, 3.0, 5.0, 7.0]])
        x = ad.Tensor(np.array([[a, 0.0, b]]))
        with ad.Tape() as tape:
            t = ad.exclusive_cumprod(x)
            loss = ad.tensor_sum(ad.mul(t, ad.Tensor(c)))
        ad.backward(tape, loss)
        # dL/dx0 = c2*1 (T1=x0) + c3*x1*... with x1=0: c2*1 + c3*0 + c4*0
        expected = np.array([[3.0, 5.0 * a + 7.0 * a * b, 0.0]])
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_gradient_binary_values(self):
        # all-binary input, like binarized opacities
        x = ad.Tensor(np.array([[1.0, 0.0, 1.0, 0.0]]))
        c = np.arange(1.0, 6.0)[None, :]
        with ad.Tape() as tape:
            t = ad.exclusive_cumprod(x)
            loss = ad.tensor_sum(ad.mul(t, ad.Tensor(c)))
        ad.backward(tape, loss)
        # T = [1, 1, 0, 0, 0]; dT2/dx0 = 1, dT3/dx0 = x1*x2... = 0 etc.
        # dT[j]/dx[l] = prod_{m<j, m != l} x[m]
        xv = np.array([1.0, 0.0, 1.0, 0.0])
        expected = np.zeros(4)
        for l in range(4):
            for j in range(l + 1, 5):
                others = [xv[m] for m in range(j) if m != l]
                expected[l] += c[0, j] * np.prod(others)
        np.testing.assert_allclose(x.grad[0], expected, atol=1e-12)


class TestStraightThrough:
    def test_forward_threshold(self):
        x = ad.Tensor(np.array([[0.7, 0.5, 0.2, 0.500001]]))
        y = ad.hard_threshold_ste(x)
        np.testing.assert_array_equal(y.values, [[1.0, 0.0, 0.0, 1.0]])

    def test_backward_identity_bit_exact(self):
        rng = np.random.default_rng(5)
        xv = rng.uniform(size=(3, 4))
        upstream = rng.normal(size=(3, 4))
        x = ad.Tensor(xv)
        with ad.Tape() as tape:
            y = ad.hard_threshold_ste(x)
            loss = ad.tensor_sum(ad.mul(y, ad.Tensor(upstream)))
        ad.backward(tape, loss)
        assert np.array_equal(x.grad, upstream)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        p = ad.Tensor(np.array([1.0, -2.0]), name="p")
        p.grad = np.zeros(2)
        state = ad.AdamState(lr=0.1)
        for _ in range(3):
            ad.adam_step([p], state)
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_matches_closed_form_trajectory(self):
        # scalar, g = 1 constant: m_hat = 1, v_hat = 1 at every step,
        # so each update is exactly -lr / (1 + eps)
        lr, eps = 0.01, 1e-8
        p = ad.Tensor(np.array([0.5]), name="p")
        state = ad.AdamState(lr=lr, eps=eps)
        expected = 0.5
        for _ in range(3):
            p.grad = np.array([1.0])
            ad.adam_step([p], state)
            expected -= lr * 1.0 / (1.0 + eps)
            assert p.values[0] == pytest.approx(expected, abs=1e-15)

    def test_lr_zero_is_identity(self):
        p = ad.Tensor(np.array([3.0]), name="p")
        p.grad = np.array([2.5])
        ad.adam_step([p], ad.AdamState(lr=0.0))
        assert p.values[0] == 3.0

    def test_nonfinite_gradient_raises_with_name(self):
        p = ad.Tensor(np.array([1.0]), name="field.layer0.w")
        p.grad = np.array([np.nan])
        with pytest.raises(ad.TrainingError, match="field.layer0.w"):
            ad.adam_step([p], ad.AdamState())


class TestDeterminism:
    def test_identical_seeds_bit_identical_grads(self):
        def run():
            rng = np.random.default_rng(42)
            w = ad.Tensor(rng.normal(size=(6, 6)))
            x = ad.Tensor(rng.normal(size=(8, 6)))
            with ad.Tape() as tape:
                y = ad.sigmoid(ad.matmul(x, w))
                loss = ad.tensor_sum(ad.mul(y, y))
            ad.backward(tape, loss)
            return loss.values.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)
