# tests/test_nn.py
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atvc_lab import nn
from atvc_lab.errors import ContractError


def _net_loss(store, x):
    h = nn.tanh(nn.dense(x, store["l0/W"], store["l0/b"]))
    h = nn.tanh(nn.dense(h, store["l1/W"], store["l1/b"]))
    out = nn.dense(h, store["l2/W"], store["l2/b"])
    return nn.reduce_mean(nn.square(out))


def _random_net(seed=0):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    sizes = [(4, 6), (6, 5), (5, 3)]
    for i, (n_in, n_out) in enumerate(sizes):
        store.add(f"l{i}/W", rng.normal(0.0, 0.7, size=(n_in, n_out)))
        store.add(f"l{i}/b", rng.normal(0.0, 0.3, size=n_out))
    return store, rng.normal(size=(7, 4))


class TestForwardOps(unittest.TestCase):

    def test_tanh_zero(self):
        self.assertEqual(nn.tanh(0.0).item(), 0.0)

    def test_softmax_constant_input_is_uniform(self):
        out = nn.softmax(np.array([2.5, 2.5, 2.5])).data
        np.testing.assert_allclose(out, np.full(3, 1.0 / 3.0), atol=1e-12)

    def test_softmax_mask_zeroes_masked_entries(self):
        out = nn.softmax(np.array([1.0, 5.0, 2.0]), mask=np.array([True, False, True])).data
        self.assertEqual(out[1], 0.0)
        self.assertAlmostEqual(out.sum(), 1.0, places=12)

    def test_dense_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = nn.dense(x, np.eye(3), np.zeros(3)).data
        np.testing.assert_array_equal(out, x)

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(ContractError) as ctx:
            nn.add(np.zeros((2, 3)), np.zeros((4, 5)))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(4, 5)", str(ctx.exception))
        with self.assertRaises(ContractError):
            nn.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_no_grad_records_nothing(self):
        w = nn.Tensor(np.ones(3), requires_grad=True)
        with nn.no_grad():
            out = nn.reduce_sum(w * 2.0)
        self.assertFalse(out.requires_grad)
        self.assertTrue(nn.is_recording())

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
    def test_softmax_is_a_distribution(self, x):
        out = nn.softmax(x).data
        self.assertTrue(np.all(out > 0))
        self.assertAlmostEqual(float(out.sum()), 1.0, delta=1e-9)


class TestBackward(unittest.TestCase):

    def test_sum_of_squares_gradient(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, -2.0, 0.5]))
        nn.backward(nn.reduce_sum(nn.square(w)))
        np.testing.assert_allclose(w.grad, 2.0 * w.data)

    def test_unused_parameter_gets_zero_gradient(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, 2.0]))
        store.add("unused", np.array([3.0]))
        nn.backward(nn.reduce_sum(w * 3.0))
        np.testing.assert_array_equal(store.gradients()["unused"], np.zeros(1))

    def test_non_scalar_loss_rejected(self):
        w = nn.Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(ContractError):
            nn.backward(w * 2.0)

    def test_repeated_take_accumulates(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, 2.0, 3.0]))
        nn.backward(nn.reduce_sum(nn.take(w, np.array([0, 0, 2]))))
        np.testing.assert_array_equal(w.grad, [2.0, 0.0, 1.0])

    def test_three_layer_net_matches_finite_differences(self):
        store, x = _random_net()
        nn.backward(_net_loss(store, x))
        analytic = {name: g.copy() for name, g in store.gradients().items()}
        h = 1e-5
        with nn.no_grad():
            for name, tensor in store.items():
                flat = tensor.data.reshape(-1)
                for i in range(flat.size):
                    original = flat[i]
                    flat[i] = original + h
                    up = _net_loss(store, x).item()
                    flat[i] = original - h
                    down = _net_loss(store, x).item()
                    flat[i] = original
                    numeric = (up - down) / (2 * h)
                    a = analytic[name].reshape(-1)[i]
                    scale = max(abs(a), abs(numeric), 1e-4)
                    self.assertLess(abs(a - numeric) / scale, 1e-4, msg=f"{name}[{i}]")

    def test_softmax_and_log_softmax_gradients(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 4))
        target = rng.normal(size=(2, 4))

        def loss_of(values):
            x = nn.Tensor(values, requires_grad=True)
            loss = nn.reduce_sum(nn.softmax(x) * target) + nn.reduce_sum(nn.log_softmax(x) * target)
            return x, loss

        x, loss = loss_of(x0)
        nn.backward(loss)
        h = 1e-6
        for idx in np.ndindex(x0.shape):
            up, down = x0.copy(), x0.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (loss_of(up)[1].item() - loss_of(down)[1].item()) / (2 * h)
            self.assertAlmostEqual(x.grad[idx], numeric, delta=1e-6)


class TestReparamSample(unittest.TestCase):

    def test_tiny_sigma_returns_mean(self):
        mu = np.array([0.3, -1.2])
        z, _ = nn.reparam_sample(mu, np.full(2, 1e-12), np.random.default_rng(0))
        np.testing.assert_allclose(z.data, mu, atol=1e-10)

    def test_non_positive_sigma_rejected(self):
        with self.assertRaises(ContractError):
            nn.reparam_sample(np.zeros(2), np.array([1.0, 0.0]), np.random.default_rng(0))

    def test_sample_mean(self):
        n = 100_000
        mu, sigma = 1.5, 0.7
        z, _ = nn.reparam_sample(np.full(n, mu), np.full(n, sigma), np.random.default_rng(1))
        self.assertLess(abs(z.data.mean() - mu), 3 * sigma / np.sqrt(n))

    def test_replayed_noise_is_reproducible(self):
        rng = np.random.default_rng(5)
        z1, eps = nn.reparam_sample(np.zeros(4), np.ones(4), rng)
        z2, _ = nn.reparam_sample(np.zeros(4), np.ones(4), noise=eps)
        np.testing.assert_array_equal(z1.data, z2.data)

    def test_gradient_with_common_random_numbers(self):
        eps = np.random.default_rng(2).standard_normal((1000, 2))
        mu0 = np.array([0.4, -0.3])
        sigma = np.array([0.5, 1.2])

        def estimate(mu):
            z, _ = nn.reparam_sample(nn.Tensor(np.broadcast_to(mu, eps.shape)), sigma, noise=eps)
            return nn.reduce_mean(nn.square(z) * 0.5 + z)

        store = nn.ParamStore()
        mu = store.add("mu", mu0)
        z, _ = nn.reparam_sample(mu, sigma, noise=eps)
        nn.backward(nn.reduce_mean(nn.square(z) * 0.5 + z))
        h = 1e-5
        for i in range(2):
            up, down = mu0.copy(), mu0.copy()
            up[i] += h
            down[i] -= h
            numeric = (estimate(up).item() - estimate(down).item()) / (2 * h)
            self.assertLess(abs(mu.grad[i] - numeric) / abs(numeric), 1e-3)


class TestAdam(unittest.TestCase):

    def test_zero_learning_rate_leaves_parameters(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, 2.0]))
        nn.backward(nn.reduce_sum(nn.square(w)))
        nn.adam_step(store, lr=0.0)
        np.testing.assert_array_equal(w.data, [1.0, 2.0])
        self.assertIsNone(w.grad)

    def test_zero_gradient_leaves_parameters(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, 2.0]))
        w.grad = np.zeros(2)
        nn.adam_step(store, lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, 2.0])

    def test_quadratic_converges(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([5.0]))
        for _ in range(10_000):
            nn.backward(nn.reduce_sum(nn.square(w - 3.0)))
            nn.adam_step(store, lr=1e-2)
        self.assertAlmostEqual(w.data[0], 3.0, delta=0.05)

    def test_state_arrays_round_trip(self):
        store = nn.ParamStore()
        w = store.add("w", np.array([1.0, -1.0]))
        nn.backward(nn.reduce_sum(nn.square(w)))
        nn.adam_step(store, lr=0.1)
        restored = nn.ParamStore.from_state_arrays(store.state_arrays())
        self.assertEqual(restored.step_count, 1)
        np.testing.assert_array_equal(restored["w"].data, w.data)
        np.testing.assert_array_equal(restored._first_moment["w"], store._first_moment["w"])

    def test_duplicate_names_rejected(self):
        store = nn.ParamStore()
        store.add("w", np.zeros(1))
        with self.assertRaises(ContractError):
            store.add("w", np.zeros(1))


if __name__ == '__main__':
    unittest.main()
