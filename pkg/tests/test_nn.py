import numpy as np
import pytest

from nqnet import nn
from nqnet.nn import DenseNet

from gradcheck import fd_net_grad, max_rel_error


class TestInit:
    def test_smallest_net(self):
        net = nn.init_net([1, 1], seed=3)
        assert net.weights[0].shape == (1, 1)
        np.testing.assert_array_equal(net.biases[0], [0.0])

    def test_deterministic(self):
        a = nn.init_net([3, 7, 2], seed=11)
        b = nn.init_net([3, 7, 2], seed=11)
        for x, y in zip(a.weights, b.weights):
            np.testing.assert_array_equal(x, y)

    def test_seed_changes_weights(self):
        a = nn.init_net([3, 7, 2], seed=11)
        b = nn.init_net([3, 7, 2], seed=12)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_parameter_count(self):
        net = nn.init_net([8, 256, 256, 256, 20], seed=0)
        assert net.n_params == 8 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 20 + 20 == 139_028

    def test_glorot_bound(self):
        net = nn.init_net([4, 50, 3], seed=0)
        for W in net.weights:
            fan_out, fan_in = W.shape
            assert np.abs(W).max() <= np.sqrt(6 / (fan_in + fan_out))

    @pytest.mark.parametrize("dims", [[], [3], [3, 0, 1], [-1, 2]])
    def test_rejects_bad_dims(self, dims):
        with pytest.raises(ValueError):
            nn.init_net(dims, seed=0)


class TestForward:
    def test_identity_affine(self):
        net = DenseNet([1, 1], [np.eye(1)], [np.zeros(1)])
        out, _ = nn.forward(net, [[-1.0], [2.0]])
        np.testing.assert_array_equal(out, [[-1.0], [2.0]])

    def test_hand_evaluated_relu(self):
        net = DenseNet([1, 1, 1], [np.array([[1.0]]), np.array([[1.0]])], [np.array([-1.0]), np.zeros(1)])
        out, _ = nn.forward(net, [[0.5]])
        assert out[0, 0] == 0.0

    def test_batch_equals_rows(self):
        net = nn.init_net([3, 9, 9, 2], seed=5)
        X = np.random.default_rng(0).normal(size=(6, 3))
        batch, _ = nn.forward(net, X)
        rows = np.vstack([nn.forward(net, X[i:i + 1])[0] for i in range(6)])
        np.testing.assert_allclose(batch, rows, rtol=0, atol=1e-14)

    def test_dimension_mismatch(self):
        net = nn.init_net([3, 4, 1], seed=0)
        with pytest.raises(ValueError):
            nn.forward(net, np.zeros((2, 2)))


class TestBackward:
    def test_zero_upstream(self):
        net = nn.init_net([2, 5, 3], seed=1)
        X = np.ones((4, 2))
        _, cache = nn.forward(net, X)
        g = nn.backward(net, cache, np.zeros((4, 3)))
        assert not np.any(g.flat())

    def test_linear_least_squares_closed_form(self):
        rng = np.random.default_rng(2)
        X, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        net = nn.init_net([3, 2], seed=4)
        out, cache = nn.forward(net, X)
        g = nn.backward(net, cache, out - Y)  # loss 0.5 * ||XW^T + b - Y||^2
        R = X @ net.weights[0].T + net.biases[0] - Y
        np.testing.assert_allclose(g.weights[0], R.T @ X, atol=1e-12)
        np.testing.assert_allclose(g.biases[0], R.sum(axis=0), atol=1e-12)

    def test_finite_differences_random_nets(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            depth = int(rng.integers(1, 4))
            dims = [int(rng.integers(1, 6))] + [int(rng.integers(1, 17)) for _ in range(depth - 1)] \
                + [int(rng.integers(1, 5))]
            net = nn.init_net(dims, seed=trial)
            X = rng.normal(size=(5, dims[0]))
            C = rng.normal(size=(5, dims[-1]))

            def loss(n):  # sum(C * out) + 0.5 * sum(out^2)
                o = nn.forward(n, X)[0]
                return np.sum(C * o) + 0.5 * np.sum(o * o)

            out, cache = nn.forward(net, X)
            g = nn.backward(net, cache, C + out).flat()
            fd, ok = fd_net_grad(loss, net, X)
            assert ok.mean() > 0.5
            assert max_rel_error(g, fd, ok) < 1e-4, dims

    def test_shape_mismatch(self):
        net = nn.init_net([2, 3], seed=0)
        _, cache = nn.forward(net, np.ones((4, 2)))
        with pytest.raises(ValueError):
            nn.backward(net, cache, np.zeros((3, 3)))

    def test_non_finite_upstream(self):
        net = nn.init_net([2, 3], seed=0)
        _, cache = nn.forward(net, np.ones((1, 2)))
        with pytest.raises(FloatingPointError):
            nn.backward(net, cache, np.array([[np.nan, 0, 0]]))


class TestAdam:
    def test_zero_grads_leave_params(self):
        net = nn.init_net([2, 4, 1], seed=0)
        st = nn.adam_init(net)
        zero = nn.Grads([np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases])
        new, st2 = nn.adam_step(net, zero, st)
        np.testing.assert_array_equal(nn.flatten_params(new), nn.flatten_params(net))
        assert st2.step == 1

    def test_first_step_magnitude(self):
        net = nn.init_net([3, 5, 2], seed=0)
        st = nn.adam_init(net, lr=1e-3)
        rng = np.random.default_rng(1)
        g = nn.Grads([rng.normal(size=W.shape) for W in net.weights],
                     [rng.normal(size=b.shape) for b in net.biases])
        new, _ = nn.adam_step(net, g, st)
        delta = nn.flatten_params(new) - nn.flatten_params(net)
        # from m = v = 0 the bias-corrected step is -lr * g / (|g| + eps)
        assert np.all(np.abs(delta) <= 1e-3 * (1 + 1e-9))
        assert np.all(np.sign(delta) == -np.sign(g.flat()))

    def test_pure(self):
        net = nn.init_net([3, 5, 2], seed=0)
        st = nn.adam_init(net)
        g = nn.Grads([np.ones_like(W) for W in net.weights], [np.ones_like(b) for b in net.biases])
        a1, s1 = nn.adam_step(net, g, st)
        a2, s2 = nn.adam_step(net, g, st)
        np.testing.assert_array_equal(nn.flatten_params(a1), nn.flatten_params(a2))
        assert st.step == 0 and s1.step == s2.step == 1

    def test_optimizer_defaults(self):
        st = nn.adam_init(nn.init_net([1, 1], seed=0))
        assert (st.lr, st.beta1, st.beta2) == (1e-3, 0.9, 0.99)

    def test_rejects_non_finite(self):
        net = nn.init_net([1, 1], seed=0)
        g = nn.Grads([np.array([[np.inf]])], [np.zeros(1)])
        with pytest.raises(FloatingPointError):
            nn.adam_step(net, g, nn.adam_init(net))

    def test_rejects_bad_hyperparameters(self):
        net = nn.init_net([1, 1], seed=0)
        with pytest.raises(ValueError):
            nn.adam_init(net, beta2=1.0)
        with pytest.raises(ValueError):
            nn.adam_init(net, lr=0.0)


class TestParallelNet:
    def net(self, seed=0):
        return nn.init_parallel(3, (6, 5), (1, 4), seed)

    def test_output_is_concatenation_of_parts(self):
        net = self.net()
        X = np.random.default_rng(1).normal(size=(7, 3))
        out, _ = nn.forward(net, X)
        parts = [nn.forward(p, X)[0] for p in net.parts]
        np.testing.assert_array_equal(out, np.hstack(parts))
        assert out.shape == (7, 5)

    def test_shape_bookkeeping(self):
        net = self.net()
        assert net.layer_dims == [3, 12, 10, 5]
        assert net.n_params == sum(p.n_params for p in net.parts)
        assert nn.flatten_params(net).size == net.n_params

    def test_parts_are_independently_seeded(self):
        a, b = self.net(4), self.net(4)
        np.testing.assert_array_equal(nn.flatten_params(a), nn.flatten_params(b))
        p0, p1 = a.parts
        assert not np.array_equal(p0.weights[0], p1.weights[0][:1])

    def test_unflatten_round_trip(self):
        net = self.net()
        theta = np.arange(net.n_params, dtype=float)
        back = nn.unflatten_params(net, theta)
        assert isinstance(back, nn.ParallelNet)
        np.testing.assert_array_equal(nn.flatten_params(back), theta)

    def test_finite_differences(self):
        net = self.net(2)
        rng = np.random.default_rng(3)
        X, C = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))

        def loss(n):
            o = nn.forward(n, X)[0]
            return np.sum(C * o) + 0.5 * np.sum(o * o)

        out, cache = nn.forward(net, X)
        g = np.concatenate([gi.flat() for gi in nn.backward(net, cache, C + out)])
        fd, ok = fd_net_grad(loss, net, X)
        assert ok.mean() > 0.9
        assert max_rel_error(g, fd, ok) < 1e-6

    def test_gradient_does_not_leak_between_parts(self):
        net = self.net()
        X = np.ones((4, 3))
        _, cache = nn.forward(net, X)
        G = np.zeros((4, 5))
        G[:, 0] = 1.0  # only the first part's output
        g_mean, g_gaps = nn.backward(net, cache, G)
        assert not np.any(g_gaps.flat())

    def test_adam_matches_per_part_updates(self):
        net = self.net()
        X = np.random.default_rng(5).normal(size=(8, 3))
        out, cache = nn.forward(net, X)
        grads = nn.backward(net, cache, out)
        new, state = nn.adam_step(net, grads, nn.adam_init(net))
        for p, g, q in zip(net.parts, grads, new.parts):
            ref, _ = nn.adam_step(p, g, nn.adam_init(p))
            np.testing.assert_array_equal(nn.flatten_params(ref), nn.flatten_params(q))
        assert all(s.step == 1 for s in state)

    def test_rejects_mismatched_inputs(self):
        with pytest.raises(ValueError):
            nn.ParallelNet((nn.init_net([2, 1], 0), nn.init_net([3, 1], 0)))
        with pytest.raises(ValueError):
            nn.ParallelNet(())

    def test_bad_upstream_shape(self):
        net = self.net()
        _, cache = nn.forward(net, np.zeros((2, 3)))
        with pytest.raises(ValueError):
            nn.backward(net, cache, np.zeros((2, 4)))
