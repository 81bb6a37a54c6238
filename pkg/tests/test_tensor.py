import numpy as np
import pytest

from xnet import tensor as T
from xnet.backends import available_backends, get_backend

from conftest import conv2d_loops, matmul_loops, roi_align_loops, softmax_loops, check_grads


class TestConv2d:
    def test_all_ones_sums_kernel(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.random((1, 1, 6, 7)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, T.Tensor(w), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilated_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal(3)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), dilation=2).data
        want = conv2d_loops(x, w, b, dilation=2)
        np.testing.assert_allclose(got, want, atol=1e-10)

    @pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (2, 1, 1), (1, 2, 2), (2, 3, 3), (3, 2, 0)])
    def test_geometry_sweep_vs_oracle(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 100 + dilation * 10 + padding)
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride, dilation=dilation, padding=padding).data
        want = conv2d_loops(x, w, stride=stride, dilation=dilation, padding=padding)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))))

    def test_empty_output_raises(self):
        with pytest.raises(ValueError, match="output would be"):
            T.conv2d(T.Tensor(np.ones((1, 1, 2, 2))), T.Tensor(np.ones((1, 1, 3, 3))))


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(1).random((4, 4))
        out = T.matmul(T.Tensor(np.eye(4)), T.Tensor(a))
        np.testing.assert_allclose(out.data, a, atol=1e-15)

    def test_hand_values(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((7, 3))
        b = rng.standard_normal((3, 5))
        np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError, match="inner dims"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_large_values_stable(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_random_vs_reference(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 6)) * 5
        np.testing.assert_allclose(T.softmax(T.Tensor(x)).data, softmax_loops(x), atol=1e-12)

    def test_rows_sum_to_one_and_bounded(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            x = rng.standard_normal((5, 9)) * rng.uniform(0.1, 50)
            s = T.softmax(T.Tensor(x)).data
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
            assert s.min() >= 0.0 and s.max() <= 1.0


class TestRoiAlign:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        feat = rng.standard_normal((4, 10, 12))
        boxes = np.array([[1.0, 2.0, 5.0, 4.0], [0.0, 0.0, 12.0, 10.0], [-2.0, 7.5, 6.0, 6.0]])
        got = T.roi_align(T.Tensor(feat), boxes).data
        np.testing.assert_allclose(got, roi_align_loops(feat, boxes), atol=1e-10)

    def test_constant_feature_gives_constant(self):
        feat = np.full((2, 8, 8), 3.5)
        out = T.roi_align(T.Tensor(feat), np.array([[1.2, 1.7, 4.0, 3.0]])).data
        np.testing.assert_allclose(out, 3.5, atol=1e-12)

    def test_nonpositive_box_raises(self):
        with pytest.raises(ValueError, match="positive width"):
            T.roi_align(T.Tensor(np.ones((1, 4, 4))), np.array([[0.0, 0.0, 0.0, 2.0]]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_gives_2x(self):
        x = T.Tensor(np.arange(5.0), requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_shared_node_counted_once(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        z = T.mul(x, x)
        T.backward(T.tsum(T.add(z, z)))
        np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)

    def test_backward_twice_raises(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x)
        T.backward(loss)
        with pytest.raises(RuntimeError, match="already ran"):
            T.backward(loss)

    def test_nonscalar_loss_raises(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.add(x, x))

    def test_composite_net_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 2, 6, 6)) * 0.5
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3) * 0.1
        fc_w = rng.standard_normal((27, 4)) * 0.5
        labels = np.array([1, 3])

        def build(xt, wt, bt, fct):
            h = T.relu(T.conv2d(xt, wt, bt, padding=1))
            h = T.max_pool2d(h, 2)
            h = T.reshape(h, (2, -1))
            h = T.matmul(h, fct)
            return T.softmax_cross_entropy(h, labels)

        check_grads(build, [x, w, b, fc_w], rel_tol=1e-4)


class TestGradChecksPerOp:
    """Central finite differences vs autodiff for every differentiable op."""

    def test_elementwise_and_structural(self):
        rng = np.random.default_rng(31)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        bias = rng.standard_normal(4)
        check_grads(lambda x, y: T.tsum(T.mul(T.add(x, y), T.sub(x, y))), [a, b])
        check_grads(lambda x, y: T.mean(T.mul(x, y)), [a, b])
        check_grads(lambda x, y: T.tsum(T.add(x, y)), [a, bias])  # broadcast bias
        check_grads(lambda x: T.tsum(T.mul(T.reshape(x, (4, 3)), T.reshape(x, (4, 3)))), [a])
        check_grads(lambda x: T.tsum(T.mul(T.transpose(x), T.transpose(x))), [a])
        check_grads(lambda x, y: T.tsum(T.mul(T.concat([x, y], axis=1), T.concat([y, x], axis=1))), [a, b])
        check_grads(lambda x: T.tsum(T.scale(x, -2.5)), [a])

    def test_activations_and_losses(self):
        rng = np.random.default_rng(32)
        a = rng.standard_normal((4, 5))
        tgt = rng.standard_normal((4, 5))
        labels = np.array([0, 2, 4, 1])
        check_grads(lambda x: T.tsum(T.mul(T.relu(x), T.relu(x))), [a])
        check_grads(lambda x: T.tsum(T.sigmoid(x)), [a])
        check_grads(lambda x: T.tsum(T.mul(T.softmax(x), T.Tensor(tgt))), [a])
        check_grads(lambda x, y: T.mse_loss(x, y), [a, tgt])
        # keep |x-y| away from 0 so the l1 kink does not break the FD estimate
        check_grads(lambda x, y: T.l1_loss(x, y), [a + 5.0, tgt])
        check_grads(lambda x: T.softmax_cross_entropy(x, labels), [a])

    def test_spatial_ops(self):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((1, 2, 6, 7))
        w = rng.standard_normal((2, 2, 3, 3)) * 0.5
        b = rng.standard_normal(2)
        feat = rng.standard_normal((2, 7, 8))
        boxes = np.array([[0.5, 1.0, 4.0, 3.5], [2.0, 2.0, 5.0, 4.0]])
        check_grads(lambda xt, wt, bt: T.tsum(T.mul(T.conv2d(xt, wt, bt, padding=1), T.conv2d(xt, wt, bt, padding=1))), [x, w, b])
        check_grads(lambda xt, wt: T.tsum(T.conv2d(xt, wt, stride=2, dilation=2, padding=2)), [x, w])
        # pooling argmax must be stable under the FD step: use well-separated values
        xp = rng.permutation(np.arange(1.0 * 6 * 8 * 2).reshape(-1)).reshape(1, 2, 6, 8)
        check_grads(lambda xt: T.tsum(T.mul(T.max_pool2d(xt, 2), T.max_pool2d(xt, 2))), [xp * 0.1])
        check_grads(lambda f: T.tsum(T.mul(T.roi_align(f, boxes), T.roi_align(f, boxes))), [feat])

    def test_dropout_grad_is_mask(self):
        rng = np.random.default_rng(34)
        a = rng.standard_normal((5, 5))
        x = T.Tensor(a, requires_grad=True)
        out = T.dropout(x, 0.4, np.random.default_rng(99))
        T.backward(T.tsum(out))
        np.testing.assert_allclose(x.grad, out.data / a, atol=1e-12)


class TestOpSemantics:
    def test_relu(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = T.max_pool2d(T.Tensor(x), 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_max_pool_odd_trailing_dropped(self):
        x = np.arange(25.0).reshape(1, 1, 5, 5)
        out = T.max_pool2d(T.Tensor(x), 2)
        assert out.shape == (1, 1, 2, 2)

    def test_dropout_seeded_mask_reproducible(self):
        x = T.Tensor(np.ones((20, 20)))
        a = T.dropout(x, 0.5, np.random.default_rng(5)).data
        b = T.dropout(x, 0.5, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)
        kept = a != 0
        np.testing.assert_allclose(a[kept], 2.0)

    def test_dropout_eval_is_identity(self):
        x = T.Tensor(np.ones(10))
        out = T.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_concat_and_split_grad(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        b = T.Tensor(np.ones((3, 2)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        assert out.shape == (5, 2)
        T.backward(T.tsum(T.mul(out, out)))
        np.testing.assert_allclose(a.grad, 2 * np.ones((2, 2)))

    def test_l1_mse_values(self):
        p = T.Tensor([1.0, 2.0, 3.0])
        t = T.Tensor([2.0, 2.0, 5.0])
        assert T.l1_loss(p, t).item() == pytest.approx(1.0)
        assert T.mse_loss(p, t).item() == pytest.approx(5.0 / 3.0)

    def test_cross_entropy_uniform(self):
        logits = T.Tensor(np.zeros((2, 4)))
        out = T.softmax_cross_entropy(logits, np.array([0, 3]))
        assert out.item() == pytest.approx(np.log(4.0))

    def test_nonfinite_forward_raises(self):
        big = T.Tensor(np.array([1e308]))
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T.mul(big, big)


class TestPrecisionModes:
    def test_mode_switches_leaf_dtype(self):
        T.set_mode("run")
        assert T.Tensor(np.ones(3)).dtype == np.float32
        T.set_mode("test")
        assert T.Tensor(np.ones(3)).dtype == np.float64

    def test_unknown_mode_raises(self):
        with pytest.raises(ValueError):
            T.set_mode("fast")

    def test_forward_deterministic_same_seed(self):
        def run():
            rng = np.random.default_rng(17)
            x = T.Tensor(rng.standard_normal((1, 3, 8, 8)))
            w = T.Tensor(rng.standard_normal((4, 3, 3, 3)))
            h = T.relu(T.conv2d(x, w, padding=1))
            return T.max_pool2d(h, 2).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()


class TestNoGrad:
    def test_no_graph_inside_context(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()


@pytest.mark.parametrize("backend_name", available_backends())
class TestBackendParity:
    """Both kernel backends satisfy the same loop oracles."""

    def test_conv_forward(self, backend_name):
        be = get_backend(backend_name)
        rng = np.random.default_rng(41)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        got = be.conv2d_forward(x, w, 1, 2, 2)
        np.testing.assert_allclose(got, conv2d_loops(x, w, stride=1, dilation=2, padding=2), atol=1e-10)

    def test_conv_backward_input_weight(self, backend_name):
        be = get_backend(backend_name)
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        g = rng.standard_normal((1, 3, 6, 6))
        # d/dx sum(g * conv(x, w)) equals correlation of g with w: check via FD on the oracle
        gx = be.conv2d_backward_input(g, w, x.shape, 1, 1, 1)
        gw = be.conv2d_backward_weight(g, x, w.shape, 1, 1, 1)
        h = 1e-6
        for idx in [(0, 0, 0, 0), (0, 1, 3, 2), (0, 0, 5, 5)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = ((conv2d_loops(xp, w, padding=1) - conv2d_loops(xm, w, padding=1)) * g).sum() / (2 * h)
            assert abs(gx[idx] - fd) < 1e-6
        for idx in [(0, 0, 0, 0), (2, 1, 2, 2)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = ((conv2d_loops(x, wp, padding=1) - conv2d_loops(x, wm, padding=1)) * g).sum() / (2 * h)
            assert abs(gw[idx] - fd) < 1e-6

    def test_roi_align(self, backend_name):
        be = get_backend(backend_name)
        rng = np.random.default_rng(43)
        feat = rng.standard_normal((3, 9, 11))
        boxes = np.array([[1.0, 1.0, 4.0, 4.0], [3.3, 2.1, 5.2, 6.0]])
        got = be.roi_align_forward(feat, boxes, 3, 2)
        np.testing.assert_allclose(got, roi_align_loops(feat, boxes), atol=1e-10)

    def test_backends_agree(self, backend_name):
        be = get_backend(backend_name)
        ref = get_backend("numpy")
        rng = np.random.default_rng(44)
        x = rng.standard_normal((1, 4, 8, 9))
        w = rng.standard_normal((5, 4, 3, 3))
        np.testing.assert_allclose(
            be.conv2d_forward(x, w, 1, 3, 3), ref.conv2d_forward(x, w, 1, 3, 3), atol=1e-10
        )
