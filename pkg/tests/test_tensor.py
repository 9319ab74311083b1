import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from approxtrain.tensor import ops
from approxtrain.tensor.autograd import NonFiniteError, Tensor, no_grad, track_saved
from approxtrain.tensor.functional import conv2d_exact, linear_exact, maxpool2x2, relu
from approxtrain.tensor.optim import SGD, sgd_step
from approxtrain.tensor.serialize import CheckpointFormatError, load_tensors, save_tensors
from oracles import naive_conv2d, naive_linear


class TestConvLinear:
    def test_identity_scale(self):
        y = conv2d_exact([[[[1.0]]]], [[[[2.0]]]], [0.0])
        assert y.tolist() == [[[[2.0]]]]

    def test_sum_of_ones(self):
        assert conv2d_exact(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2))).tolist() == [[[[4.0]]]]

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loops(self, rng, stride, pad):
        x = rng.normal(size=(1, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv2d_exact(x, w, b, stride, pad), naive_conv2d(x, w, b, stride, pad), atol=1e-5)

    def test_output_size(self, rng):
        assert conv2d_exact(rng.normal(size=(2, 1, 7, 7)), rng.normal(size=(5, 1, 3, 3)), None, 2, 1).shape == (2, 5, 4, 4)

    def test_shape_mismatch_is_descriptive(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d_exact(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="stride"):
            conv2d_exact(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)

    def test_linear_examples(self):
        assert linear_exact([[1.0, 0.0]], [[3.0, 5.0]], [1.0]).tolist() == [[4.0]]
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(linear_exact(x, np.eye(3)), x)

    def test_linear_matches_naive(self, rng):
        x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(5, 8)), rng.normal(size=5)
        np.testing.assert_allclose(linear_exact(x, w, b), naive_linear(x, w, b), atol=1e-5)

    def test_linear_dimension_mismatch(self):
        with pytest.raises(ValueError):
            linear_exact(np.ones((2, 3)), np.ones((4, 2)))


class TestPointwise:
    def test_relu(self):
        assert relu([-1.0, 2.0]).tolist() == [0.0, 2.0]

    def test_maxpool(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        assert maxpool2x2(x).tolist() == [[[[5.0, 7.0], [13.0, 15.0]]]]

    def test_uniform_logits_loss_is_log_classes(self):
        for label in range(10):
            loss = ops.softmax_cross_entropy(Tensor(np.zeros((1, 10))), np.array([label]))
            assert loss.item() == pytest.approx(math.log(10), rel=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestBackward:
    def test_linear_sum_gradient_is_input(self, rng):
        x = rng.normal(size=(1, 5)).astype(np.float32)
        w = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
        ops.sum(ops.linear(Tensor(x), w)).backward()
        np.testing.assert_allclose(w.grad, x, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ops.relu(t).backward()

    def test_detached_subgraph_receives_no_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum(ops.add(a, b.detach()))
        loss.backward()
        assert a.grad is not None and b.grad is None

    def test_every_parameter_gets_grad(self, rng):
        w1 = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(3, 4 * 2 * 2)), requires_grad=True)
        x = Tensor(rng.uniform(size=(2, 1, 4, 4)))
        h = ops.maxpool2x2(ops.relu(ops.conv2d(x, w1, pad=1)))
        loss = ops.softmax_cross_entropy(ops.linear(ops.flatten(h), w2), np.array([0, 2]))
        loss.backward()
        assert w1.grad.shape == w1.shape and w2.grad.shape == w2.shape

    def test_no_grad_builds_no_graph(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = ops.relu(a)
        assert out._ctx is None and not out.requires_grad

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            ops.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))

    def test_saved_tracking_counts_bytes(self):
        a = Tensor(np.ones((10,)), requires_grad=True)
        with track_saved() as saved:
            ops.relu(a)
        assert saved.nbytes > 0


class TestSGD:
    def test_plain_step(self):
        p = [np.array([1.0], dtype=np.float32)]
        sgd_step(p, [np.array([1.0], dtype=np.float32)], [np.zeros(1, dtype=np.float32)], 0.1)
        assert p[0][0] == pytest.approx(0.9)

    def test_zero_grad_leaves_param(self):
        p = [np.array([2.5], dtype=np.float32)]
        sgd_step(p, [np.zeros(1, dtype=np.float32)], [np.zeros(1, dtype=np.float32)], 0.1, momentum=0.9)
        assert p[0][0] == 2.5

    def test_momentum_matches_hand_recurrence(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([t], lr=0.1, momentum=0.9, weight_decay=0.01)
        grads = [0.5, -0.25]
        p, v = 1.0, 0.0
        for g in grads:
            t.grad = np.array([g], dtype=np.float32)
            opt.step()
            v = 0.9 * v + g + 0.01 * p
            p = p - 0.1 * v
        assert t.data[0] == pytest.approx(p, rel=1e-6)

    def test_non_finite_grad_aborts_without_update(self):
        p = [np.array([1.0], dtype=np.float32)]
        with pytest.raises(NonFiniteError):
            sgd_step(p, [np.array([np.nan], dtype=np.float32)], [np.zeros(1, dtype=np.float32)], 0.1)
        assert p[0][0] == 1.0

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError):
            sgd_step([np.ones(1)], [np.ones(1)], [np.zeros(1)], 0.0)


class TestSerialize:
    def test_roundtrip(self, tmp_path, rng):
        recs = {"a": rng.normal(size=(2, 3)).astype(np.float32), "scalar": np.array(3.0, dtype=np.float32),
                "ünï": np.zeros((0, 4), dtype=np.float32)}
        save_tensors(tmp_path / "m.axtn", recs)
        back = load_tensors(tmp_path / "m.axtn")
        assert list(back) == list(recs)
        for k in recs:
            np.testing.assert_array_equal(back[k], recs[k])

    def test_layout(self, tmp_path):
        save_tensors(tmp_path / "m.axtn", {"w": np.array([1.5], dtype=np.float32)})
        raw = (tmp_path / "m.axtn").read_bytes()
        assert raw[:4] == b"AXTN"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert raw[-4:] == np.array([1.5], dtype="<f4").tobytes()

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "m.axtn"
        save_tensors(p, {"w": np.ones(2, dtype=np.float32)})
        raw = bytearray(p.read_bytes())
        p.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_tensors(p)
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_tensors(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.axtn"
        save_tensors(p, {"w": np.ones(8, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_tensors(p)

    @given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**31 - 1))
    def test_roundtrip_property(self, tmp_path_factory, dims, seed):
        arr = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
        p = tmp_path_factory.mktemp("ser") / "t.axtn"
        save_tensors(p, {"x": arr})
        np.testing.assert_array_equal(load_tensors(p)["x"], arr)
