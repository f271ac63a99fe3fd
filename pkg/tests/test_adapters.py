"""Adapter and fusion layer tests with pencil-and-paper oracles."""

import numpy as np
import pytest

from i2ilab.adapters import (
    AdapterParams,
    AdapterPoint,
    FusionPoint,
    adapter_forward,
    count_params,
    fusion_forward,
    init_adapter,
    init_fusion,
)
from i2ilab.gradcheck import grad_check
from i2ilab.rng import Rng
from i2ilab.tensor import Tensor, tsum


class TestAdapterForward:
    def test_zero_up_path_is_identity(self):
        ad = init_adapter(d_model=8, n_points=2, bottleneck=3, rng=Rng(1))
        x = Tensor(Rng(2).normal((4, 8)))
        for p in ad.points:
            out = adapter_forward(p, x)
            assert np.array_equal(out.data, x.data)

    def test_hand_computed_r1(self):
        # x=[1,2]; down: 1*0.5 + 2*1.0 - 0.5 = 2.0; relu keeps it;
        # up: 2*[0.3,-0.2] + [0.1,0.1] = [0.7,-0.3]; plus residual.
        p = AdapterPoint(
            down_w=Tensor([[0.5], [1.0]]),
            down_b=Tensor([-0.5]),
            up_w=Tensor([[0.3, -0.2]]),
            up_b=Tensor([0.1, 0.1]),
        )
        out = adapter_forward(p, Tensor([[1.0, 2.0]]))
        np.testing.assert_allclose(out.data, [[1.7, 1.7]], rtol=1e-15)

    def test_down_projection_gradient(self):
        ad = init_adapter(d_model=5, n_points=1, bottleneck=2, rng=Rng(3))
        p = ad.points[0]
        # break the zero init so the relu is active and gradients flow
        p.up_w.data[:] = Rng(4).normal((2, 5))
        p.down_b.data[:] = 0.3
        x = Tensor(Rng(5).normal((3, 5)))

        def f():
            return tsum(adapter_forward(p, x))

        assert grad_check(f, [p.down_w, p.down_b, p.up_w, p.up_b]) < 1e-6

    def test_shape_check(self):
        ad = init_adapter(d_model=4, n_points=1, bottleneck=2, rng=Rng(0))
        with pytest.raises(ValueError):
            adapter_forward(ad.points[0], Tensor(np.zeros((2, 3))))


class TestFusionForward:
    def test_single_adapter_weight_is_one(self):
        fu = init_fusion(d_model=4, n_points=1, n_adapters=1, rng=Rng(6))
        x = Tensor(Rng(7).normal((3, 4)))
        a1 = Tensor(Rng(8).normal((3, 4)))
        out, alpha = fusion_forward(fu.points[0], x, [a1], return_weights=True)
        np.testing.assert_allclose(alpha.data, np.ones((3, 1)), rtol=0)
        # value map is the identity at init, so the output is the adapter output
        np.testing.assert_allclose(out.data, a1.data, rtol=1e-15)

    def test_identity_value_map_k1(self):
        p = FusionPoint(q_w=Tensor(Rng(9).normal((2, 2))),
                        k_w=Tensor(Rng(10).normal((2, 2))),
                        v_w=Tensor(np.eye(2)))
        x = Tensor([[1.0, -2.0]])
        a1 = Tensor([[0.5, 3.0]])
        out = fusion_forward(p, x, [a1])
        np.testing.assert_allclose(out.data, a1.data, rtol=1e-15)

    def test_hand_computed_attention_k2(self):
        p = FusionPoint(q_w=Tensor(np.eye(2)), k_w=Tensor(np.eye(2)),
                        v_w=Tensor([[2.0, 0.0], [0.0, 1.0]]))
        x = Tensor([[1.0, 0.0]])
        a1, a2 = Tensor([[1.0, 1.0]]), Tensor([[0.0, 2.0]])
        # explicit attention computation
        s = np.array([1.0, 0.0]) / np.sqrt(2.0)
        w = np.exp(s) / np.exp(s).sum()
        expected = w[0] * np.array([2.0, 1.0]) + w[1] * np.array([0.0, 2.0])
        out = fusion_forward(p, x, [a1, a2])
        np.testing.assert_allclose(out.data, [expected], rtol=1e-14)

    def test_identical_adapters_any_alpha(self):
        fu = init_fusion(d_model=4, n_points=1, n_adapters=2, rng=Rng(11))
        x = Tensor(Rng(12).normal((5, 4)))
        a = Tensor(Rng(13).normal((5, 4)))
        out = fusion_forward(fu.points[0], x, [a, Tensor(a.data.copy())])
        np.testing.assert_allclose(out.data, a.data, rtol=1e-12)

    def test_weights_nonnegative_sum_to_one(self):
        fu = init_fusion(d_model=8, n_points=1, n_adapters=3, rng=Rng(14))
        x = Tensor(Rng(15).normal((2, 6, 8)))
        outs = [Tensor(Rng(20 + i).normal((2, 6, 8))) for i in range(3)]
        _, alpha = fusion_forward(fu.points[0], x, outs, return_weights=True)
        assert alpha.data.min() >= 0.0
        np.testing.assert_allclose(alpha.data.sum(axis=-1), np.ones((2, 6)),
                                   atol=1e-12)

    def test_positive_rescaling_keeps_argmax(self):
        fu = init_fusion(d_model=8, n_points=1, n_adapters=3, rng=Rng(16))
        p = fu.points[0]
        p.q_w.data[:] = Rng(17).normal((8, 8))
        p.k_w.data[:] = Rng(18).normal((8, 8))
        x = Tensor(Rng(19).normal((6, 8)))
        outs = [Tensor(Rng(30 + i).normal((6, 8))) for i in range(3)]
        _, a1 = fusion_forward(p, x, outs, return_weights=True)
        scaled = [Tensor(o.data * 7.5) for o in outs]
        _, a2 = fusion_forward(p, x, scaled, return_weights=True)
        np.testing.assert_array_equal(np.argmax(a1.data, axis=-1),
                                      np.argmax(a2.data, axis=-1))

    def test_empty_adapter_list(self):
        fu = init_fusion(d_model=4, n_points=1, n_adapters=1, rng=Rng(0))
        with pytest.raises(ValueError):
            fusion_forward(fu.points[0], Tensor(np.zeros((1, 4))), [])


class TestInit:
    def test_same_seed_identical(self):
        a1 = init_adapter(8, 4, 2, Rng(42))
        a2 = init_adapter(8, 4, 2, Rng(42))
        for (_, t1), (_, t2) in zip(a1.named_tensors(), a2.named_tensors()):
            assert np.array_equal(t1.data, t2.data)

    def test_different_seeds_differ(self):
        a1 = init_adapter(8, 1, 2, Rng(42))
        a2 = init_adapter(8, 1, 2, Rng(43))
        assert not np.array_equal(a1.points[0].down_w.data,
                                  a2.points[0].down_w.data)

    def test_fusion_init_contracts(self):
        fu = init_fusion(4, 2, 2, Rng(1))
        for p in fu.points:
            assert np.array_equal(p.v_w.data, np.eye(4))
        with pytest.raises(ValueError):
            init_fusion(4, 2, 0, Rng(1))


class TestCountParams:
    def test_adapter_closed_form(self):
        ad = init_adapter(d_model=64, n_points=4, bottleneck=8, rng=Rng(1))
        assert count_params(ad) == 4 * (2 * 64 * 8 + 8 + 64) == 4384

    def test_fusion_closed_form(self):
        fu = init_fusion(d_model=64, n_points=4, n_adapters=2, rng=Rng(1))
        assert count_params(fu) == 4 * 3 * 64 * 64 == 49152

    def test_empty_fusion_errors(self):
        fu = init_fusion(d_model=4, n_points=1, n_adapters=1, rng=Rng(0))
        fu.n_adapters = 0  # corrupt deliberately
        with pytest.raises(ValueError):
            count_params(fu)

    def test_fusion_to_adapter_ratio(self):
        for d, r in [(64, 8), (32, 4), (16, 1)]:
            ad = init_adapter(d, 4, r, Rng(2))
            fu = init_fusion(d, 4, 1, Rng(2))
            got = count_params(fu) / count_params(ad)
            assert got == pytest.approx(3 * d * d / (2 * d * r + r + d))
            assert count_params(fu) > count_params(ad)  # fusion dominates


class TestCopy:
    def test_copy_is_bitwise_and_independent(self):
        ad = init_adapter(8, 2, 3, Rng(50))
        ad.points[0].up_w.data[:] = 1.5
        cp = ad.copy()
        assert np.array_equal(cp.points[0].up_w.data, ad.points[0].up_w.data)
        cp.points[0].up_w.data[:] = -9.0
        assert ad.points[0].up_w.data[0, 0] == 1.5
