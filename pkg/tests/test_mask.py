import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oamixer.errors import InvariantError, ParameterError, StateError
from oamixer.gradcheck import grad_check
from oamixer.labels import DistanceMatrix, PatchLabels, pairwise_distance_matrix
from oamixer.mask import (
    MaskScale,
    ReweightMask,
    augment_cls,
    build_mask,
    format_kappa_table,
    project_kappa,
    quarter_averaged_scales,
)
from oamixer.optim import AdamW
from oamixer.tensor import Parameter, Tensor, backward, mul, sum_


def random_distances(rng, n):
    return pairwise_distance_matrix(PatchLabels(rng.random((n, 1))))


def scale(value, dtype=np.float64, layer=0):
    s = MaskScale(layer, dtype)
    s.value = value
    return s


class TestMaskScale:
    def test_zero_init(self):
        s = MaskScale(3)
        assert s.value == 0.0 and s.raw.shape == ()
        assert s.raw.name == "blocks.3.kappa"

    def test_project(self):
        s = scale(-0.01)
        project_kappa(s)
        assert s.value == 0.0
        s.value = 0.3
        project_kappa(s)
        assert s.value == pytest.approx(0.3)

    def test_adamw_never_negative(self):
        # toy loss pulls kappa towards a negative target; projection must hold it at 0
        rng = np.random.default_rng(0)
        s = MaskScale(0, np.float64)
        opt = AdamW([s.raw], lr=0.05, weight_decay=0.05)
        for step in range(1000):
            target = rng.normal(-0.5, 1.0)
            loss = mul(s.raw - target, s.raw - target)
            opt.zero_grad()
            backward(loss)
            opt.step()
            project_kappa(s)
            assert s.value >= 0.0, step


class TestBuildMask:
    def test_zero_kappa_all_ones(self):
        d = random_distances(np.random.default_rng(1), 7)
        m = build_mask(d, MaskScale(0, np.float64)).m.data
        assert np.array_equal(m, np.ones((7, 7)))

    def test_ln2(self):
        m = build_mask(np.array([[0.0, 1.0], [1.0, 0.0]]), scale(math.log(2))).m.data
        assert m[0, 1] == pytest.approx(0.5, abs=1e-15)

    def test_learned_first_quarter_value(self):
        m = build_mask(np.array([[0.0, 1.0], [1.0, 0.0]]), scale(1.571)).m.data
        assert m[0, 1] == pytest.approx(math.exp(-1.571), abs=1e-15)
        assert abs(m[0, 1] - 0.2079) < 1e-4

    def test_law_against_direct_evaluation(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            d = random_distances(rng, 9)
            k = float(rng.uniform(0, 5))
            m = build_mask(d, scale(k)).m.data
            assert np.abs(m - np.exp(-k * d.d)).max() <= 1e-12
            assert np.all(np.diag(m) == 1.0)
            assert np.array_equal(m, m.T)

    def test_negative_kappa(self):
        with pytest.raises(InvariantError):
            build_mask(np.zeros((2, 2)), scale(-1.0))

    def test_batched(self):
        d = np.random.default_rng(3).random((3, 4, 4))
        m = build_mask(d, scale(0.5)).m.data
        np.testing.assert_allclose(m, np.exp(-0.5 * d), rtol=0, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 20), st.floats(1e-3, 10), st.integers(0, 2**31))
    def test_monotone_and_positive(self, k, dk, seed):
        rng = np.random.default_rng(seed)
        d = random_distances(rng, 5).d
        lo = build_mask(d, scale(k)).m.data
        hi = build_mask(d, scale(k + dk)).m.data
        off = d > 0
        assert np.all(hi[off] < lo[off])
        assert np.all(np.diag(hi) == 1.0)
        assert np.all(hi > 0)

    def test_kappa_derivative(self):
        rng = np.random.default_rng(4)
        d = random_distances(rng, 5)
        s = scale(0.7)
        w = rng.normal(size=(5, 5))
        m = build_mask(d, s).m
        backward(sum_(mul(m, Tensor(w))))
        analytic = float(np.sum(w * -d.d * m.data))
        assert s.raw.grad == pytest.approx(analytic, rel=1e-12)
        err = grad_check(lambda: sum_(mul(build_mask(d, s).m, Tensor(w))), [s.raw], eps=1e-6)
        assert err <= 1e-6

    def test_gradient_through_distance_matrix_type(self):
        d = DistanceMatrix(np.array([[0.0, 0.4], [0.4, 0.0]]))
        s = scale(2.0)
        backward(sum_(build_mask(d, s).m))
        assert s.raw.grad == pytest.approx(2 * -0.4 * math.exp(-0.8))


class TestAugmentCls:
    def test_singleton(self):
        out = augment_cls(ReweightMask(Tensor(np.ones((1, 1)))))
        assert out.has_cls
        np.testing.assert_array_equal(out.m.data, np.ones((2, 2)))

    def test_two_by_two(self):
        out = augment_cls(ReweightMask(Tensor(np.array([[1, 0.5], [0.5, 1]]))))
        np.testing.assert_array_equal(out.m.data, [[1, 1, 1], [1, 1, 0.5], [1, 0.5, 1]])

    def test_interior_bit_identical(self):
        m = np.random.default_rng(5).uniform(0.01, 1, size=(4, 4))
        out = augment_cls(ReweightMask(Tensor(m), source_layer=2))
        assert out.m.data[1:, 1:].tobytes() == m.tobytes()
        assert out.source_layer == 2
        assert np.all(out.m.data[0] == 1) and np.all(out.m.data[:, 0] == 1)

    def test_batched(self):
        m = np.random.default_rng(6).uniform(0.01, 1, size=(3, 4, 4))
        out = augment_cls(ReweightMask(Tensor(m))).m.data
        assert out.shape == (3, 5, 5)
        assert np.array_equal(out[:, 1:, 1:], m)

    def test_twice(self):
        once = augment_cls(ReweightMask(Tensor(np.ones((2, 2)))))
        with pytest.raises(StateError):
            augment_cls(once)


class TestQuarters:
    def test_zeros(self):
        assert quarter_averaged_scales([MaskScale(i) for i in range(8)]) == (0, 0, 0, 0)

    def test_four_layers(self):
        assert quarter_averaged_scales([1.0, 2.0, 3.0, 4.0]) == (1, 2, 3, 4)

    def test_uneven_groups(self):
        # 6 layers -> groups of 2, 2, 1, 1
        assert quarter_averaged_scales([1, 3, 5, 7, 9, 11]) == (2, 6, 9, 11)

    def test_kappa_equals_layer_index(self):
        q = quarter_averaged_scales([scale(float(i), layer=i) for i in range(12)])
        assert q == (1, 4, 7, 10)

    def test_too_few(self):
        with pytest.raises(ParameterError):
            quarter_averaged_scales([0.0, 0.0, 0.0])

    def test_table_layout(self):
        text = format_kappa_table({"DeiT-S": (1.571, 0.783, 0.945, 0.287)})
        head, row = text.splitlines()
        assert [h for h in head.split("  ") if h.strip()] == ["Layer 1/4", "Layer 2/4", "Layer 3/4", "Layer 4/4"]
        assert row.split() == ["DeiT-S", "1.571", "0.783", "0.945", "0.287"]


def test_param_is_scalar_leaf():
    s = MaskScale(0)
    assert isinstance(s.raw, Parameter) and s.raw.requires_grad
