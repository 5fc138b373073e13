"""The finite-difference gradient checker: exactness on linear maps, tight
agreement on smooth compositions, and kink avoidance around relu."""

import numpy as np
import pytest

from exemdet import autograd as ag
from exemdet.autograd import Tensor
from exemdet.errors import NumericalError
from exemdet.gradcheck import gradcheck
from exemdet.params import ParamStore


def make_store(**arrays):
    store = ParamStore()
    for key, value in arrays.items():
        store.add(key, np.asarray(value, dtype=float))
    return store


class TestGradcheckAgreement:
    def test_linear_function_is_nearly_exact(self):
        store = make_store(w=[0.3, -0.7, 1.1])
        x = np.array([1.0, 2.0, 3.0])

        def fn(s):
            return ag.dot(s["w"], Tensor(x))

        report = gradcheck(fn, store)
        # Central differences are exact on affine functions up to rounding.
        assert report.max_rel_error < 1e-9
        assert report.elements_checked == 3

    def test_quadratic_function_within_h_squared(self):
        store = make_store(w=[1.0, -2.0, 0.5])

        def fn(s):
            return ag.tensor_sum(s["w"] * s["w"])

        report = gradcheck(fn, store, h=1e-4)
        assert report.max_rel_error < 1e-7

    def test_small_mlp_with_relu_passes_tolerance(self):
        rng = np.random.default_rng(11)
        store = make_store(w1=rng.normal(size=(4, 3)), b1=rng.normal(size=4),
                           w2=rng.normal(size=(1, 4)), b2=rng.normal(size=1))
        x = rng.normal(size=3)

        def fn(s):
            h = ag.relu(ag.fully_connected(Tensor(x), s["w1"], s["b1"]))
            return ag.tensor_sum(ag.fully_connected(h, s["w2"], s["b2"]))

        report = gradcheck(fn, store)
        assert report.max_rel_error < 1e-5
        assert report.elements_checked == 4 * 3 + 4 + 4 + 1

    def test_step_shrinks_when_probe_crosses_a_kink(self):
        # Pre-activation sits 1e-6 from the kink: a 1e-4 step lands on the
        # other linear piece, so the checker must shrink until it stays put.
        store = make_store(w=[1.0])

        def fn(s):
            z = ag.dot(s["w"], Tensor([1.0])) - (1.0 - 1e-6)
            return ag.tensor_sum(ag.relu(ag.stack([z])))

        report = gradcheck(fn, store, h=1e-4)
        assert report.max_rel_error < 1e-5

    def test_worst_element_is_reported(self):
        store = make_store(a=[1.0], b=[2.0])

        def fn(s):
            return ag.tensor_sum(s["a"] * s["a"]) + ag.tensor_sum(s["b"] * s["b"] * s["b"])

        report = gradcheck(fn, store)
        assert set(report.per_param) == {"a", "b"}
        assert report.worst_key in {"a", "b"}
        assert report.passed(tol=1e-5)


class TestGradcheckFailureModes:
    def test_nonfinite_loss_raises(self):
        store = make_store(w=[1.0])

        def fn(s):
            return ag.tensor_sum(s["w"] * np.inf)

        with pytest.raises(NumericalError):
            gradcheck(fn, store)

    def test_detects_a_wrong_gradient(self):
        # A deliberately broken backward rule must be caught, proving the
        # checker can actually fail.
        store = make_store(w=[2.0])

        def fn(s):
            w = s["w"]
            out = Tensor(w.data * w.data)
            if ag._GRAD_ENABLED:
                out.requires_grad = True
                out._parents = (w,)
                out._backward = lambda g: ag._accumulate(w, g * 3.0)  # wrong: should be 2w*g
            return ag.tensor_sum(out)

        report = gradcheck(fn, store)
        assert report.max_rel_error > 1e-2

    def test_parameters_restored_after_probing(self):
        store = make_store(w=[1.0, 2.0])
        before = store["w"].data.copy()

        def fn(s):
            return ag.tensor_sum(s["w"] * s["w"])

        gradcheck(fn, store)
        assert np.array_equal(store["w"].data, before)
        assert store["w"].grad is None
