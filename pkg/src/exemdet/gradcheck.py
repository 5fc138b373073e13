"""Finite-difference verification of analytic gradients.

``gradcheck`` probes every element of every parameter with a central
difference and compares against the gradient produced by ``backward()``. The
loss must be deterministic in the parameters. Relu is piecewise linear, so a
probe that lands across a kink would corrupt the difference quotient; the
checker records each relu's pre-activation sign pattern during the two
evaluations and shrinks the step until both sides stay on the same linear
piece as the center point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad, relu_sign_trace
from .errors import NumericalError
from .params import ParamStore


@dataclass
class GradcheckReport:
    """Worst-case relative error plus per-parameter detail."""

    max_rel_error: float
    worst_key: str
    worst_index: int
    elements_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def _eval(fn: Callable[[ParamStore], Tensor], store: ParamStore) -> tuple[float, bytes]:
    with no_grad(), relu_sign_trace() as trace:
        value = float(fn(store).data)
    return value, b"".join(trace)


def gradcheck(fn: Callable[[ParamStore], Tensor], store: ParamStore,
              h: float = 1e-4, max_step_shrinks: int = 8) -> GradcheckReport:
    """Compare analytic and central-difference gradients for every element.

    Relative error per element is ``|a - fd| / max(|a|, |fd|, 1)``. Raises
    :class:`NumericalError` if the loss or any gradient is non-finite, or if a
    probe cannot find a kink-free step.
    """
    loss = fn(store)
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is non-finite at the evaluation point")
    store.zero_grad()
    loss.backward()
    analytic: dict[str, np.ndarray] = {}
    for key, tensor in store.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.isfinite(grad).all():
            raise NumericalError(f"analytic gradient for '{key}' is non-finite")
        analytic[key] = np.array(grad, dtype=np.float64)
    store.zero_grad()

    _, center_signature = _eval(fn, store)

    worst = 0.0
    worst_key = ""
    worst_index = -1
    checked = 0
    per_param: dict[str, float] = {}
    for key, tensor in store.items():
        flat = tensor.data.reshape(-1)
        grad_flat = analytic[key].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            step = h
            for _ in range(max_step_shrinks + 1):
                flat[i] = original + step
                f_plus, sig_plus = _eval(fn, store)
                flat[i] = original - step
                f_minus, sig_minus = _eval(fn, store)
                flat[i] = original
                if sig_plus == center_signature and sig_minus == center_signature:
                    break
                step *= 0.25
            else:
                raise NumericalError(
                    f"could not find a kink-free probe for '{key}'[{i}]")
            fd = (f_plus - f_minus) / (2.0 * step)
            a = grad_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            checked += 1
            if rel > param_worst:
                param_worst = rel
            if rel > worst:
                worst, worst_key, worst_index = rel, key, i
        per_param[key] = param_worst
    return GradcheckReport(max_rel_error=worst, worst_key=worst_key,
                           worst_index=worst_index, elements_checked=checked,
                           per_param=per_param)
