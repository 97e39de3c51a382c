"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    passed: bool


def finite_diff_check(op, inputs: list[Tensor], step: float = 1e-3,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued op against central
    differences, perturbing every element of every input.

    Inputs must sit away from non-differentiable points (relu/huber
    kinks) by more than the step, which the caller is responsible for.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    loss = op(*inputs)
    backward(loss)
    analytic = [np.array(t.grad, copy=True) if t.grad is not None
                else np.zeros_like(t.data) for t in inputs]

    per_input = []
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = op(*inputs).item()
            flat[i] = orig - step
            f_minus = op(*inputs).item()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2 * step)
        denom = np.maximum(np.abs(a) + np.abs(numeric), 1e-3)
        per_input.append(float(np.max(np.abs(a - numeric) / denom)))
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_error=max_err, per_input=per_input,
                           passed=max_err < tolerance)
