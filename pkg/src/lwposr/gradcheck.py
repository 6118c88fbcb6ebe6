"""Finite-difference verification of analytic gradients.

The numeric side perturbs each parameter coordinate by a central step and
re-runs the (graph-free) forward pass, so it is independent of the backward
implementation it checks.  Relative error uses max(|analytic|, |numeric|,
floor) as the denominator; the floor turns the comparison absolute for
near-zero coordinates, where central differences only carry rounding noise.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)  # (name, max relative error)

    @property
    def max_error(self):
        return max((e for _, e in self.entries), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def format_lines(self):
        lines = [
            f"{name:<48s} max_rel_err {err:.3e}" for name, err in self.entries
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: max relative error {self.max_error:.3e} "
            f"(tolerance {self.tolerance:.1e})"
        )
        return lines


def analytic_gradients(loss_fn, params):
    """Run one traced forward/backward; returns {name: gradient array}."""
    for _, t in params:
        t.zero_grad()
    loss = loss_fn()
    loss.assert_finite("gradient check loss")
    loss.backward()
    grads = {}
    for name, t in params:
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()
    return grads


def numeric_gradients(loss_fn, params, step=1e-5):
    """Central finite differences of the loss over every parameter coordinate."""

    def eval_loss():
        with no_grad():
            value = float(loss_fn().data)
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite-difference evaluation")
        return value

    grads = {}
    for name, t in params:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        grads[name] = g.reshape(t.data.shape)
    return grads


def compare_gradients(analytic, numeric, tolerance, floor=1e-3):
    report = GradCheckReport(tolerance=tolerance)
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        report.entries.append((name, err))
    return report


def grad_check(loss_fn, params, step=1e-5, tolerance=1e-4):
    """Full check of a deterministic scalar-valued fragment.

    loss_fn: nullary callable returning a scalar Tensor, reading the current
    parameter values; params: list of (name, Tensor) pairs to verify.
    """
    analytic = analytic_gradients(loss_fn, params)
    numeric = numeric_gradients(loss_fn, params, step=step)
    return compare_gradients(analytic, numeric, tolerance)
