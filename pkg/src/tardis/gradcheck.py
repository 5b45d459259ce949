"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between backward() and central differences."""

    per_param: dict = field(default_factory=dict)
    nonfinite: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def worst(self):
        if not self.per_param:
            return ("", 0.0)
        name = max(self.per_param, key=self.per_param.get)
        return (name, self.per_param[name])

    def ok(self, threshold: float) -> bool:
        return not self.nonfinite and self.max_rel_err < threshold


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(fn, params: dict, h: float = 1e-5, rel_floor: float = 1e-5,
                    corrupt: bool = False) -> GradCheckReport:
    """Compare backward() gradients of fn() against (f(x+h)-f(x-h))/2h.

    fn must rebuild its graph on each call and be deterministic given the
    current parameter values (freeze any sampling first). `corrupt` injects a
    fault into one analytic gradient entry, a self-test of the checker.
    Non-finite values are reported per parameter, never dropped.
    """
    for t in params.values():
        t.grad = None
    with Graph():
        loss = fn()
        if loss.data.size != 1:
            raise ValueError(f"check_gradients: fn must return a scalar, got {loss.data.shape}")
        backward(loss)
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    for t in params.values():
        t.grad = None

    if corrupt and analytic:
        first = sorted(analytic)[0]
        analytic[first].flat[0] += 1.0

    report = GradCheckReport()
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        worst = 0.0
        finite = np.isfinite(grad).all()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(fn().data)
            flat[j] = orig - h
            f_minus = float(fn().data)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(fd):
                finite = False
                continue
            worst = max(worst, _rel_err(float(grad[j]), fd, rel_floor))
        report.per_param[name] = worst if finite else float("inf")
        if not finite:
            report.nonfinite.append(name)
    return report
