"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Tensor, no_grad


class GradcheckError(ValueError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        worst = max(self.per_tensor.items(), key=lambda kv: kv[1], default=("-", 0.0))
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (worst {worst[0]})"


def gradcheck(fn, tensors, h=1e-5, tol=1e-3, max_elements=None, rng=None, atol=1e-5) -> GradcheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a scalar :class:`Tensor` built from
    ``tensors`` (parameters and/or inputs with ``requires_grad``). Each
    element's error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    the larger of ``atol`` and 1e-3 of the tensor's largest numerical
    gradient, so near-zero entries (e.g. a bias cancelled by batch norm) do
    not dominate. ``max_elements`` caps the probed entries per tensor (random
    subset drawn from ``rng``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise GradcheckError("forward produced non-finite values")
    out.backward()
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None
                else np.asarray(t.grad, dtype=np.float64) for t in tensors]
    for t in tensors:
        t.grad = None

    report = GradcheckReport(0.0, tol)
    for idx, (t, a) in enumerate(zip(tensors, analytic)):
        flat = t.data.reshape(-1)
        n = flat.size
        probe = np.arange(n)
        if max_elements is not None and n > max_elements:
            probe = np.sort(rng.choice(n, size=max_elements, replace=False))
        num = np.empty(len(probe))
        with no_grad():
            for k, i in enumerate(probe):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(np.sum(fn().data, dtype=np.float64))
                flat[i] = orig - h
                fm = float(np.sum(fn().data, dtype=np.float64))
                flat[i] = orig
                num[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(num)):
            raise GradcheckError(f"non-finite numerical gradient for tensor {idx}")
        an = a.reshape(-1)[probe]
        floor = max(1e-3 * np.max(np.abs(num), initial=0.0), atol)
        err = np.abs(an - num) / np.maximum(np.maximum(np.abs(an), np.abs(num)), floor)
        name = t.name or f"tensor{idx}"
        report.per_tensor[name] = float(err.max(initial=0.0))
    report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    return report
