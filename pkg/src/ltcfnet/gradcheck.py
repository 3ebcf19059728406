"""Central finite-difference verification of ``Tensor.backward``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, no_grad


@dataclass
class GradcheckReport:
    checked: int = 0
    passed: int = 0
    skipped: int = 0
    worst: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def pass_rate(self) -> float:
        return self.passed / self.checked if self.checked else 1.0

    def ok(self, min_pass=0.95) -> bool:
        return self.checked > 0 and self.pass_rate >= min_pass


def gradcheck(fn, inputs, n_samples=24, eps=1e-4, rtol=1e-2, rng=None, skip=None):
    """Compare analytic and central-difference gradients of scalar ``fn(*inputs)``.

    ``inputs`` are float64 tensors with ``requires_grad``; up to ``n_samples``
    coordinates of each are probed.  ``skip(k, flat_index)`` can exclude
    coordinates sitting on a known kink.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    loss = fn(*inputs)
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    report = GradcheckReport()
    for k, t in enumerate(inputs):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        count = min(n_samples, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            if skip is not None and skip(k, idx):
                report.skipped += 1
                continue
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + eps
                fp = fn(*inputs).item()
                flat[idx] = orig - eps
                fm = fn(*inputs).item()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / (abs(numeric) + 1e-6)
            report.checked += 1
            report.worst = max(report.worst, err)
            if err <= rtol:
                report.passed += 1
            else:
                report.failures.append((k, int(idx), float(a), float(numeric)))
    return report


def leaf(data):
    """Float64 leaf tensor requiring grad (for use inside ``check_mode``)."""
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, dtype=np.float64)
