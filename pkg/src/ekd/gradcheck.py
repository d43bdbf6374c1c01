"""Compare reverse-mode gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    excluded: list = field(default_factory=list)  # (input index, flat index)
    worst: tuple = (-1, -1)
    rel_errors: list = field(default_factory=list)  # one array per input

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}) "
                f"over {self.checked} components, {len(self.excluded)} excluded")


def _at(f, inputs, flat, i, value) -> float:
    flat[i] = value
    return float(f(inputs).data)


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               tol: float = 1e-5, floor: float = 1e-6, kink_tol: float = 1e-3,
               reference: Optional[Callable[[Sequence[Tensor]], Tensor]] = None) -> GradCheckReport:
    """Check ``f``'s autodiff gradient with respect to every component of ``inputs``.

    The numeric derivative is the five-point central difference, whose
    truncation error is O(h^4), so a step large enough to keep round-off small
    is still accurate on strongly curved functions.

    The relative error of a component is ``|a - n| / max(|a|, |n|, floor)``.
    A component is excluded as a non-differentiable point when the forward and
    backward one-sided differences (at step h or 2h) disagree by more than
    ``kink_tol * max(1, |n|)``, which is what a relu or max-pool switch inside
    the stencil looks like; smooth points differ by only ``2h * f''``.

    ``reference`` is differenced instead of ``f`` when given.  It must agree
    with ``f`` in value at the base point; use it when ``f`` stops gradients on
    purpose (detached targets), with the detached quantities held constant.
    """
    g = reference or f
    for x in inputs:
        x.grad = None
    y = f(inputs)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    y.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    report = GradCheckReport(max_rel_error=0.0, tol=tol, checked=0)
    with no_grad():
        f0 = float(g(inputs).data)
        for k, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            errs = np.zeros(flat.size)
            a_flat = analytic[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                fp, fm, fp2, fm2 = (_at(g, inputs, flat, i, orig + d) for d in (h, -h, 2 * h, -2 * h))
                flat[i] = orig
                # fourth-order central difference
                num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
                jump = max(abs(fp - 2 * f0 + fm) / h, abs(fp2 - 2 * f0 + fm2) / (2 * h))
                if jump > kink_tol * max(1.0, abs(num)):
                    report.excluded.append((k, i))
                    errs[i] = np.nan
                    continue
                a = float(a_flat[i])
                errs[i] = abs(a - num) / max(abs(a), abs(num), floor)
                report.checked += 1
                if errs[i] > report.max_rel_error:
                    report.max_rel_error = float(errs[i])
                    report.worst = (k, i)
            report.rel_errors.append(errs.reshape(x.shape))
    for x in inputs:
        x.grad = None
    return report
