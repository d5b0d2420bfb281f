"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import BranchProbe, Tape, Tensor

# Denominator floor for the relative error.
ABS_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_elements: int
    tolerance: float
    worst: tuple = ()
    skipped: int = 0
    floor: float = ABS_FLOOR

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.n_elements > 0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f", {self.skipped} kink-straddling skipped" if self.skipped else ""
        return (f"{tag} {self.name}: max_rel_err={self.max_rel_error:.3e} over {self.n_elements} elements"
                f"{extra} (tol {self.tolerance:g})")


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 0,
    wrt: Optional[Sequence[Tensor]] = None,
    name: str = "op",
    abs_floor: float = ABS_FLOOR,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    A non-scalar output is reduced to a scalar by a fixed random projection, so
    every output element participates. Each element of every tensor in ``wrt``
    (default: inputs with ``requires_grad``) is perturbed by ``±h``. The
    relative error per element is ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``abs_floor`` unless the objective itself is too coarse for
    it: two evaluations rounded to float64 differ by at least one ulp of the
    objective, so the difference quotient cannot resolve gradients below about
    ``spacing(f) / h``. The floor is raised to that resolution divided by the
    tolerance, so elements below it are compared in absolute terms.

    Piecewise ops (relu, smooth-L1, bilinear cells, norm floors) report their
    branch selections; a perturbation whose ``+h`` or ``-h`` evaluation lands on
    a different piece than the unperturbed point straddles a kink, where the
    central difference is not a derivative estimate. Such elements are counted
    in ``skipped`` instead of compared.
    """
    inputs = list(inputs)
    targets = list(wrt) if wrt is not None else [t for t in inputs if t.requires_grad]
    for t in targets:
        if t.dtype != np.float64:
            raise ValueError(f"finite_diff_check needs float64 inputs, got {t.dtype}")
        t.requires_grad = True

    with BranchProbe() as probe:
        probe_out = fn(*inputs)
    base_sig = probe.signature()
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(probe_out.shape) if probe_out.data.size > 1 else np.ones(probe_out.shape)
    f0 = abs(float((probe_out.data * proj).sum()))
    floor = max(abs_floor, float(np.spacing(max(f0, 1.0))) / h / tolerance)

    def objective() -> tuple[float, tuple]:
        with BranchProbe() as p:
            val = float((fn(*inputs).data * proj).sum())
        if not np.isfinite(val):
            raise FloatingPointError(f"{name}: non-finite objective during finite differences")
        return val, p.signature()

    for t in targets:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, proj)

    worst = 0.0
    where: tuple = ()
    count = skipped = 0
    for ti, t in enumerate(targets):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"{name}: non-finite analytic gradient")
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = objective()
            flat[i] = orig - h
            fm, sm = objective()
            flat[i] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            a = aflat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if rel > worst:
                worst, where = rel, (ti, i, float(a), float(num))
    return GradCheckReport(name=name, max_rel_error=worst, n_elements=count, tolerance=tolerance,
                           worst=where, skipped=skipped, floor=floor)
