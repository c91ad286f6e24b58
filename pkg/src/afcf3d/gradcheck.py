"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GradientCheckError
from .tensor import Tensor, no_grad, record_branches


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    checked: int
    details: list = field(default_factory=list)
    nonsmooth: list = field(default_factory=list)

    def __str__(self):
        return (f"grad_check: {self.checked} coords, max rel err {self.max_rel_error:.3e} at {self.worst}, "
                f"{len(self.nonsmooth)} skipped as non-smooth")


REFINE_STEPS = 3


def fd_step(x: float) -> float:
    return 1e-5 * max(1.0, abs(x))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-5,
               samples: int = 20, rng=None, floor: float = 1e-6,
               accept: Callable[[int, tuple], bool] | None = None,
               skip_nonsmooth: bool = False) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``fn(*inputs)`` with central differences.

    ``samples`` coordinates are drawn per input (all of them if the input is
    smaller). The relative error at a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. ``accept(input_index, coord)`` can veto
    coordinates, e.g. those sitting on a ReLU kink. With ``skip_nonsmooth``,
    when the two perturbed evaluations take different discrete branches (the
    stencil straddles a non-differentiable point) the step is shrunk tenfold,
    up to ``REFINE_STEPS`` times, until both sides agree; the refined estimate
    is then held to the same tolerance. Coordinates that still straddle a kink
    are listed in ``report.nonsmooth`` and not compared. Raises
    :class:`GradientCheckError` naming the offending coordinate.
    """
    rng = np.random.default_rng(rng)
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    def f():
        with no_grad(), record_branches() as log:
            value = float(fn(*inputs).data)
        return value, log

    def same_branches(a, b) -> bool:
        return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))

    worst, worst_err, checked, details, nonsmooth = None, 0.0, 0, [], []
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        flat = x.data.reshape(-1)
        if flat.size <= samples:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for j in idx:
            coord = np.unravel_index(j, x.shape)
            if accept is not None and not accept(i, coord):
                continue
            orig = flat[j]
            h = fd_step(orig)
            for attempt in range(REFINE_STEPS + 1 if skip_nonsmooth else 1):
                flat[j] = orig + h
                fp, bp = f()
                flat[j] = orig - h
                fm, bm = f()
                flat[j] = orig
                smooth = same_branches(bp, bm)
                if smooth or attempt == REFINE_STEPS:
                    break
                h /= 10
            if skip_nonsmooth and not smooth:
                nonsmooth.append((i, coord))
                continue
            num = (fp - fm) / (2 * h)
            a = float(analytic[i][coord])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            details.append((i, coord, a, num, err))
            if err > worst_err or worst is None:
                worst_err, worst = err, (i, coord)
            if err > tolerance:
                raise GradientCheckError(
                    f"gradient mismatch at input {i} coord {coord}: analytic {a:.10g} vs numeric {num:.10g} "
                    f"(rel err {err:.3e} > {tolerance:g})",
                    coordinate=(i, coord), analytic=a, numeric=num,
                )
    return GradCheckReport(worst_err, worst, checked, details, nonsmooth)
