"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ParameterError
from .tensor import Tensor, backward, no_grad, record_kinks


@dataclass
class GroupResult:
    name: str
    coords: int = 0
    max_rel_err: float = 0.0
    worst_index: tuple = ()
    kinks: int = 0


@dataclass
class GradCheckReport:
    tol: float
    h: float
    groups: dict[str, GroupResult] = field(default_factory=dict)
    max_kink_fraction: float = 0.01

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values()), default=0.0)

    @property
    def kink_fraction(self) -> float:
        coords = sum(g.coords for g in self.groups.values())
        return sum(g.kinks for g in self.groups.values()) / coords if coords else 0.0

    @property
    def passed(self) -> bool:
        """Every group was actually probed, kinks are rare, and all errors are below ``tol``."""
        probed = all(g.coords > g.kinks for g in self.groups.values())
        return probed and self.kink_fraction <= self.max_kink_fraction and self.max_rel_err < self.tol

    def lines(self) -> list[str]:
        out = []
        for g in self.groups.values():
            verdict = "ok" if g.max_rel_err < self.tol and g.coords > g.kinks else "FAIL"
            out.append(
                f"{g.name:<20} coords={g.coords:<7d} max_rel_err={g.max_rel_err:.3e} kinks={g.kinks} {verdict}"
            )
        return out


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _masks_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x is y or np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-6,
    shrink: int = 3,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` reads the current values of ``params`` (mutated in place while
    probing). Parameters are grouped by the prefix before the first dot.

    A probe whose ReLU activation pattern differs from the unperturbed one
    crosses a kink, where the central difference is not a derivative
    estimate. Such probes are retried with h/10 up to ``shrink`` times; if
    they still cross they are counted under ``kinks`` and excluded.
    Relative error uses ``max(|a|, |n|, floor)`` as denominator so that
    vanishing gradients are compared absolutely at ``floor * tol``.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ParameterError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
        p.zero_grad()

    backward(f())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    # reference activation pattern, taken on the same no-grad path the probes use
    with no_grad(), record_kinks() as base_masks:
        f()

    def probe(p: Tensor, idx, step: float):
        orig = p.data[idx]
        values = []
        masks = []
        with no_grad():
            for s in (step, -step):
                p.data[idx] = orig + s
                with record_kinks() as m:
                    values.append(float(f().data))
                masks.append(m)
        p.data[idx] = orig
        if not all(np.isfinite(values)):
            raise NumericError(f"non-finite loss while probing index {idx}")
        smooth = _masks_equal(masks[0], base_masks) and _masks_equal(masks[1], base_masks)
        return (values[0] - values[1]) / (2 * step), smooth

    report = GradCheckReport(tol=tol, h=h)
    for name, p in params.items():
        group = name.split(".", 1)[0]
        res = report.groups.setdefault(group, GroupResult(group))
        a = analytic[name]
        for idx in np.ndindex(p.dims):
            step = h
            numeric, smooth = probe(p, idx, step)
            tries = 0
            while not smooth and tries < shrink:
                step /= 10
                numeric, smooth = probe(p, idx, step)
                tries += 1
            res.coords += 1
            if not smooth:
                res.kinks += 1
                continue
            err = relative_error(float(a[idx]), numeric, floor)
            if err > res.max_rel_err:
                res.max_rel_err = err
                res.worst_index = (name,) + idx
    return report
