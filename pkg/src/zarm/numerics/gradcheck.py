"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor, record_kinks

#: Minimum denominator of the relative error.
REL_FLOOR = 1e-6
#: Round-off in a central difference is about eps*|L|/h; differences within
#: this many multiples of that noise cannot be resolved and are not errors.
NOISE_MULTIPLE = 10.0


class DeterminismError(RuntimeError):
    """The loss function returned different values for identical parameters."""


@dataclass
class TensorReport:
    path: str
    checked: int
    skipped_kinks: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    max_abs_error: float = 0.0


@dataclass
class GradCheckReport:
    tol: float
    h: float
    floor: float = REL_FLOOR
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.max_rel_error < self.tol for t in self.tensors)

    @property
    def worst(self) -> TensorReport | None:
        if not self.tensors:
            return None
        return max(self.tensors, key=lambda t: t.max_rel_error)

    def failures(self) -> list[TensorReport]:
        return [t for t in self.tensors if not t.max_rel_error < self.tol]


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def noise_floor(loss_value: float, h: float, tol: float) -> float:
    """Smallest gradient magnitude whose relative error at ``tol`` is resolvable.

    A central difference on a loss of size |L| carries round-off of roughly
    eps*|L|/h. Below ``NOISE_MULTIPLE`` times that, divided by ``tol``, the
    relative error measures round-off rather than the gradient, so the
    comparison becomes absolute at the noise level.
    """
    noise = NOISE_MULTIPLE * np.finfo(np.float64).eps * max(1.0, abs(loss_value)) / h
    return max(REL_FLOOR, noise / tol)


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    with record_kinks() as kinks:
        value = float(loss_fn().data)
    return value, kinks


def grad_check(
    params: ParamStore,
    loss_fn: Callable[[], Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 64,
    rng: np.random.Generator | None = None,
    paths: list[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients with central differences, tensor by tensor.

    ``loss_fn`` must rebuild the loss from the current parameter values each
    call. Tensors with at most ``max_entries`` scalars are checked exhaustively;
    larger ones get ``max_entries`` sampled entries, half drawn from entries
    with a non-zero analytic gradient so sparse lookups are actually exercised.

    An entry whose +-h perturbation flips any relu/max/clip branch has no
    meaningful central difference; it is counted in ``skipped_kinks`` instead.
    Shrinking the step would not help: below h=1e-5 round-off dominates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    base_value = float(loss.data)
    tape.backward(loss)
    again, base_kinks = _evaluate(loss_fn)
    if again != base_value:
        raise DeterminismError(f"loss changed between evaluations: {base_value!r} vs {again!r}")

    floor = noise_floor(base_value, h, tol)
    report = GradCheckReport(tol=tol, h=h, floor=floor)
    for path in paths if paths is not None else params.paths():
        t = params[path]
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if n <= max_entries:
            picks = np.arange(n)
        else:
            nonzero = np.flatnonzero(gflat)
            k = min(len(nonzero), max_entries // 2)
            chosen = list(rng.choice(nonzero, size=k, replace=False)) if k else []
            rest = np.setdiff1d(np.arange(n), chosen)
            chosen += list(rng.choice(rest, size=max_entries - k, replace=False))
            picks = np.sort(np.asarray(chosen, dtype=np.int64))

        worst, worst_abs, worst_idx, skipped, checked = 0.0, 0.0, None, 0, 0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, k_plus = _evaluate(loss_fn)
            flat[i] = orig - h
            f_minus, k_minus = _evaluate(loss_fn)
            flat[i] = orig
            if k_plus != base_kinks or k_minus != base_kinks:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            checked += 1
            err = relative_error(float(gflat[i]), numeric, floor)
            worst_abs = max(worst_abs, abs(float(gflat[i]) - numeric))
            if err > worst or worst_idx is None:
                worst = max(worst, err)
                worst_idx = tuple(int(v) for v in np.unravel_index(i, t.shape))
        report.tensors.append(TensorReport(path, checked, skipped, worst, worst_idx, worst_abs))
    params.zero_grad()
    return report
