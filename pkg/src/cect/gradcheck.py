"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ParameterError
from .functional import cross_entropy, record_kinks
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: int
    worst_index: tuple[int, ...]
    n_checked: int
    tol: float
    details: list[dict] = field(default_factory=list)
    n_kinked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_tensor": self.worst_tensor,
            "worst_index": list(self.worst_index),
            "n_checked": self.n_checked,
            "n_kinked": self.n_kinked,
            "tol": self.tol,
            "passed": self.passed,
        }


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated after each in-place perturbation of an input, so it
    must read the inputs' current data. With ``max_coords`` set, that many
    coordinates per input are sampled instead of checking every one.

    A coordinate whose +eps and -eps evaluations switch any ReLU is not
    differentiable within the stencil; it is counted in ``n_kinked`` and,
    when sampling, replaced by the next random coordinate.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ParameterError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    try:
        loss = f()
    except NonFiniteError as exc:
        raise NonFiniteError(f"grad_check: forward pass failed: {exc}") from exc
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = (0.0, 0, ())
    details = []
    n_checked = n_kinked = 0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        order = np.arange(flat.size)
        quota = flat.size
        if max_coords is not None and flat.size > max_coords:
            order = rng.permutation(flat.size)
            quota = max_coords
        done = 0
        for c in order:
            if done == quota:
                break
            orig = flat[c]
            flat[c] = orig + eps
            with record_kinks() as up_kinks:
                up = f().item()
            flat[c] = orig - eps
            with record_kinks() as down_kinks:
                down = f().item()
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"grad_check: non-finite loss perturbing input {ti} at flat index {c}")
            if any(not np.array_equal(a, b) for a, b in zip(up_kinks, down_kinks)):
                n_kinked += 1  # a ReLU switched inside the stencil: no derivative to compare
                continue
            numeric = (up - down) / (2 * eps)
            a = float(analytic[ti].reshape(-1)[c])
            err = relative_error(a, numeric, floor)
            index = tuple(int(i) for i in np.unravel_index(c, t.shape))
            details.append({"tensor": ti, "index": index, "analytic": a, "numeric": numeric, "rel_err": err})
            n_checked += 1
            done += 1
            if err > worst[0]:
                worst = (err, ti, index)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, tol, details, n_kinked)


def check_model(model, images: np.ndarray, labels: np.ndarray, coords_per_tensor: int = 2,
                seed: int = 0, eps: float = 1e-5, tol: float = 1e-3, include_input: bool = True) -> GradCheckReport:
    """Gradient-check cross-entropy of a model in float64.

    The model is cast to float64 in place. A few coordinates of every
    parameter (and of the input batch) are perturbed.
    """
    model.astype(np.float64)
    x = Tensor(np.asarray(images, dtype=np.float64))
    inputs = list(model.parameters()) + ([x] if include_input else [])
    return grad_check(
        lambda: cross_entropy(model(x), labels),
        inputs,
        eps=eps,
        tol=tol,
        max_coords=coords_per_tensor,
        rng=np.random.default_rng(seed),
    )
