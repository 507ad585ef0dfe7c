"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, mul, precision, tsum


class NotDifferentiableError(ArithmeticError):
    """Finite differences came out non-finite at the probe point."""


@dataclass
class GradReport:
    op_name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    worst_coordinate: list[int] = field(default_factory=list)

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.op_name}: max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g}) at {self.worst_coordinate}"


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return tsum(mul(out, Tensor(weights)))


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
    name: str | None = None,
) -> GradReport:
    """Compare ``op``'s analytic gradients with central differences in 64-bit mode.

    Non-scalar outputs are reduced with a fixed random weighting so every output
    coordinate contributes. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    op_name = name or getattr(op, "__name__", "op")
    with precision("float64"):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        if not all(np.isfinite(a).all() for a in arrays):
            raise ValueError("grad_check inputs must be finite")

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
        weights = None
        if out.size != 1:
            weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss = _scalarize(out, weights)
        analytic = [np.zeros_like(a) for a in arrays]
        if loss.requires_grad:
            loss.backward()
            analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

        def evaluate(values: list[np.ndarray]) -> float:
            return float(_scalarize(op(*[Tensor(v) for v in values]), weights).data)

        worst, worst_at = 0.0, []
        for i, base in enumerate(arrays):
            for coord in np.ndindex(base.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i][coord] += step
                minus[i][coord] -= step
                try:
                    numeric = (evaluate(plus) - evaluate(minus)) / (2 * step)
                except NonFiniteError as exc:
                    raise NotDifferentiableError(f"{op_name}: non-finite value near input {i}{list(coord)}") from exc
                if not np.isfinite(numeric):
                    raise NotDifferentiableError(f"{op_name}: non-finite difference quotient at input {i}{list(coord)}")
                a = float(analytic[i][coord])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err > worst or not worst_at:
                    worst, worst_at = err, [i, *coord]
    return GradReport(op_name, worst, tolerance, worst <= tolerance, worst_at)
