"""Finite-difference verification suite over every differentiable primitive and every loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import attention
from .numerics import GradReport, grad_check, precision
from .objectives import ItcHead, ItmHead, MlmHead, combined_loss, itc_loss, itm_loss, mlm_loss

Sampler = Callable[[np.random.Generator], list[np.ndarray]]


@dataclass
class Check:
    name: str
    op: Callable[..., nx.Tensor]
    sample: Sampler


def _normal(*shape):
    return lambda rng: [rng.standard_normal(s) for s in shape]


def _primitive_checks() -> list[Check]:
    positive = lambda rng: [rng.uniform(0.5, 2.0, (3, 4))]
    mask = np.array([[False, True, False, False], [False, False, False, True], [True, False, False, False]])
    idx = np.array([2, 0, 2, 1])
    return [
        Check("add", nx.add, _normal((3, 4), (4,))),
        Check("sub", nx.sub, _normal((3, 4), (3, 1))),
        Check("mul", nx.mul, _normal((3, 4), (3, 4))),
        Check("div", nx.div, lambda rng: [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))
                                          * rng.choice([-1.0, 1.0], (3, 4))]),
        Check("exp", nx.exp, _normal((3, 4))),
        Check("log", nx.log, positive),
        Check("tanh", nx.tanh, _normal((3, 4))),
        Check("gelu", nx.gelu, _normal((3, 4))),
        Check("reshape", lambda x: nx.reshape(x, (4, 3)), _normal((3, 4))),
        Check("transpose", lambda x: nx.transpose(x, (2, 0, 1)), _normal((2, 3, 4))),
        Check("swapaxes", lambda x: nx.swapaxes(x, 0, 2), _normal((2, 3, 4))),
        Check("concat", lambda a, b: nx.concat([a, b], axis=1), _normal((2, 3), (2, 2))),
        Check("broadcast_to", lambda x: nx.broadcast_to(x, (3, 4)), _normal((1, 4))),
        Check("getitem_basic", lambda x: x[1:, ::2], _normal((3, 4))),
        Check("getitem_fancy", lambda x: x[np.array([0, 2, 0]), np.array([1, 3, 1])], _normal((3, 4))),
        Check("take", lambda x: nx.take(x, idx, axis=0), _normal((3, 4))),
        Check("sum", lambda x: nx.tsum(x, axis=1), _normal((3, 4))),
        Check("mean", lambda x: nx.mean(x, axis=0, keepdims=True), _normal((3, 4))),
        Check("matmul", nx.matmul, _normal((3, 4), (4, 2))),
        Check("matmul_batched", nx.matmul, _normal((2, 3, 4), (2, 4, 2))),
        Check("matmul_weight", nx.matmul, _normal((2, 3, 4), (4, 2))),
        Check("softmax", lambda x: nx.softmax(x, axis=-1), _normal((3, 4))),
        Check("softmax_masked", lambda x: nx.softmax(x, axis=-1, exclude=mask), _normal((3, 4))),
        Check("log_softmax", lambda x: nx.log_softmax(x, axis=-1), _normal((3, 4))),
        Check("layer_norm", nx.layer_norm, _normal((3, 4), (4,), (4,))),
        Check("l2_normalize", nx.l2_normalize, _normal((3, 4))),
        Check("cross_entropy", lambda x: nx.cross_entropy(x, np.array([0, 3, 1])), _normal((3, 4))),
        Check("attention", lambda q, k, v: attention(q, k, v, np.array([False, False, True, False])),
              _normal((2, 3, 4), (2, 4, 4), (2, 4, 4))),
    ]


def _loss_checks() -> list[Check]:
    rng = np.random.default_rng(123)
    with precision("float64"):
        mlm_head = MlmHead(4, 7, rng)
        itm_head = ItmHead(4, rng)
        itc_head = ItcHead(4, 4, rng)
    rows, positions, labels = np.array([0, 0, 1]), np.array([1, 2, 0]), np.array([5, 6, 5])
    itm_labels = np.array([1, 0, 0, 1])

    def mlm(zl):
        return mlm_loss(zl, rows, positions, labels, mlm_head).loss

    def itm(zv, zl):
        return itm_loss(zv, zl, itm_labels, itm_head)

    def itc(zv, zl):
        return itc_loss(itc_head(zv, "vision"), itc_head(zl, "language"), 0.5)

    def total(zl, zv_cls, zl_cls):
        parts = {"mlm": mlm(zl), "itm": itm(zv_cls, zl_cls), "itc": itc(zv_cls, zl_cls)}
        return combined_loss(parts, {"mlm": 1.0, "itm": 0.5, "itc": 2.0}).total

    return [
        Check("loss_mlm", mlm, _normal((2, 3, 4))),
        Check("loss_itm", itm, _normal((4, 4), (4, 4))),
        Check("loss_itc", itc, _normal((4, 4), (4, 4))),
        Check("loss_combined", total, _normal((2, 3, 4), (4, 4), (4, 4))),
    ]


def all_checks() -> list[Check]:
    return _primitive_checks() + _loss_checks()


@dataclass
class SuiteResult:
    reports: list[GradReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def run_suite(points: int = 5, tolerance: float = 1e-4, seed: int = 0) -> SuiteResult:
    """Check every entry of ``all_checks`` at ``points`` random inputs; one report per (check, point)."""
    start = time.perf_counter()
    reports = []
    for i, check in enumerate(all_checks()):
        for p in range(points):
            rng = np.random.default_rng([seed, i, p])
            report = grad_check(check.op, check.sample(rng), tolerance=tolerance, seed=p, name=f"{check.name}#{p}")
            reports.append(report)
    return SuiteResult(reports, time.perf_counter() - start)
