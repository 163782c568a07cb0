"""Named finite-difference checks covering every differentiable op and
every training loss term.

Each case builds a tiny random 64-bit instance, runs `grad_check`
against central differences, and reports the worst relative error.  The
whole suite is the backing for the `gradcheck` CLI subcommand and is
pinned to finish well inside two minutes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Minibatch
from .layers import ConvLayer, conv2d_dilated
from .losses import ce_loss, class_weights, total_loss, weight_constraint
from .model import ArchSpec, BRANCH_NAMES, FctnModel
from .tensor import GradCheckReport, Tensor, grad_check

SUITE_SPEC = ArchSpec(
    base_layers=((3, 3, 1), (4, 3, 2)),
    branch_layers=((3, 3, 2), (4, 1, 1)),
    num_classes=4,
    input_channels=2,
)


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    @property
    def worst(self) -> float:
        return self.report.worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _positive(rng, *shape):
    return Tensor(rng.random(shape) + 0.5, requires_grad=True)


def _away_from_zero(rng, *shape):
    # relu is non-differentiable at 0; keep probes off the kink
    data = rng.standard_normal(shape)
    data += np.where(data >= 0, 0.5, -0.5)
    return Tensor(data, requires_grad=True)


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], Sequence[Tensor]]]:
    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    s = _rand(rng)
    m1 = _rand(rng, 3, 5)
    m2 = _rand(rng, 5, 2)
    r = _away_from_zero(rng, 4, 3)
    e = _rand(rng, 2, 3)
    p = _positive(rng, 2, 3)
    c1 = _rand(rng, 2, 3)
    c2 = _rand(rng, 4, 3)
    logits = _rand(rng, 2, 3, 5)

    def rsum(x):
        return T.tsum(x)

    return [
        ("add", lambda: rsum(T.mul(T.add(a, b), b)), [a, b]),
        ("add_scalar", lambda: rsum(T.mul(T.add(a, s), a)), [a, s]),
        ("sub", lambda: rsum(T.mul(T.sub(a, b), a)), [a, b]),
        ("mul", lambda: rsum(T.mul(a, b)), [a, b]),
        ("mul_scalar", lambda: rsum(T.mul(a, s)), [a, s]),
        ("negate", lambda: rsum(T.mul(T.negate(a), b)), [a]),
        ("relu", lambda: rsum(T.mul(T.relu(r), r)), [r]),
        ("exp", lambda: rsum(T.exp(e)), [e]),
        ("log", lambda: rsum(T.log(p)), [p]),
        ("matmul", lambda: rsum(T.matmul(m1, m2)), [m1, m2]),
        ("sum_all", lambda: T.tsum(T.mul(a, a)), [a]),
        ("sum_axis", lambda: rsum(T.mul(T.tsum(logits, axis=-1), T.tsum(logits, axis=-1))), [logits]),
        ("reshape", lambda: rsum(T.mul(T.reshape(a, (4, 3)), T.reshape(b, (4, 3)))), [a, b]),
        ("concat", lambda: rsum(T.mul(T.concat([c1, c2], axis=0), T.concat([c1, c2], axis=0))), [c1, c2]),
        ("softmax_channel", lambda: rsum(T.mul(T.softmax_channel(logits), logits)), [logits]),
    ]


def _conv_cases(rng) -> list[tuple[str, Callable[[], Tensor], Sequence[Tensor], Sequence[str]]]:
    cases = []
    for tag, (kh, kw, dilation, cin, cout) in (
        ("conv3x3_d2", (3, 3, 2, 2, 3)),
        ("conv1x1", (1, 1, 1, 3, 2)),
    ):
        x = _rand(rng, 5, 6, cin)
        layer = ConvLayer(
            kernel=Tensor(0.3 * rng.standard_normal((kh, kw, cin, cout)), requires_grad=True),
            bias=Tensor(0.1 * rng.standard_normal(cout), requires_grad=True),
            dilation=dilation,
        )
        probe = Tensor(rng.standard_normal((5, 6, cout)))

        def f(x=x, layer=layer, probe=probe):
            return T.tsum(T.mul(conv2d_dilated(x, layer), probe))

        cases.append((tag, f, [x, layer.kernel, layer.bias], ["input", "kernel", "bias"]))
    return cases


def _loss_cases(rng) -> list[tuple[str, Callable[[], Tensor], Sequence[Tensor], Sequence[str]]]:
    h, w, c = 4, 5, 4
    masks = rng.integers(0, c, size=(2, h, w)).astype(np.uint8)
    masks[0, 0, :2] = 255  # exercise ignore pixels
    images = rng.random((2, h, w, SUITE_SPEC.input_channels))
    weights = class_weights(masks, c)
    source = Minibatch(images, masks, "source")
    target = Minibatch(images[::-1].copy(), masks[::-1].copy(), "pseudo-target")

    logits = _rand(rng, h, w, c)
    wce = ("weighted_cross_entropy", lambda: ce_loss(logits, masks[0], weights), [logits], ["logits"])

    model = FctnModel.create(SUITE_SPEC, seed=7, dtype=np.float64)
    params = list(model.params.names())
    tensors = [model.params.get(n) for n in params]

    cases = [
        wce,
        (
            "weight_constraint",
            lambda: weight_constraint(model),
            tensors,
            params,
        ),
        (
            "pretrain_total",
            lambda: total_loss(model, source, alpha=2.0, source_branches=BRANCH_NAMES).total,
            tensors,
            params,
        ),
        (
            "curriculum_total",
            lambda: total_loss(model, source, target, weights=weights, alpha=2.0, beta=0.5).total,
            tensors,
            params,
        ),
    ]
    return cases


def run_suite(seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4) -> list[SuiteResult]:
    """Run every named case and return its report, in a fixed order."""
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params in _op_cases(rng):
        results.append(SuiteResult(name, grad_check(f, params, step, tolerance)))
    for name, f, params, labels in _conv_cases(rng) + _loss_cases(rng):
        results.append(SuiteResult(name, grad_check(f, params, step, tolerance, names=labels)))
    return results


def format_results(results: Sequence[SuiteResult]) -> list[str]:
    lines = []
    for res in results:
        status = "ok  " if res.passed else "FAIL"
        lines.append(f"{status} {res.name}: worst rel err {res.worst:.3e}")
    n_bad = sum(not r.passed for r in results)
    lines.append(
        f"{len(results) - n_bad}/{len(results)} gradient cases passed"
        + ("" if n_bad == 0 else f"; {n_bad} FAILED")
    )
    return lines


def suite_passed(results: Sequence[SuiteResult]) -> bool:
    return all(r.passed for r in results)
