"""The finite-difference gradient suite run by ``crdn grad-check``.

Every differentiable op and every recurrent cell (in both gate modes) is
checked on a small double-precision instance, followed by one end-to-end
check of a toy CRDN.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .gradcheck import GradCheckResult, finite_diff_check
from .model import CRDN, CrdnConfig
from .ops import BatchNormState
from .rdc import GATE_MODES, UPSAMPLE_MODES, VARIANTS, RdcState, init_rdc_params, rdc_step
from .tensor import Tensor


@dataclass
class SuiteCase:
    name: str
    result: GradCheckResult
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.result.passed(tol)

    def to_dict(self, tol: float) -> dict:
        r = self.result
        return {
            "name": self.name,
            "passed": self.passed(tol),
            "max_rel_error": r.max_rel_error,
            "mean_rel_error": r.mean_rel_error,
            "checked": r.checked,
            "skipped_kinks": r.skipped_kinks,
            "seconds": round(self.seconds, 4),
        }


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list]]:
    """Name -> (scalar function, leaves).  A random probe tensor makes each sum non-trivial."""
    cases = {}

    def probe(shape):
        return Tensor(rng.standard_normal(shape))

    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 4)
    pa = probe((2, 3, 4, 4))
    cases["add"] = (lambda: ops.sum_all(ops.add(a, b) * pa), [a, b])
    cases["sub"] = (lambda: ops.sum_all(ops.sub(a, b) * pa), [a, b])
    cases["mul"] = (lambda: ops.sum_all(ops.mul(a, b) * pa), [a, b])
    cases["sum_all"] = (lambda: ops.sum_all(a), [a])

    c1, c2 = _leaf(rng, 1, 2, 3, 3), _leaf(rng, 1, 3, 3, 3)
    pc = probe((1, 5, 3, 3))
    cases["concat"] = (lambda: ops.sum_all(ops.concat([c1, c2], axis=1) * pc), [c1, c2])
    s = _leaf(rng, 1, 6, 3, 3)
    ps = [probe((1, 2, 3, 3)) for _ in range(3)]
    cases["split"] = (lambda: ops.sum_all(ops.concat([p * t for p, t in zip(ps, ops.split(s, 3))], axis=1)), [s])

    x = _leaf(rng, 2, 3, 5, 5)
    px = probe((2, 3, 5, 5))
    for kind in ("relu", "sigmoid", "tanh"):
        cases[kind] = (lambda kind=kind: ops.sum_all(ops.activation(x, kind) * px), [x])

    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        xi, w, bias = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        out_hw = ops.conv_output_size(6, 3, stride, pad)
        pw = probe((2, 4, out_hw, out_hw))
        cases[f"conv2d[s{stride}p{pad}]"] = (
            lambda xi=xi, w=w, bias=bias, stride=stride, pad=pad, pw=pw:
            ops.sum_all(ops.conv2d(xi, w, bias, stride, pad) * pw),
            [xi, w, bias],
        )
    squeeze_x, squeeze_w, squeeze_b = _leaf(rng, 1, 5, 6, 6), _leaf(rng, 3, 5, 5, 5, scale=0.2), _leaf(rng, 3)
    psq = probe((1, 3, 6, 6))
    cases["conv2d[5x5,p2]"] = (
        lambda: ops.sum_all(ops.conv2d(squeeze_x, squeeze_w, squeeze_b, 1, 2) * psq),
        [squeeze_x, squeeze_w, squeeze_b],
    )

    for k, pad in ((2, 0), (4, 1)):
        xt, wt, bt = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 3, 2, k, k), _leaf(rng, 2)
        pt = probe((2, 2, 6, 6))
        cases[f"conv_transpose2d[k{k}p{pad}]"] = (
            lambda xt=xt, wt=wt, bt=bt, pad=pad, pt=pt:
            ops.sum_all(ops.conv_transpose2d(xt, wt, bt, 2, pad) * pt),
            [xt, wt, bt],
        )

    xb = _leaf(rng, 2, 3, 3, 5)
    pb = probe((2, 3, 6, 10))
    cases["bilinear_upsample2x"] = (lambda: ops.sum_all(ops.bilinear_upsample2x(xb) * pb), [xb])

    xm = _leaf(rng, 2, 3, 6, 6)
    pm = probe((2, 3, 3, 3))
    cases["maxpool2d"] = (lambda: ops.sum_all(ops.maxpool2d(xm) * pm), [xm])

    xn, gamma, beta = _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
    pn = probe((3, 2, 4, 4))
    cases["batchnorm2d[train]"] = (
        lambda: ops.sum_all(ops.batchnorm2d(xn, gamma, beta, BatchNormState.create(2, np.float64), True) * pn),
        [xn, gamma, beta],
    )
    running = BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2))
    cases["batchnorm2d[eval]"] = (
        lambda: ops.sum_all(ops.batchnorm2d(xn, gamma, beta, running, False) * pn),
        [xn, gamma, beta],
    )

    logits = _leaf(rng, 2, 4, 3, 3, scale=2.0)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    cases["softmax_cross_entropy[mean]"] = (lambda: ops.softmax_cross_entropy(logits, labels), [logits])
    cases["softmax_cross_entropy[sum]"] = (lambda: ops.softmax_cross_entropy(logits, labels, "sum"), [logits])
    return cases


def _cell_case(variant: str, gates: str, upsample: str, rng: np.random.Generator):
    params = init_rdc_params(variant, 2, rng, upsample=upsample, gates=gates, dtype=np.float64)
    for name, p in params.named_parameters():
        if name.startswith("b"):
            p.data = rng.standard_normal(p.shape) * 0.3
    score = _leaf(rng, 1, 2, 2, 2)
    cell = _leaf(rng, 1, 2, 2, 2) if variant == "convlstm" else None
    x1, x2 = _leaf(rng, 1, 2, 4, 4), _leaf(rng, 1, 2, 8, 8)
    probe = Tensor(rng.standard_normal((1, 2, 8, 8)))

    def f():
        st = rdc_step(RdcState(score, cell), x1, params)
        st = rdc_step(st, x2, params)
        return ops.sum_all(st.score * probe)

    leaves = params.parameters() + [score, x1, x2] + ([cell] if cell is not None else [])
    return f, leaves


def _model_case(base: CrdnConfig, rng: np.random.Generator):
    cfg = CrdnConfig(
        classes=3, modalities=2, stages=2, variant=base.variant, upsample=base.upsample,
        gates=base.gates, kernel_size=base.kernel_size, precision="double", seed=base.seed,
    )
    model = CRDN(cfg)
    image = rng.standard_normal((2, 2, 16, 16))
    labels = rng.integers(0, 3, size=(2, 16, 16))

    def f():
        return model.loss(model.forward(image, training=True)[-1], labels)

    return f, model.parameters()


def run_suite(config: Optional[CrdnConfig] = None, eps: float = 1e-5, seed: int = 0,
              max_coords: int = 12, model_coords: int = 3) -> list[SuiteCase]:
    """Run every case; each draws from its own ``default_rng([seed, i])`` stream."""
    config = config or CrdnConfig()
    builders: list[tuple[str, Callable]] = []
    op_rng = np.random.default_rng([seed, 0])
    for name, case in _op_cases(op_rng).items():
        builders.append((f"op:{name}", lambda case=case: case))
    i = 1
    for variant in VARIANTS:
        for gates in GATE_MODES:
            for upsample in UPSAMPLE_MODES:
                cell_rng = np.random.default_rng([seed, i])
                builders.append((f"cell:{variant}/{gates}/{upsample}",
                                 lambda v=variant, g=gates, u=upsample, r=cell_rng: _cell_case(v, g, u, r)))
                i += 1
    model_rng = np.random.default_rng([seed, i])
    builders.append((f"model:{config.variant}/{config.gates}/{config.upsample}", lambda: _model_case(config, model_rng)))

    results = []
    for name, build in builders:
        f, leaves = build()
        coords = model_coords if name.startswith("model:") else max_coords
        start = time.perf_counter()
        res = finite_diff_check(f, leaves, eps=eps, max_coords=coords, seed=seed)
        results.append(SuiteCase(name, res, time.perf_counter() - start))
    return results
