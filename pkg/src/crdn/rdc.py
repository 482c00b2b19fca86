"""Recurrent decoding cells.

One :class:`RdcParams` instance is shared by every stage of the decoding
chain.  A step takes the previous score map (and, for ConvLSTM, cell state) at
resolution ``h x w`` plus the squeezed feature map at ``2h x 2w``, upsamples
the state with the operator ``T`` and fuses the two through a convolutional
recurrent cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor

VARIANTS = ("convrnn", "convlstm", "convgru")
UPSAMPLE_MODES = ("bilinear", "transposed")
GATE_MODES = ("sigmoid", "literal-relu")

# gate name -> (input-path weight, score-path weight, bias)
_GATES = {
    "convrnn": ("",),
    "convlstm": ("i", "f", "o", "g"),
    "convgru": ("r", "z", "s"),
}


def _weight_names(variant: str) -> list[str]:
    if variant == "convrnn":
        return ["w_s", "w_x", "b"]
    names = []
    for g in _GATES[variant]:
        names += [f"w_x{g}", f"w_s{g}"]
    return names + [f"b_{g}" for g in _GATES[variant]]


@dataclass
class RdcParams:
    """Shared decoder parameters.

    Kernels are ``[C, C, k, k]``; biases are ``[C]``.  In transposed upsample
    mode an extra bias-free ``[C, C, 2, 2]`` kernel ``t_weight`` realizes ``T``
    (no bias so that ``T(0) == 0``).
    """

    variant: str
    classes: int
    weights: dict = field(default_factory=dict)
    upsample: str = "bilinear"
    gates: str = "sigmoid"
    kernel_size: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RDC variant {self.variant!r}; expected one of {VARIANTS}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"unknown upsample mode {self.upsample!r}; expected one of {UPSAMPLE_MODES}")
        if self.gates not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.gates!r}; expected one of {GATE_MODES}")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        names = _weight_names(self.variant)
        if self.upsample == "transposed":
            names = names + ["t_weight"]
        for n in names:
            yield n, self.weights[n]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


@dataclass
class RdcState:
    """Score map and optional ConvLSTM cell state.

    ``upsampled=True`` marks a state that is already at the next input's
    resolution, so the step skips ``T``.  Only the zero initial state uses it.
    """

    score: Tensor
    cell: Optional[Tensor] = None
    upsampled: bool = False


def init_rdc_params(
    variant: str,
    classes: int,
    rng: np.random.Generator,
    upsample: str = "bilinear",
    gates: str = "sigmoid",
    kernel_size: int = 3,
    dtype=np.float32,
) -> RdcParams:
    """Fan-in scaled uniform kernels (bound sqrt(6 / fan_in)) and zero biases."""
    c, k = classes, kernel_size
    weights = {}
    bound = np.sqrt(6.0 / (c * k * k))
    for name in _weight_names(variant):
        if name.startswith("b"):
            weights[name] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"rdc.{name}")
        else:
            data = rng.uniform(-bound, bound, size=(c, c, k, k)).astype(dtype)
            weights[name] = Tensor(data, requires_grad=True, name=f"rdc.{name}")
    if upsample == "transposed":
        # start T as nearest-neighbour replication of each channel
        t = np.zeros((c, c, 2, 2), dtype=dtype)
        t[np.arange(c), np.arange(c)] = 1.0
        weights["t_weight"] = Tensor(t, requires_grad=True, name="rdc.t_weight")
    return RdcParams(variant, classes, weights, upsample, gates, kernel_size)


def decoder_param_formula(variant: str, classes: int, kernel_size: int = 3, upsample: str = "bilinear") -> int:
    """Closed-form scalar parameter count of one shared cell."""
    c, k2 = classes, kernel_size * kernel_size
    n_gates = len(_GATES[variant])
    n_kernels = 2 * n_gates
    count = n_kernels * k2 * c * c + n_gates * c
    if upsample == "transposed":
        count += 4 * c * c
    return count


def upsample_T(x: Tensor, params: RdcParams) -> Tensor:
    if params.upsample == "bilinear":
        return ops.bilinear_upsample2x(x)
    return ops.conv_transpose2d(x, params["t_weight"], None, stride=2, padding=0)


def _lift(t: Tensor, state: RdcState, params: RdcParams) -> Tensor:
    return t if state.upsampled else upsample_T(t, params)


def _check_step(state: RdcState, x: Tensor, params: RdcParams) -> None:
    c = params.classes
    s = state.score
    if s.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"RDC expects 4-D tensors, got state {s.shape} and input {x.shape}")
    if s.shape[1] != c or x.shape[1] != c:
        raise ShapeError(f"RDC expects {c} channels, got state {s.shape[1]} and input {x.shape[1]}")
    if s.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: state {s.shape[0]} vs input {x.shape[0]}")
    factor = 1 if state.upsampled else 2
    if x.shape[2] != factor * s.shape[2] or x.shape[3] != factor * s.shape[3]:
        raise ShapeError(
            f"input spatial dims {x.shape[2:]} must be exactly {factor}x the state's {s.shape[2:]}"
        )


def _conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    return ops.conv2d(x, w, b, stride=1, padding=w.shape[2] // 2)


def _gate_preactivations(x: Tensor, ts: Tensor, params: RdcParams, gates: tuple) -> list[Tensor]:
    """``W_x* (x) X + W_s* (x) T(S) + b_*`` for each gate, with one conv per path.

    Stacking the per-gate kernels along the output axis is equivalent to
    convolving with each separately and saves repeated im2col work.
    """
    wx = ops.concat([params[f"w_x{g}"] for g in gates], axis=0)
    ws = ops.concat([params[f"w_s{g}"] for g in gates], axis=0)
    b = ops.concat([params[f"b_{g}"] for g in gates], axis=0)
    pre = _conv(x, wx, b) + _conv(ts, ws)
    return ops.split(pre, len(gates), axis=1)


def _gate(x: Tensor, params: RdcParams) -> Tensor:
    return ops.sigmoid(x) if params.gates == "sigmoid" else ops.relu(x)


def rdc_convrnn_step(state: RdcState, x: Tensor, params: RdcParams) -> RdcState:
    """``S = ReLU(W_s (x) T(S_prev) + W_x (x) X + b)``."""
    _check_step(state, x, params)
    ts = _lift(state.score, state, params)
    return RdcState(ops.relu(_conv(ts, params["w_s"]) + _conv(x, params["w_x"], params["b"])))


def rdc_convlstm_step(state: RdcState, x: Tensor, params: RdcParams) -> RdcState:
    _check_step(state, x, params)
    if state.cell is None:
        raise ShapeError("ConvLSTM step needs a cell state")
    if state.cell.shape != state.score.shape:
        raise ShapeError(f"cell state {state.cell.shape} and score {state.score.shape} differ")
    ts = _lift(state.score, state, params)
    tc = _lift(state.cell, state, params)
    pi, pf, po, pg = _gate_preactivations(x, ts, params, _GATES["convlstm"])
    gi, gf, go = _gate(pi, params), _gate(pf, params), _gate(po, params)
    gg = ops.tanh(pg)
    cell = gf * tc + gi * gg
    return RdcState(go * ops.tanh(cell), cell)


def rdc_convgru_step(state: RdcState, x: Tensor, params: RdcParams) -> RdcState:
    _check_step(state, x, params)
    ts = _lift(state.score, state, params)
    gr_pre, gz_pre = _gate_preactivations(x, ts, params, ("r", "z"))
    gr, gz = _gate(gr_pre, params), _gate(gz_pre, params)
    candidate = ops.tanh(_conv(x, params["w_xs"], params["b_s"]) + gr * _conv(ts, params["w_ss"]))
    score = gz * ts + (1.0 - gz) * candidate
    return RdcState(score)


_STEPS = {
    "convrnn": rdc_convrnn_step,
    "convlstm": rdc_convlstm_step,
    "convgru": rdc_convgru_step,
}


def rdc_step(state: RdcState, x: Tensor, params: RdcParams) -> RdcState:
    try:
        step = _STEPS[params.variant]
    except KeyError:
        raise ValueError(f"unknown RDC variant {params.variant!r}") from None
    return step(state, x, params)


def initial_state(params: RdcParams, batch: int, height: int, width: int, dtype=np.float32) -> RdcState:
    """Zero score map (and zero cell state for ConvLSTM)."""
    shape = (batch, params.classes, height, width)
    score = Tensor(np.zeros(shape, dtype=dtype))
    cell = Tensor(np.zeros(shape, dtype=dtype)) if params.variant == "convlstm" else None
    return RdcState(score, cell)
