import math

import numpy as np
import pytest

from crdn import ops
from crdn.errors import ShapeError
from crdn.gradcheck import finite_diff_check
from crdn.rdc import (
    RdcParams,
    RdcState,
    decoder_param_formula,
    init_rdc_params,
    initial_state,
    rdc_convgru_step,
    rdc_convlstm_step,
    rdc_convrnn_step,
    rdc_step,
    upsample_T,
)
from crdn.tensor import Tensor

from oracles import bilinear_loops, conv2d_loops, max_rel_err, relu, sigmoid


def make(variant, c=2, seed=0, gates="sigmoid", upsample="bilinear", dtype=np.float64, bias_scale=0.3):
    rng = np.random.default_rng(seed)
    p = init_rdc_params(variant, c, rng, upsample=upsample, gates=gates, dtype=dtype)
    for name, t in p.named_parameters():
        if name.startswith("b"):
            t.data = (rng.standard_normal(t.shape) * bias_scale).astype(dtype)
    return p


def zero_params(variant, c=2, gates="sigmoid"):
    p = make(variant, c, gates=gates)
    for _, t in p.named_parameters():
        t.data = np.zeros_like(t.data)
    return p


def state_for(variant, rng, n=1, c=2, h=2, w=2):
    s = Tensor(rng.standard_normal((n, c, h, w)))
    cell = Tensor(rng.standard_normal((n, c, h, w))) if variant == "convlstm" else None
    return RdcState(s, cell)


# ---------------------------------------------------------------- upsample T

def test_T_bilinear_constant():
    p = make("convrnn", 3)
    out = upsample_T(Tensor(np.full((1, 3, 3, 3), 0.7)), p)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


@pytest.mark.parametrize("mode", ["bilinear", "transposed"])
def test_T_zero_is_fixed(mode):
    p = make("convrnn", 4, upsample=mode)
    out = upsample_T(Tensor(np.zeros((2, 4, 3, 5))), p)
    assert out.shape == (2, 4, 6, 10)
    assert not out.data.any()


def test_T_transposed_starts_as_nearest_neighbour():
    p = make("convgru", 2, upsample="transposed")
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    out = upsample_T(Tensor(x), p).data
    np.testing.assert_array_equal(out, x.repeat(2, axis=2).repeat(2, axis=3))


# ---------------------------------------------------------------- ConvRNN

def test_convrnn_zero_weights_give_zero():
    p = zero_params("convrnn")
    rng = np.random.default_rng(1)
    out = rdc_convrnn_step(state_for("convrnn", rng), Tensor(rng.standard_normal((1, 2, 4, 4))), p)
    assert not out.score.data.any()


def test_convrnn_output_shape():
    p = make("convrnn", 4, dtype=np.float32)
    s = initial_state(p, 1, 4, 4)
    out = rdc_convrnn_step(s, Tensor(np.ones((1, 4, 8, 8), dtype=np.float32)), p)
    assert out.score.shape == (1, 4, 8, 8)
    assert out.cell is None


@pytest.mark.parametrize("seed", range(50))
def test_convrnn_equals_concat_conv_relu(seed):
    rng = np.random.default_rng(1000 + seed)
    c = int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = make("convrnn", c, seed=seed, dtype=np.float32)
    s = Tensor(rng.standard_normal((1, c, h, w)).astype(np.float32))
    x = Tensor(rng.standard_normal((1, c, 2 * h, 2 * w)).astype(np.float32))
    out = rdc_convrnn_step(RdcState(s), x, p).score.data
    stacked = np.concatenate([ops.bilinear_upsample2x(s).data, x.data], axis=1).astype(np.float64)
    kernel = np.concatenate([p["w_s"].data, p["w_x"].data], axis=1).astype(np.float64)
    ref = np.maximum(conv2d_loops(stacked, kernel, p["b"].data, pad=1), 0.0)
    assert max_rel_err(out, ref) < 1e-6


def test_convrnn_rejects_spatial_mismatch():
    p = make("convrnn")
    with pytest.raises(ShapeError, match="exactly 2x"):
        rdc_convrnn_step(RdcState(Tensor(np.zeros((1, 2, 2, 2)))), Tensor(np.zeros((1, 2, 5, 4))), p)


def test_rejects_wrong_channel_count():
    p = make("convrnn", 3)
    with pytest.raises(ShapeError, match="channels"):
        rdc_convrnn_step(RdcState(Tensor(np.zeros((1, 2, 2, 2)))), Tensor(np.zeros((1, 2, 4, 4))), p)


# ---------------------------------------------------------------- per-pixel oracles

def _pre(p, gate, x, ts):
    """Gate pre-activation from loop convolutions, float64."""
    return (conv2d_loops(x, p[f"w_x{gate}"].data, p[f"b_{gate}"].data, pad=1)
            + conv2d_loops(ts, p[f"w_s{gate}"].data, pad=1))


def lstm_oracle(p, s, cell, x):
    ts, tc = bilinear_loops(s), bilinear_loops(cell)
    act = sigmoid if p.gates == "sigmoid" else relu
    pi, pf, po, pg = (_pre(p, g, x, ts) for g in "ifog")
    S, Cn = np.zeros_like(x), np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        i, f, o = act(pi[idx]), act(pf[idx]), act(po[idx])
        g = math.tanh(pg[idx])
        Cn[idx] = f * tc[idx] + i * g
        S[idx] = o * math.tanh(Cn[idx])
    return S, Cn


def gru_oracle(p, s, x):
    ts = bilinear_loops(s)
    act = sigmoid if p.gates == "sigmoid" else relu
    pr, pz = _pre(p, "r", x, ts), _pre(p, "z", x, ts)
    xs = conv2d_loops(x, p["w_xs"].data, p["b_s"].data, pad=1)
    ss = conv2d_loops(ts, p["w_ss"].data, pad=1)
    S = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        r, z = act(pr[idx]), act(pz[idx])
        cand = math.tanh(xs[idx] + r * ss[idx])
        S[idx] = z * ts[idx] + (1 - z) * cand
    return S


@pytest.mark.parametrize("gates", ["sigmoid", "literal-relu"])
@pytest.mark.parametrize("seed", range(3))
def test_convlstm_matches_scalar_oracle(gates, seed):
    rng = np.random.default_rng(seed)
    p = make("convlstm", 2, seed=seed, gates=gates)
    st = state_for("convlstm", rng)
    x = rng.standard_normal((1, 2, 4, 4))
    out = rdc_convlstm_step(st, Tensor(x), p)
    S, Cn = lstm_oracle(p, st.score.data, st.cell.data, x)
    assert out.score.shape == out.cell.shape == (1, 2, 4, 4)
    assert max_rel_err(out.score.data, S) < 1e-12
    assert max_rel_err(out.cell.data, Cn) < 1e-12


@pytest.mark.parametrize("gates", ["sigmoid", "literal-relu"])
@pytest.mark.parametrize("seed", range(3))
def test_convgru_matches_scalar_oracle(gates, seed):
    rng = np.random.default_rng(seed)
    p = make("convgru", 2, seed=seed, gates=gates)
    st = state_for("convgru", rng)
    x = rng.standard_normal((1, 2, 4, 4))
    out = rdc_convgru_step(st, Tensor(x), p)
    assert max_rel_err(out.score.data, gru_oracle(p, st.score.data, x)) < 1e-12


def test_convlstm_zero_weights():
    p = zero_params("convlstm")
    st = initial_state(p, 1, 2, 2, dtype=np.float64)
    out = rdc_convlstm_step(st, Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4))), p)
    assert not out.score.data.any()
    assert not out.cell.data.any()


def test_convlstm_zero_weights_gate_values():
    # with all-zero parameters the preactivations vanish, so sigmoid gates sit at 0.5
    p = zero_params("convlstm")
    rng = np.random.default_rng(0)
    st = state_for("convlstm", rng)
    out = rdc_convlstm_step(st, Tensor(rng.standard_normal((1, 2, 4, 4))), p)
    tc = bilinear_loops(st.cell.data)
    np.testing.assert_allclose(out.cell.data, 0.5 * tc, atol=1e-15)
    np.testing.assert_allclose(out.score.data, 0.5 * np.tanh(0.5 * tc), atol=1e-15)


def test_convlstm_requires_cell():
    p = make("convlstm")
    with pytest.raises(ShapeError, match="cell"):
        rdc_convlstm_step(RdcState(Tensor(np.zeros((1, 2, 2, 2)))), Tensor(np.zeros((1, 2, 4, 4))), p)


@pytest.mark.parametrize("seed", range(10))
def test_convlstm_sigmoid_bound(seed):
    rng = np.random.default_rng(seed)
    # moderate magnitudes: in float64 tanh(x) rounds to exactly 1.0 for x > ~19
    p = make("convlstm", 3, seed=seed, bias_scale=1.0)
    st = RdcState(Tensor(rng.standard_normal((2, 3, 3, 3)) * 3), Tensor(rng.standard_normal((2, 3, 3, 3)) * 3))
    out = rdc_convlstm_step(st, Tensor(rng.standard_normal((2, 3, 6, 6)) * 3), p)
    assert np.abs(out.score.data).max() < 1.0


def test_convgru_zero_weights_halves_state():
    p = zero_params("convgru")
    rng = np.random.default_rng(4)
    st = state_for("convgru", rng)
    out = rdc_convgru_step(st, Tensor(rng.standard_normal((1, 2, 4, 4))), p)
    np.testing.assert_allclose(out.score.data, 0.5 * ops.bilinear_upsample2x(st.score).data, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_convgru_convex_combination(seed):
    rng = np.random.default_rng(seed)
    p = make("convgru", 3, seed=seed, bias_scale=2.0)
    st = RdcState(Tensor(rng.standard_normal((1, 3, 3, 3)) * 3))
    x = rng.standard_normal((1, 3, 6, 6))
    out = rdc_convgru_step(st, Tensor(x), p).score.data
    ts = bilinear_loops(st.score.data)
    pr = _pre(p, "r", x, ts)
    r = 1 / (1 + np.exp(-pr))
    cand = np.tanh(conv2d_loops(x, p["w_xs"].data, p["b_s"].data, pad=1) + r * conv2d_loops(ts, p["w_ss"].data, pad=1))
    lo, hi = np.minimum(ts, cand), np.maximum(ts, cand)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


# ---------------------------------------------------------------- dispatch and chains

def test_dispatch_identity():
    p = make("convrnn")
    rng = np.random.default_rng(0)
    st, x = state_for("convrnn", rng), Tensor(rng.standard_normal((1, 2, 4, 4)))
    np.testing.assert_array_equal(rdc_step(st, x, p).score.data, rdc_convrnn_step(st, x, p).score.data)


def test_dispatch_unknown_variant():
    p = make("convrnn")
    object.__setattr__(p, "variant", "convmgu")
    with pytest.raises(ValueError, match="variant"):
        rdc_step(RdcState(Tensor(np.zeros((1, 2, 1, 1)))), Tensor(np.zeros((1, 2, 2, 2))), p)


def test_unknown_modes_rejected():
    with pytest.raises(ValueError):
        RdcParams("convrnn", 2, upsample="nearest")
    with pytest.raises(ValueError):
        RdcParams("convrnn", 2, gates="tanh")


@pytest.mark.parametrize("variant", ["convrnn", "convlstm", "convgru"])
def test_two_steps_quadruple_dims(variant):
    p = make(variant, 3)
    st = initial_state(p, 1, 2, 3, dtype=np.float64)
    rng = np.random.default_rng(0)
    st = rdc_step(st, Tensor(rng.standard_normal((1, 3, 4, 6))), p)
    st = rdc_step(st, Tensor(rng.standard_normal((1, 3, 8, 12))), p)
    assert st.score.shape == (1, 3, 8, 12)


@pytest.mark.parametrize("upsample", ["bilinear", "transposed"])
@pytest.mark.parametrize("gates", ["sigmoid", "literal-relu"])
@pytest.mark.parametrize("variant", ["convrnn", "convlstm", "convgru"])
def test_two_step_chain_gradcheck(variant, gates, upsample):
    p = make(variant, 2, seed=3, gates=gates, upsample=upsample)
    rng = np.random.default_rng(7)
    s0 = state_for(variant, rng)
    x1 = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    x2 = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 2, 8, 8)))

    def f():
        st = rdc_step(s0, x1, p)
        st = rdc_step(st, x2, p)
        return ops.sum_all(st.score * probe)

    res = finite_diff_check(f, p.parameters() + [x1, x2], max_coords=16)
    assert res.checked > 0
    assert res.max_rel_error < 1e-4, res.worst


# ---------------------------------------------------------------- parameter counts

@pytest.mark.parametrize("variant,expected", [("convrnn", 292), ("convlstm", 1168), ("convgru", 876)])
def test_count_formula_c4(variant, expected):
    assert decoder_param_formula(variant, 4) == expected
    p = make(variant, 4)
    assert sum(t.size for t in p.parameters()) == expected


@pytest.mark.parametrize("variant,n_kernels", [("convrnn", 2), ("convlstm", 8), ("convgru", 6)])
@pytest.mark.parametrize("c", [1, 2, 3, 5])
@pytest.mark.parametrize("upsample", ["bilinear", "transposed"])
def test_count_formula_enumeration(variant, n_kernels, c, upsample):
    p = make(variant, c, upsample=upsample)
    kernels = [t for n, t in p.named_parameters() if n.startswith("w_")]
    assert len(kernels) == n_kernels
    assert all(t.shape == (c, c, 3, 3) for t in kernels)
    assert sum(t.size for t in p.parameters()) == decoder_param_formula(variant, c, upsample=upsample)
