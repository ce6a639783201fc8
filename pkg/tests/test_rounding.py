import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from faarkit import (
    BetaSchedule,
    ScaleSet,
    beta_at,
    clip_vars,
    compute_scales,
    dequantize,
    harden,
    harden_to_quantized,
    init_rounding_vars,
    quantize_rtn,
    round_reg_loss,
    soft_quantize,
    soft_round,
)

from helpers import central_diff


def identity_scales(n_blocks: int, block_size: int = 16) -> ScaleSet:
    return ScaleSet(s_global=1.0, s_g=np.ones(n_blocks), block_size=block_size)


# ---------------------------------------------------------------- soft_round


def test_soft_round_exact_sigmoid_value():
    # beta * (v - 0.5) = 2 * 0.5 = 1, so h = sigma(1)
    assert soft_round(1.0, 2.0) == 1.0 / (1.0 + np.exp(-1.0))


def test_soft_round_midpoint_is_half():
    for beta in (0.5, 4.0, 40.0, 1e6):
        assert soft_round(0.5, beta) == 0.5


def test_soft_round_symmetry():
    for v in (0.0, 0.1, 0.3, 0.49):
        assert soft_round(v, 7.0) + soft_round(1.0 - v, 7.0) == pytest.approx(1.0, abs=1e-15)


def test_soft_round_sharp_limit():
    assert soft_round(0.6, 1000.0) > 1.0 - 1e-15
    assert soft_round(0.4, 1000.0) < 1e-15


def test_soft_round_monotone_in_v():
    v = np.linspace(0.0, 1.0, 101)
    h = soft_round(v, 8.0)
    assert np.all(np.diff(h) > 0)


def test_soft_round_no_overflow_warning():
    with np.errstate(over="raise"):
        soft_round(np.array([0.0, 1.0]), 1e8)


def test_soft_round_rejects_bad_input():
    with pytest.raises(ValueError):
        soft_round(1.1, 4.0)
    with pytest.raises(ValueError):
        soft_round(-0.01, 4.0)
    with pytest.raises(ValueError):
        soft_round(0.5, 0.0)
    with pytest.raises(ValueError):
        soft_round(0.5, -2.0)


@given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=1e-3, max_value=1e4))
def test_soft_round_stays_in_unit_interval(v, beta):
    h = soft_round(v, beta)
    assert 0.0 <= h <= 1.0


# -------------------------------------------------------------- BetaSchedule


def test_beta_schedule_endpoints_and_midpoint():
    sched = BetaSchedule(4.0, 40.0, 100)
    assert beta_at(sched, 0) == 4.0
    assert beta_at(sched, 100) == 40.0
    assert beta_at(sched, 50) == 22.0


def test_beta_schedule_constant():
    sched = BetaSchedule(40.0, 40.0, 10)
    assert all(beta_at(sched, s) == 40.0 for s in range(11))


def test_beta_schedule_rejects_out_of_range_step():
    sched = BetaSchedule(4.0, 40.0, 10)
    with pytest.raises(ValueError):
        beta_at(sched, -1)
    with pytest.raises(ValueError):
        beta_at(sched, 11)


def test_beta_schedule_rejects_bad_params():
    with pytest.raises(ValueError):
        BetaSchedule(0.0, 40.0, 10)
    with pytest.raises(ValueError):
        BetaSchedule(4.0, 2.0, 10)        # decreasing
    with pytest.raises(ValueError):
        BetaSchedule(4.0, 40.0, 0)


# -------------------------------------------------------- init_rounding_vars


def test_init_positions_within_interval():
    W = np.array([1.2, 2.4, 0.25, -0.25, 3.0])
    rv = init_rounding_vars(W, identity_scales(1))
    # (1.0, 1.5): v = 0.2 / 0.5
    assert rv.v[0] == pytest.approx(0.4)
    # (2.0, 3.0): v = 0.4
    assert rv.v[1] == pytest.approx(0.4)
    # 0.25 is the exact (0, 0.5) midpoint
    assert rv.v[2] == 0.5
    assert rv.v[3] == 0.5 and rv.sign[3] == -1.0
    # exact node sits at the bottom of its interval
    assert rv.v[4] == 0.0 and rv.w_lower[4] == 3.0 and rv.w_upper[4] == 4.0


def test_init_freezes_top_node_and_overflow():
    rv = init_rounding_vars(np.array([6.0, 10.0, 5.0]), identity_scales(1))
    assert rv.frozen_mask.tolist() == [True, True, False]
    assert np.all(rv.v[rv.frozen_mask] == 0.0)
    assert np.all(rv.span[rv.frozen_mask] == 0.0)


def test_init_preserves_shape():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 8))
    rv = init_rounding_vars(W, compute_scales(W, 16))
    for arr in (rv.v, rv.w_lower, rv.w_upper, rv.span, rv.sign, rv.scale_prod, rv.frozen_mask):
        assert arr.shape == (4, 8)


def test_init_rejects_nonfinite():
    with pytest.raises(ValueError):
        init_rounding_vars(np.array([1.0, np.nan]), identity_scales(1))


def test_copy_is_independent():
    rv = init_rounding_vars(np.array([1.2]), identity_scales(1))
    dup = rv.copy()
    dup.v[0] = 0.9
    assert rv.v[0] == pytest.approx(0.4)


# ------------------------------------------------------------- soft_quantize


def test_soft_quantize_recovers_weight_at_init_beta_linear_regime():
    # With beta tiny the sigmoid is nearly linear around 0.5, so the soft
    # weight stays close to the weight itself; with beta huge it snaps to a node.
    W = np.array([1.1, 2.6, -0.4])
    rv = init_rounding_vars(W, identity_scales(1))
    near = soft_quantize(rv, 1e-6)
    mid = rv.sign * (rv.w_lower + 0.5 * rv.span) * rv.scale_prod
    np.testing.assert_allclose(near, mid, atol=1e-6)

    # with beta huge every soft magnitude snaps to one of the bracketing nodes
    snapped = soft_quantize(rv, 1e6)
    mags = np.abs(snapped)
    assert np.all((np.abs(mags - rv.w_lower) < 1e-12) | (np.abs(mags - rv.w_upper) < 1e-12))


def test_soft_quantize_frozen_stays_at_top_node():
    rv = init_rounding_vars(np.array([6.0, 7.3]), identity_scales(1))
    for beta in (1e-3, 4.0, 1e6):
        np.testing.assert_array_equal(soft_quantize(rv, beta), [6.0, 6.0])


def test_soft_quantize_gradient_scales_with_span():
    # Two weights at the same v but in intervals of width 2.0 and 0.5: the
    # sensitivity of the soft weight to v differs by exactly the span ratio.
    W = np.array([4.6, 0.15])          # intervals (4, 6) and (0, 0.5), v = 0.3
    rv = init_rounding_vars(W, identity_scales(1))
    assert rv.v[0] == pytest.approx(0.3) and rv.v[1] == pytest.approx(0.3)
    beta = 6.0

    def out(i):
        def f(vi):
            dup = rv.copy()
            dup.v[i] = vi
            return soft_quantize(dup, beta)[i]
        return f

    g0 = central_diff(out(0), rv.v[0])
    g1 = central_diff(out(1), rv.v[1])
    assert g0 / g1 == pytest.approx(2.0 / 0.5, rel=1e-6)


# ---------------------------------------------------------------- round_reg


def test_round_reg_worked_example():
    rv = init_rounding_vars(np.array([1.2]), identity_scales(1))
    rv.v[0] = 0.75
    loss, grad = round_reg_loss(rv)
    assert loss == pytest.approx(0.75)
    assert grad[0] == pytest.approx(-2.0)


def test_round_reg_extremes():
    rv = init_rounding_vars(np.array([1.2, 2.6]), identity_scales(1))
    rv.v[:] = [0.0, 1.0]
    loss, grad = round_reg_loss(rv)
    assert loss == 0.0
    assert grad.tolist() == [2.0, -2.0]   # -4 * (2v - 1) / 2


def test_round_reg_peak_at_half():
    rv = init_rounding_vars(np.array([1.2]), identity_scales(1))
    rv.v[0] = 0.5
    loss, grad = round_reg_loss(rv)
    assert loss == 1.0 and grad[0] == 0.0


def test_round_reg_ignores_frozen():
    rv = init_rounding_vars(np.array([6.0, 1.2]), identity_scales(1))
    rv.v[1] = 0.5
    loss, grad = round_reg_loss(rv)
    assert loss == 1.0                 # mean over the single active element
    assert grad[0] == 0.0


def test_round_reg_all_frozen():
    rv = init_rounding_vars(np.array([6.0, 6.0]), identity_scales(1))
    loss, grad = round_reg_loss(rv)
    assert loss == 0.0 and np.all(grad == 0.0)


def test_round_reg_gradient_matches_finite_difference():
    rng = np.random.default_rng(5)
    W = rng.normal(size=12)
    rv = init_rounding_vars(W, compute_scales(W, 16))
    rv.v[:] = rng.uniform(0.1, 0.9, size=12)
    _, grad = round_reg_loss(rv)
    for i in range(12):
        def f(vi, i=i):
            dup = rv.copy()
            dup.v[i] = vi
            return round_reg_loss(dup)[0]
        assert grad[i] == pytest.approx(central_diff(f, rv.v[i]), abs=1e-7)


# -------------------------------------------------------------------- clip


def test_clip_clamps_in_place_and_is_idempotent():
    rv = init_rounding_vars(np.array([1.2, 2.6]), identity_scales(1))
    rv.v[:] = [-0.3, 1.7]
    out = clip_vars(rv)
    assert out is rv
    assert rv.v.tolist() == [0.0, 1.0]
    clip_vars(rv)
    assert rv.v.tolist() == [0.0, 1.0]


# ------------------------------------------------------------------ harden


def test_harden_threshold_inclusive():
    rv = init_rounding_vars(np.array([1.2, 1.2, 1.2]), identity_scales(1))
    rv.v[:] = [0.4999, 0.5, 0.5001]
    decisions, w_final = harden(rv)
    assert decisions.tolist() == [0.0, 1.0, 1.0]
    assert w_final.tolist() == [1.0, 1.5, 1.5]


def test_harden_frozen_forced_down():
    rv = init_rounding_vars(np.array([6.0]), identity_scales(1))
    rv.v[0] = 0.9                      # illegal drift; frozen must ignore it
    decisions, w_final = harden(rv)
    assert decisions[0] == 0.0 and w_final[0] == 6.0


def test_harden_of_init_matches_rtn_on_random_weights():
    rng = np.random.default_rng(123)
    W = rng.normal(size=(16, 32))
    scales = compute_scales(W, 16)
    _, w_final = harden(init_rounding_vars(W, scales))
    np.testing.assert_array_equal(w_final, dequantize(quantize_rtn(W, scales)))


def test_harden_of_init_differs_from_rtn_only_at_midpoints():
    # At the exact midpoint v = 0.5 hardening takes the upper node while the
    # nearest-even rule may take the lower one: 2.5 -> 3.0 vs RTN 2.5 -> 2.0.
    W = np.array([2.5])
    scales = identity_scales(1)
    _, w_final = harden(init_rounding_vars(W, scales))
    assert w_final[0] == 3.0
    assert dequantize(quantize_rtn(W, scales))[0] == 2.0


def test_harden_to_quantized_round_trips():
    rng = np.random.default_rng(9)
    W = rng.normal(size=(8, 16))
    scales = compute_scales(W, 16)
    rv = init_rounding_vars(W, scales)
    rv.v[:] = rng.uniform(size=rv.shape)
    _, w_final = harden(rv)
    q = harden_to_quantized(rv)
    assert np.all(q.codes < 16)
    np.testing.assert_array_equal(dequantize(q), w_final)


def test_harden_to_quantized_zero_is_canonical():
    rv = init_rounding_vars(np.array([-0.1, 0.0]), identity_scales(1))
    rv.v[:] = 0.0                      # both round down to magnitude zero
    q = harden_to_quantized(rv)
    assert q.codes.tolist() == [0, 0]
