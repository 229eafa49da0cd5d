import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmquant.fixed_point import QuantizerSpec
from sgmquant.regularizer import (
    LambdaSchedule,
    LayerQuantState,
    RegularizerError,
    lambda_at,
    reg_grad,
    reg_loss,
    search_step_exponent,
)
from oracles import exhaustive_step_search, nearest_level_residual, rel_err


def one_layer(w, bits=2, f=2):
    w = np.asarray(w, dtype=np.float64)
    return [w], [LayerQuantState.for_weights(1, QuantizerSpec(bits, f), w)]


def test_reg_loss_examples():
    ws, st_ = one_layer([0.30, -0.05])
    assert reg_loss(ws, st_, 0.0) == 0.0
    # (4 / (2*2)) * (0.05**2 + 0.05**2)
    expected = 1.0 * ((0.30 - 0.25) ** 2 + 0.05**2)
    assert reg_loss(ws, st_, 4.0) == pytest.approx(expected, rel=1e-12)
    assert reg_loss(ws, st_, 4.0) == pytest.approx(0.005, rel=1e-9)
    on_grid, st2 = one_layer([0.25, 0.0, -0.25])
    assert reg_loss(on_grid, st2, 1000.0) == 0.0


def test_reg_grad_examples():
    ws, st_ = one_layer([0.30, -0.05])
    assert reg_grad(ws, st_, 0.0)[0].tolist() == [0.0, 0.0]
    g = reg_grad(ws, st_, 4.0)[0]
    np.testing.assert_allclose(g, [0.1, -0.1], rtol=1e-9)
    on_grid, st2 = one_layer([0.25, 0.30])
    assert reg_grad(on_grid, st2, 4.0)[0][0] == 0.0


def test_reg_errors():
    ws, st_ = one_layer([0.1])
    with pytest.raises(RegularizerError):
        reg_loss(ws + ws, st_, 1.0)
    with pytest.raises(RegularizerError):
        reg_loss([np.array([np.nan])], st_, 1.0)
    with pytest.raises(RegularizerError):
        reg_loss([np.array([0.1, 0.2])], st_, 1.0)  # stale weight count


def test_lambda_schedule():
    s = LambdaSchedule(0.0, 1000.0, 80)
    assert lambda_at(s, 0) == 0.0
    assert lambda_at(s, 79) == 1000.0
    assert lambda_at(s, 40) == pytest.approx(1000 * 40 / 79)
    assert lambda_at(s, 40) == pytest.approx(506.33, abs=0.01)
    vals = [lambda_at(s, e) for e in range(80)]
    assert vals == sorted(vals)
    with pytest.raises(RegularizerError):
        lambda_at(s, 80)
    with pytest.raises(RegularizerError):
        lambda_at(s, -1)


def test_search_examples():
    rng = np.random.default_rng(3)
    w = rng.choice([-0.25, 0.0, 0.25], size=50)
    found = search_step_exponent(w, 2, (-8, 8))
    assert found.spec.exponent == exhaustive_step_search(w, 2, -8, 8) == 2
    assert found.residual == 0.0

    w = np.array([0.5, -0.5, 1.0])
    found = search_step_exponent(w, 2, (-8, 8))
    assert found.spec.exponent == exhaustive_step_search(w, 2, -8, 8) == 1
    assert found.residual == 0.25

    zero = search_step_exponent(np.zeros(1), 2, (-8, 8))
    assert zero.degenerate and zero.spec.exponent == 8


def test_search_rejects_bad_range():
    with pytest.raises(RegularizerError):
        search_step_exponent(np.ones(3), 2, (3, 2))


def finite_difference(fun, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e.flat[i] = h
        g.flat[i] = (fun(w + e) - fun(w - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    spec = QuantizerSpec(3, 3)
    for _ in range(20):
        w = rng.normal(0, 0.4, size=30)
        # keep more than 1e-4 away from half-step discontinuities
        frac = np.abs(w / spec.step - np.trunc(w / spec.step))
        w = w[np.abs(frac - 0.5) * spec.step > 1e-4]
        st_ = [LayerQuantState.for_weights(1, spec, w)]
        g = reg_grad([w], st_, 7.0)[0]
        fd = finite_difference(lambda v: reg_loss([v], st_, 7.0), w)
        for a, b in zip(g, fd):
            assert rel_err(a, b) < 1e-6


def test_layer_equal_rating():
    spec = QuantizerSpec(2, 2)
    w = np.array([0.30, -0.05, 0.11])
    single = reg_loss([w], [LayerQuantState.for_weights(1, spec, w)], 3.0)
    w2 = np.concatenate([w, w])
    doubled = reg_loss([w2], [LayerQuantState.for_weights(1, spec, w2)], 3.0)
    assert doubled == pytest.approx(single, rel=1e-12)
    g1 = reg_grad([w], [LayerQuantState.for_weights(1, spec, w)], 3.0)[0]
    g2 = reg_grad([w2], [LayerQuantState.for_weights(1, spec, w2)], 3.0)[0]
    np.testing.assert_allclose(g2[:3], g1 / 2, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-4, 4).filter(lambda v: v == 0 or abs(v) > 1e-100), min_size=1, max_size=40),
    st.one_of(st.just(0.0), st.floats(1e-6, 1e4)),
    st.integers(-3, 6),
)
def test_homogeneity_and_nonnegativity(values, lam, f):
    w = np.array(values)
    st_ = [LayerQuantState.for_weights(1, QuantizerSpec(3, f), w)]
    loss1 = reg_loss([w], st_, 1.0)
    assert loss1 >= 0
    assert reg_loss([w], st_, lam) == pytest.approx(lam * loss1, rel=1e-12, abs=1e-300)
    np.testing.assert_allclose(reg_grad([w], st_, lam)[0], lam * reg_grad([w], st_, 1.0)[0], rtol=1e-12)
    on_grid = nearest_level_residual(w, QuantizerSpec(3, f)) == 0
    assert (loss1 == 0) == on_grid


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=60).filter(lambda v: any(v)),
    st.sampled_from([2, 3, 4]),
)
def test_search_matches_exhaustive_oracle(values, bits):
    w = np.array(values)
    assert search_step_exponent(w, bits, (-8, 8)).spec.exponent == exhaustive_step_search(w, bits, -8, 8)
