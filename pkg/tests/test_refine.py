import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from statreach import conformal as cf
from statreach import refine as rf
from statreach import surrogate as sg
from statreach.refine import RefinementInput, refine_scaling


def lp_oracle(comps, scalars):
    # min sum(omega) s.t. R_i omega_j >= R_i^j, solved as a generic LP
    L, d = comps.shape
    A, b = [], []
    for i in range(L):
        for j in range(d):
            row = np.zeros(d)
            row[j] = -scalars[i]
            A.append(row)
            b.append(-comps[i, j])
    res = linprog(np.ones(d), A_ub=np.array(A), b_ub=np.array(b), bounds=[(0, None)] * d, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.success
    return res.x


def test_single_row_example():
    omega = refine_scaling(RefinementInput.from_alpha([[2.0, 1.0]], [1.0, 1.0]))
    assert np.allclose(omega, [1.0, 0.5])
    assert omega.sum() == pytest.approx(1.5)
    assert np.allclose(lp_oracle(np.array([[2.0, 1.0]]), np.array([2.0])), omega)


def test_all_tight():
    comps = np.full((5, 3), 0.7)
    assert np.allclose(refine_scaling(RefinementInput.from_alpha(comps, np.ones(3))), 1.0)


def test_matches_lp_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        comps = rng.exponential(size=(50, 6))
        alpha = rng.uniform(0.3, 3.0, 6)
        inp = RefinementInput.from_alpha(comps, alpha)
        assert np.allclose(refine_scaling(inp), lp_oracle(inp.components, inp.scalars), atol=1e-9, rtol=0)


def test_empty_input_and_zero_rows():
    with pytest.raises(ValueError):
        refine_scaling(RefinementInput(np.zeros((0, 3)), np.zeros(0)))
    comps = np.array([[0.0, 0.0], [1.0, 0.5]])
    omega = refine_scaling(RefinementInput.from_alpha(comps, [1.0, 1.0]))
    assert np.allclose(omega, [1.0, 0.5])
    assert np.array_equal(refine_scaling(RefinementInput.from_alpha(np.zeros((3, 2)), [1.0, 1.0])), [0, 0])
    assert np.allclose(rf.refined_alpha([0.0, 2.0]), [1e12, 0.5])


residual_rows = arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 6)), elements=st.floats(0, 50))


@given(residual_rows, st.data())
def test_lp_properties(comps, data):
    d = comps.shape[1]
    alpha = np.array(data.draw(st.lists(st.floats(0.05, 20), min_size=d, max_size=d)))
    inp = RefinementInput.from_alpha(comps, alpha)
    omega = refine_scaling(inp)
    keep = inp.scalars > 0
    R, C = inp.scalars[keep], inp.components[keep]
    if not keep.any():
        return
    # feasibility (ratio form, as computed)
    assert np.all(C / R[:, None] <= omega)
    # residual preservation
    new = np.max(C / np.maximum(omega, 1e-300), axis=1, where=C > 0, initial=0.0)
    assert np.all(new <= R * (1 + 1e-12))
    # per-coordinate tightness
    for j in range(d):
        assert np.any(C[:, j] / R == omega[j])
    # surface area never grows relative to the feasible starting widths
    assert omega.sum() <= np.sum(1.0 / alpha) * (1 + 1e-12)


def test_quantile_does_not_increase():
    rng = np.random.default_rng(1)
    comps_lp = rng.gamma(2.0, size=(2000, 8)) * np.linspace(0.2, 2.0, 8)
    comps_cal = rng.gamma(2.0, size=(2000, 8)) * np.linspace(0.2, 2.0, 8)
    alpha = np.ones(8)
    alpha2 = rf.refined_alpha(refine_scaling(RefinementInput.from_alpha(comps_lp, alpha)))
    # on the LP data itself every residual shrinks or stays
    old = cf.scalar_residuals(comps_lp, alpha)
    new = cf.scalar_residuals(comps_lp, alpha2)
    assert np.all(new <= old * (1 + 1e-12))
    assert cf.conformal_quantile(new, 0.1) <= cf.conformal_quantile(old, 0.1)
    # and the inflating box shrinks in surface proxy
    assert np.sum(1 / alpha2) < np.sum(1 / alpha)
    assert np.isfinite(cf.conformal_quantile(cf.scalar_residuals(comps_cal, alpha2), 0.1))


def test_refine_from_data_with_interpolation():
    rng = np.random.default_rng(2)
    net = sg.init_net([2, 6, 4], rng)
    X = rng.normal(size=(100, 2))
    Y = sg.forward(net, X) + rng.normal(scale=0.1, size=(100, 4))
    a = rf.refine_from_data(net, np.ones(4), X, Y)
    a2 = rf.refine_from_data(net, np.ones(4), X, Y, interp_factor=2)
    assert a2.shape == (8,)
    assert np.allclose(a2[[2, 3, 6, 7]], a)


def test_update_model_alpha(tmp_path):
    net = sg.init_net([2, 3, 4], np.random.default_rng(0))
    path = tmp_path / "m.json"
    sg.save_model(path, net, np.ones(4), 0.5, {"n": 2})
    rf.update_model_alpha(path, [1.0, 2.0, 3.0, 4.0], "refined on T_LP seed 3")
    _, alpha, q, meta = sg.load_model(path)
    assert np.array_equal(alpha, [1, 2, 3, 4]) and q == 0.5
    assert meta["alpha_history"][0]["alpha"] == [1.0, 1.0, 1.0, 1.0]
