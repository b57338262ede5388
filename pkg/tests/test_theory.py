import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from blindat import theory as th
from blindat.nn import LossSpec, loss_and_grads

LAM = 1e-5
mp.mp.dps = 50


def mp_sig(u):
    return 1 / (1 + mp.e ** (-u))


def mp_loss(w, b, eta):
    w, b, eta = mp.mpf(w), mp.mpf(b), mp.mpf(eta)
    return (
        mp_sig(b - w) ** 2
        + mp_sig(w * (eta - 1) + b) ** 2
        + (1 - mp_sig(w + b)) ** 2
        + (1 - mp_sig(w * (1 - eta) + b)) ** 2
    ) / 2


# ------------------------------------------------------------------ solvers


def test_nt_golden_constant():
    w = th.solve_nt_w1(LAM)
    assert w == pytest.approx(6.447, abs=0.005)
    assert abs(th.nt_residual(w, LAM)) < 1e-12


def test_at_golden_constants():
    assert th.solve_at_w1(LAM, 0.0) == pytest.approx(6.447, abs=0.005)
    w = th.solve_at_w1(LAM, 1.0)
    assert w == pytest.approx(6.100, abs=0.005)
    # with the second term gone, 2 (1 - s)^2 s = lam; its large-W form is ln(2 / lam) / 2
    assert w == pytest.approx(math.log(2 / LAM) / 2, abs=0.005)


def test_eta_zero_matches_nt_exactly():
    assert th.solve_at_w1(LAM, 0.0) == pytest.approx(th.solve_nt_w1(LAM), abs=1e-9)


def test_nt_root_against_mpmath():
    ref = mp.findroot(lambda w: LAM * (1 + mp.e**w) ** 2 * (1 + mp.e ** (-w)) - 4, 6.4)
    assert th.solve_nt_w1(LAM) == pytest.approx(float(ref), abs=1e-12)


@given(st.floats(1e-7, 0.45))
def test_nt_residual_small_at_root(lam):
    w = th.solve_nt_w1(lam)
    assert abs(th.nt_residual(w, lam)) < 1e-10


def test_nt_residual_has_one_sign_change():
    w = np.linspace(0, 50, 20001)
    r = np.array([th.nt_residual(v, LAM) for v in w])
    assert np.count_nonzero(np.diff(np.sign(r))) == 1
    assert np.all(np.diff(r) > 0)


def test_nt_solution_shrinks_with_lambda():
    rows = th.figure_rows(7)
    ws = [w for _, w in rows]
    assert all(a > b for a, b in zip(ws, ws[1:]))


def test_nt_no_root_for_large_lambda():
    # residual at W1 = 0 is 8 lam - 4 >= 0 once lam >= 1/2
    with pytest.raises(th.NoBracket):
        th.solve_nt_w1(0.6)
    with pytest.raises(ValueError):
        th.solve_nt_w1(4.0)


@given(st.floats(0.0, 1.0))
def test_at_residual_small_at_root(eta):
    w = th.solve_at_w1(LAM, eta)
    assert abs(th.at_residual(w, LAM, eta)) < 1e-10


def test_at_domain_checks():
    with pytest.raises(ValueError):
        th.solve_at_w1(0.0, 0.5)
    with pytest.raises(ValueError):
        th.solve_at_w1(LAM, 2.5)


def test_argmax_eta_in_window():
    eta, w = th.argmax_eta(LAM)
    assert 0.995 <= eta < 1.0
    assert w > th.solve_at_w1(LAM, 0.0)


def test_eta_sweep_has_single_interior_peak():
    ws = np.array([w for _, w in th.figure_rows(8)])
    k = int(np.argmax(ws))
    assert 0 < k < len(ws) - 1
    assert np.all(np.diff(ws[: k + 1]) > 0) and np.all(np.diff(ws[k:]) < 0)


def test_budget_raises_confidence_and_curvature():
    base_w = th.solve_at_w1(LAM, 0.0)
    base_c = th.curvature_b(base_w, 0.0, 0.0)
    better = [e for e in np.linspace(0.05, 0.95, 19) if th.solve_at_w1(LAM, e) > base_w]
    assert len(better) == 19
    assert all(th.curvature_b(th.solve_at_w1(LAM, e), 0.0, e) > base_c for e in better)


# ---------------------------------------------------------------- curvature


def test_curvature_is_twice_nt_at_eta_zero():
    for w, b in [(6.0, 0.0), (2.0, 0.3), (5.0, -1.0)]:
        assert th.curvature_b(w, b, 0.0) == pytest.approx(th.nt_curvature_b(w, b), rel=1e-15)


@pytest.mark.parametrize("w,b,eta", [(6.4, 0.0, 0.0), (5.0, 0.7, 0.5), (3.0, -0.4, 0.9), (12.0, 0.1, 0.99)])
def test_curvature_matches_high_precision_differences(w, b, eta):
    d2 = mp.diff(lambda bb: mp_loss(w, bb, eta), mp.mpf(b), 2)
    assert th.curvature_b(w, b, eta) == pytest.approx(float(d2), rel=1e-8)
    d2w = mp.diff(lambda ww: mp_loss(ww, b, eta), mp.mpf(w), 2)
    assert th.curvature_w1(w, b, eta) == pytest.approx(float(d2w), rel=1e-8)
    dwb = mp.diff(lambda ww, bb: mp_loss(ww, bb, eta), (mp.mpf(w), mp.mpf(b)), (1, 1))
    assert th.curvature_b_w1(w, b, eta) == pytest.approx(float(dwb), rel=1e-8, abs=1e-20)


def test_curvature_peaks_inside_unit_budget():
    # on the 1e-3 grid the curve climbs all the way to eta = 1 ...
    c = np.array([v for _, v in th.figure_rows(9)])
    assert np.all(np.diff(c) > 0)
    # ... but a finer look shows the peak sits just below it
    etas = np.linspace(0.9999, 1.0, 2001, endpoint=False)
    fine = np.array([th.curvature_b(th.solve_at_w1(LAM, e), 0.0, e) for e in etas])
    assert fine.max() > c[-1] > c[0]
    assert 0 < np.argmax(fine) < len(fine) - 1


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("w,b,eta", [(5.0, 2.5, 0.5), (1.0, -0.3, 0.9), (8.0, 0.0, 0.2)])
def test_first_derivatives_against_mpmath(w, b, eta):
    gb = mp.diff(lambda bb: mp_loss(w, bb, eta), mp.mpf(b))
    gw = mp.diff(lambda ww: mp_loss(ww, b, eta), mp.mpf(w))
    assert th.at_grad_b(w, b, eta) == pytest.approx(float(gb), rel=1e-10)
    assert th.at_grad_w1(w, b, eta) == pytest.approx(float(gw), rel=1e-10)


def test_closed_form_matches_autodiff():
    rng = np.random.default_rng(0)
    x, y = th.two_point_data(3)
    for _ in range(20):
        w1, b, eta = rng.uniform(-4, 4), rng.uniform(-2, 2), rng.uniform(0, 1)
        model = th.perceptron([w1, 0.0, 0.0], b)
        pts = np.concatenate([x, (1 - eta) * x])
        # the 1/2-weighted sum over four points is twice the batch mean
        _, g, _ = loss_and_grads(model, pts, np.concatenate([y, y]), LossSpec("squared-error"))
        assert 2 * g[0][0, 0] == pytest.approx(th.at_grad_w1(w1, b, eta), rel=1e-8)
        assert 2 * g[1][0] == pytest.approx(th.at_grad_b(w1, b, eta), rel=1e-8)


def test_loss_assembly_against_mpmath():
    assert th.at_loss(5.0, 0.3, 0.7) == pytest.approx(float(mp_loss(5.0, 0.3, 0.7)), rel=1e-14)


def test_stationarity_residual_is_weight_gradient():
    for eta in (0.0, 0.3, 0.9):
        w = 4.0
        assert th.at_residual(w, LAM, eta) == pytest.approx(th.at_grad_w1(w, 0.0, eta, LAM), rel=1e-12)


# ------------------------------------------------------ unrestricted gradient


def test_on_boundary_terms_cancel():
    g = th.unrestricted_grad_b(5.0, 2.5, 0.5, 1.5)
    assert g == pytest.approx(th.on_boundary_grad_b(5.0, 2.5), abs=1e-16)


def test_on_boundary_gradient_is_small():
    on = abs(th.unrestricted_grad_b(5.0, 2.5, 0.5, 1.5))
    restricted = abs(th.unrestricted_grad_b(5.0, 2.5, 0.5, 0.5))
    assert on < 0.6 * restricted


def test_gradient_sweep_shape():
    rows = th.figure_rows(10)
    e2 = np.array([e for e, _ in rows])
    g = np.array([v for _, v in rows])
    assert e2[np.argmax(g)] == 0.0
    assert np.all(g[e2 <= 1.0] >= 0.95 * g.max())
    assert g[e2 == 0.5][0] >= 0.95 * g.max()


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        th.sweep(lambda v: v, [])


def test_sweep_csv(tmp_path):
    th.write_sweep(th.figure_rows(7), th.FIGURES[7], tmp_path / "fig7.csv")
    lines = (tmp_path / "fig7.csv").read_text().splitlines()
    assert lines[0] == "lambda,w1" and len(lines) == 52


def test_bisect_requires_sign_change():
    with pytest.raises(th.NoBracket):
        th.bisect(lambda v: v * v + 1, -1.0, 1.0)
    assert th.bisect(lambda v: v - 0.25, 0.0, 1.0) == 0.25


# ------------------------------------------------------- two-point training


def test_two_point_nt_converges_to_bisector():
    run = th.train_two_point("nt", seed=1)
    assert run.epochs is not None
    assert abs(run.b) < 1e-3 and run.w1 > 5


def test_two_point_bat_converges():
    run = th.train_two_point("bat", seed=1)
    assert run.epochs is not None and abs(run.b) < 1e-3


def test_two_point_unknown_mode():
    with pytest.raises(ValueError):
        th.train_two_point("magic")
