import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmtpf import dataio as dio
from hmtpf import physics as ph

from oracles import mse_loops, r_components_loops

# Frozen oracle values, computed offline before the implementation existed.
# Gaussian pack gen_advecting_gaussian(200, 100, 5, 0.02, seed=0), dx = 0.01.
# Taylor truncation bound on the continuity residual, each term maximized
# separately over queries and steps (sympy derivatives of rho):
#   dt/2 max|rho_tt| + dt^2/6 max|rho_ttt| + dx^2/6 (|u_x| max|rho_xxx| + |u_y| max|rho_yyy|) = 0.13883
# Velocity is constant, so the momentum bounds are u_x and u_y times that.
GAUSS_BOUND = {"continuity": 0.1389, "momentum_x": 0.0695, "momentum_y": 0.0348}
# Vortex, 50 points uniform in [0.2, 0.7]^2 (default_rng(0)), t0 = 0.1:
VORTEX_C_X = 381.0  # max|R(0.02) - R(0.01)| / (0.02^2 - 0.01^2) at dt = 0.02
VORTEX_HS = [0.02, 0.01, 0.005, 0.0025]


def vortex_points():
    return np.random.default_rng(0).uniform(0.2, 0.7, (50, 2))


def vortex_r(dx, dt, t0=0.1):
    r = ph.analytic_residuals(dio.vortex_fields, vortex_points(), [t0, t0 + dt], (dx, dx), dt)
    return np.concatenate([r.r1.ravel(), r.r2.ravel()])


# -- stencils -------------------------------------------------------------

def test_first_derivative_examples():
    assert ph.fd_spatial_first(1.1**2, 0.9**2, 0.1) == pytest.approx(2.0, abs=1e-14)
    assert ph.fd_spatial_first(3.0, 3.0, 0.1) == 0
    assert ph.fd_spatial_first(1.1**3, 0.9**3, 0.1) == pytest.approx(3.01, abs=1e-13)


def test_second_derivative_examples():
    for x in (-2.0, 0.3, 5.0):
        assert ph.fd_spatial_second((x + 0.1) ** 2, x * x, (x - 0.1) ** 2, 0.1) == pytest.approx(2.0, abs=1e-10)
    assert ph.fd_spatial_second(3.1, 3.0, 2.9, 0.1) == pytest.approx(0.0, abs=1e-12)
    assert abs(ph.fd_spatial_second(np.sin(0.1), 0.0, np.sin(-0.1), 0.1)) <= 1e-3


def test_time_derivative_examples():
    assert ph.fd_time(0.0, 0.5, 0.5) == 1.0
    assert ph.fd_time(2.0, 2.0, 0.1) == 0
    assert ph.fd_time(1.0, 1.1**2, 0.1) == pytest.approx(2.1, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(0.01, 0.5))
def test_stencil_exactness_on_polynomials(a, b, c, d, x, h):
    quad = lambda s: a * s * s + b * s + c  # noqa: E731
    cubic = lambda s: d * s**3 + quad(s)  # noqa: E731
    lin = lambda s: b * s + c  # noqa: E731
    scale = 1 + abs(a) + abs(b) + abs(c) + abs(d)
    assert ph.fd_spatial_first(quad(x + h), quad(x - h), h) == pytest.approx(2 * a * x + b, abs=1e-9 * scale / h)
    second = ph.fd_spatial_second(cubic(x + h), cubic(x), cubic(x - h), h)
    assert second == pytest.approx(6 * d * x + 2 * a, abs=1e-9 * scale / h**2)
    assert ph.fd_time(lin(x), lin(x + h), h) == pytest.approx(b, abs=1e-9 * scale / h)


def test_stencil_offsets_layout():
    offs = ph.stencil_offsets((0.1, 0.2))
    assert [o.tolist() for o in offs] == [[0, 0], [0.1, 0], [-0.1, 0], [0, 0.2], [0, -0.2]]


# -- residuals ------------------------------------------------------------

def test_uniform_state_zero_residuals():
    x = np.random.default_rng(0).uniform(size=(20, 2))
    res = ph.analytic_residuals(dio.uniform_fields, x, [0.0, 0.1, 0.2], (0.01, 0.01), 0.1)
    assert res.r1.shape == (2, 20) and res.r2.shape == (2, 20, 2)
    assert not res.r1.any() and not res.r2.any()


def test_gaussian_residuals_within_frozen_bound():
    pack = dio.gen_advecting_gaussian(200, 100, 5, 0.02, seed=0)
    times = [(i + 1) * pack.dt for i in range(pack.t)]
    res = ph.analytic_residuals(dio.gaussian_fields, pack.x_q, times, (0.01, 0.01), pack.dt)
    for name, arr in res.components().items():
        assert np.abs(arr).max() <= GAUSS_BOUND[name], name


def test_gaussian_spatial_second_order():
    x = np.random.default_rng(1).uniform(0.2, 0.7, (50, 2))
    errs = []
    for h in VORTEX_HS:
        r = ph.analytic_residuals(dio.gaussian_fields, x, [0.1, 0.101], (h, h), 1e-3)
        errs.append(np.concatenate([r.r1.ravel(), r.r2.ravel()]))
    assert min(ph.richardson_order(errs)) >= 1.9


def test_vortex_convergence_orders():
    spatial = ph.richardson_order([vortex_r(h, 1e-3) for h in VORTEX_HS])
    temporal = ph.richardson_order([vortex_r(1e-3, dt) for dt in VORTEX_HS])
    np.testing.assert_allclose(spatial, [1.965, 1.991], atol=2e-3)
    np.testing.assert_allclose(temporal, [0.978, 0.990], atol=2e-3)


def test_vortex_residual_bounded_by_measured_constant():
    spatial_part = np.abs(vortex_r(0.005, 0.02) - vortex_r(1e-4, 0.02)).max()
    assert spatial_part <= 1.25 * VORTEX_C_X * 0.005**2


def test_flux_form_products_taken_at_offsets():
    # rho = x, u_x = x on a line: d(rho u)/dx of x^2 is exact for central differences
    def fields(x, t):
        out = np.zeros(x.shape[:-1] + (4,))
        out[..., 0] = x[..., 0]
        out[..., 3] = x[..., 0]
        return out

    x = np.array([[0.5, 0.5], [2.0, 1.0]])
    res = ph.analytic_residuals(fields, x, [0.0, 1.0], (0.1, 0.1), 1.0)
    np.testing.assert_allclose(res.r1[0], 2 * x[:, 0], rtol=1e-12)  # d(x*x)/dx
    # d(x^3)/dx by central differences carries exactly h^2 of error
    np.testing.assert_allclose(res.r2[0, :, 0], 3 * x[:, 0] ** 2 + 0.01, rtol=1e-12)


def test_linear_terms_superpose():
    state = ph.EulerFieldState.from_names(dio.CHANNELS, 2)

    def block(seed):
        b = np.random.default_rng(seed).normal(size=(5, 3, 6, 4))
        b[..., 0:2] = 0  # zero velocity: only d/dt rho ... and grad p survive
        return b

    a, b = block(1), block(2)
    ra, rb, rs = (ph.residuals_from_stencil(s, state, (0.1, 0.2), 0.5) for s in (a, b, a + b))
    np.testing.assert_allclose(rs.r1, ra.r1 + rb.r1, atol=1e-12)
    np.testing.assert_allclose(rs.r2, ra.r2 + rb.r2, atol=1e-12)


def test_channels_resolved_by_name():
    names = ("rho", "p", "u_y", "u_x")
    st_ = ph.EulerFieldState.from_names(names, 2)
    assert (st_.rho, st_.p, st_.u) == (0, 1, (3, 2))
    with pytest.raises(ph.PhysicsConfigError):
        ph.EulerFieldState.from_names(("u_x", "u_y", "p"), 2)


def test_fd_config_resolve():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert ph.FdConfig().resolve(x) == (0.05, 0.05)
    assert ph.FdConfig(dx=0.1).resolve(x) == (0.1, 0.1)
    with pytest.raises(ph.PhysicsConfigError):
        ph.FdConfig(dx=(0.1,)).resolve(x)
    with pytest.raises(ph.PhysicsConfigError):
        ph.FdConfig(dx=-1.0).resolve(x)


# -- model queries --------------------------------------------------------

def test_query_with_offsets_single_pass_equals_separate(tiny_model, tiny_pack):
    offs = ph.stencil_offsets((0.01, 0.02))
    stacked = ph.query_with_offsets(tiny_model, tiny_pack, tiny_pack.x_q, offs).data
    assert stacked.shape == (5, 3, 6, 4)
    np.testing.assert_array_equal(stacked[0], tiny_model.predict(tiny_pack))
    for i, o in enumerate(offs):
        np.testing.assert_allclose(stacked[i], tiny_model.predict(tiny_pack, tiny_pack.x_q + o), rtol=0, atol=1e-13)


def test_model_residuals_shapes(tiny_model, tiny_pack):
    pred, res = ph.model_residuals(tiny_model, tiny_pack)
    assert pred.shape == (3, 6, 4) and res.r1.shape == (2, 6) and res.r2.shape == (2, 6, 2)
    assert np.all(np.isfinite(res.r1)) and np.all(np.isfinite(res.r2))


# -- metrics --------------------------------------------------------------

def test_mse_examples_and_oracle():
    rng = np.random.default_rng(3)
    gt = rng.normal(size=(3, 5, 2))
    assert ph.mse_metric(gt, gt)["total"] == 0
    plus = gt.copy()
    plus[..., 1] += 1
    m = ph.mse_metric(plus, gt, ["a", "b"])
    assert m["a"] == 0 and m["b"] == pytest.approx(1.0, abs=1e-15) and m["total"] == pytest.approx(1.0, abs=1e-15)
    pred = rng.normal(size=(3, 5, 2))
    per, tot = mse_loops(pred, gt)
    m = ph.mse_metric(pred, gt)
    assert abs(m["0"] - per[0]) <= 1e-12 and abs(m["1"] - per[1]) <= 1e-12 and abs(m["total"] - tot) <= 1e-12
    with pytest.raises(ValueError):
        ph.mse_metric(pred, gt[:2])


def test_r_metric_examples_and_oracle():
    rng = np.random.default_rng(4)
    zero = ph.ResidualField(np.zeros((2, 3)), np.zeros((2, 3, 2)))
    assert ph.r_metric(zero) == 0
    one = ph.ResidualField(np.zeros((2, 3)), np.zeros((2, 3, 2)))
    one.r1[1, 2] = 0.7
    assert ph.r_components(one)["continuity"] == pytest.approx(0.49 / 6, rel=1e-15)
    r1, r2 = rng.normal(size=(4, 7)), rng.normal(size=(4, 7, 2))
    ref = r_components_loops(r1, r2)
    got = ph.r_components(ph.ResidualField(r1, r2))
    for a, b in zip(got.values(), ref):
        assert abs(a - b) <= 1e-12
    assert abs(ph.r_metric(ph.ResidualField(r1, r2)) - sum(ref) / 3) <= 1e-12


def test_report_formats():
    res = ph.ResidualField(np.full((1, 2), 0.1), np.zeros((1, 2, 2)))
    pred = np.zeros((2, 2, 4))
    rep = ph.mse_r_report(pred, None, res, dx=(0.01, 0.01), dt=0.02, mse={"total": 0.4432})
    assert "0.4432" in rep.to_text() and "mse.total = 0.4432" in rep.to_kv()
    nogt = ph.mse_r_report(pred, None, res, dx=(0.01, 0.01), dt=0.02)
    kv = nogt.to_kv()
    assert "mse = n/a" in kv and "mse.total" not in kv
    assert "n/a" in nogt.to_text()
    parsed = ph.parse_report(kv)
    assert set(parsed) >= {"r.total", "r.continuity", "r.momentum_x", "r.momentum_y", "n_q", "t", "dx", "dt"}
    again = ph.mse_r_report(pred, None, res, dx=(0.01, 0.01), dt=0.02)
    assert again.to_kv().encode() == kv.encode() and again.to_text() == nogt.to_text()


def test_report_with_gt_has_all_channels():
    gt = np.random.default_rng(5).normal(size=(2, 3, 4))
    res = ph.ResidualField(np.zeros((1, 3)), np.zeros((1, 3, 2)))
    kv = ph.parse_report(ph.mse_r_report(gt + 1, gt, res, dio.CHANNELS, (0.01, 0.01), 0.02).to_kv())
    for c in dio.CHANNELS:
        assert float(kv[f"mse.{c}"]) == pytest.approx(1.0)
    assert float(kv["mse.total"]) == pytest.approx(4.0)


def test_richardson_on_synthetic_sequence():
    hs = np.array([0.1, 0.05, 0.025, 0.0125])
    errs = [np.array([3.0 + 2 * h**2, 1.0 - h**2]) for h in hs]
    np.testing.assert_allclose(ph.richardson_order(errs), [2.0, 2.0], rtol=1e-9)
