import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fbmsmp.fbm import (HurstParam, PathEnsemble, TimeGrid, covariance, covariance_matrix, kernel_constant,
                        kernel_matrix, kernel_table, kernel_value, predict_terminal, prediction_weights,
                        sample_paths, sample_paths_volterra, volterra_covariance)

hursts = st.floats(0.06, 0.49)


def test_hurst_and_grid_validation():
    for bad in (0.0, 0.04, 0.51, 1.0):
        with pytest.raises(ValueError):
            HurstParam(bad)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 10)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1)
    g = TimeGrid(2.0, 8)
    assert g.index_of(0.5) == 2
    with pytest.raises(ValueError):
        g.index_of(0.3)


def test_kernel_constant_rejects_classical():
    with pytest.raises(ValueError):
        kernel_constant(0.5)


def test_kernel_is_one_at_classical():
    assert kernel_value(0.5, 1.0, 0.3) == 1.0


def test_kernel_domain_errors():
    with pytest.raises(ValueError):
        kernel_value(0.3, 1.0, 1.0)
    with pytest.raises(ValueError):
        kernel_value(0.3, 1.0, 0.5, variant="other")


@pytest.mark.parametrize("h", [0.1, 0.3, 0.45])
def test_kernel_reproduces_covariance_by_quadrature(h):
    # independent oracle: integrate K(t, r) K(s, r) over r with adaptive quadrature
    for t, s in [(1.0, 1.0), (1.0, 0.5), (0.7, 0.2)]:
        lo = min(t, s)
        val, _ = integrate.quad(lambda r: kernel_value(h, t, r) * kernel_value(h, s, r), 0, lo, limit=200)
        print(f"h={h} t={t} s={s} quad={val:.5f} R_H={covariance(h, t, s):.5f}")
        assert val == pytest.approx(covariance(h, t, s), abs=2e-3)


def test_printed_kernel_variant_fails_norm_identity():
    h = 0.3
    val, _ = integrate.quad(lambda r: kernel_value(h, 1.0, r, variant="printed") ** 2, 0, 1, limit=200)
    print(f"printed variant int K^2 = {val:.4f} (should be 1)")
    assert abs(val - 1.0) > 0.1


@settings(max_examples=25, deadline=None)
@given(h=hursts, t=st.floats(0.05, 2.0), frac=st.floats(0.02, 0.98))
def test_kernel_matrix_matches_scalar_kernel(h, t, frac):
    s = t * frac
    assert kernel_matrix(h, t, s) == pytest.approx(kernel_value(h, t, s), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(h=hursts, t=st.floats(0, 3), s=st.floats(0, 3))
def test_covariance_symmetric_and_diagonal(h, t, s):
    assert covariance(h, t, s) == pytest.approx(covariance(h, s, t))
    assert covariance(h, t, t) == pytest.approx(t ** (2 * h))


@settings(max_examples=15, deadline=None)
@given(h=hursts, n=st.integers(4, 40))
def test_covariance_matrix_positive_definite(h, n):
    c = covariance_matrix(h, TimeGrid(1.0, n).nodes[1:])
    assert np.linalg.eigvalsh(c).min() > 0


def test_covariance_rejects_negative_times():
    with pytest.raises(ValueError):
        covariance(0.3, -0.1, 0.2)


@pytest.mark.parametrize("h", [0.1, 0.3])
def test_row_quadrature_of_kernel_table(h):
    g = TimeGrid(1.0, 64)
    err = np.abs(kernel_table(h, g).row_quadrature() - g.nodes ** (2 * h)).max()
    print(f"h={h} row quadrature max err {err:.2e}")
    assert err < 1e-6


def test_paths_are_reproducible_and_streams_are_per_path():
    g = TimeGrid(1.0, 16)
    a = sample_paths(0.3, g, 50, seed=4)
    b = sample_paths(0.3, g, 50, seed=4)
    assert np.array_equal(a.bh, b.bh) and np.array_equal(a.w, b.w)
    # path 30 drawn as part of a block starting at 20 is the same path
    c = sample_paths(0.3, g, 20, seed=4, first_path=20)
    assert np.array_equal(c.bh[10], a.bh[30]) and np.array_equal(c.w[10], a.w[30])
    d = sample_paths(0.3, g, 50, seed=5)
    assert not np.array_equal(a.bh, d.bh)
    assert np.all(a.bh[:, 0] == 0) and np.all(a.w[:, 0] == 0)


def test_m_paths_must_be_positive():
    with pytest.raises(ValueError):
        sample_paths(0.3, TimeGrid(1.0, 8), 0, 1)


def test_brownian_marginals():
    g = TimeGrid(1.0, 32)
    ens = sample_paths(0.3, g, 20000, 2)
    var = ens.w[:, -1].var()
    print(f"Var W(1) = {var:.4f}")
    assert abs(var - 1.0) < 0.05
    # W and B^H come from different streams
    assert abs(np.corrcoef(ens.w[:, -1], ens.bh[:, -1])[0, 1]) < 0.03


def test_classical_case_is_brownian():
    g = TimeGrid(1.0, 16)
    ens = sample_paths(0.5, g, 20000, 3)
    inc = np.diff(ens.bh, axis=1)
    c = np.corrcoef(inc[:, 3], inc[:, 4])[0, 1]
    print(f"H=1/2 lag-1 increment corr {c:.4f}")
    assert abs(c) < 0.03


def test_volterra_sampler_matches_its_implied_covariance():
    g = TimeGrid(1.0, 16)
    ens = sample_paths_volterra(0.3, g, 20000, 1)
    emp = ens.bh.T @ ens.bh / ens.m_paths
    assert np.abs(emp - volterra_covariance(0.3, g)).max() < 0.05


def test_volterra_midpoint_bias_grows_as_h_decreases():
    g = TimeGrid(1.0, 64)
    errs = [np.abs(volterra_covariance(h, g) - covariance_matrix(h, g.nodes)).max() for h in (0.4, 0.3, 0.2)]
    print("volterra vs exact max err", errs)
    assert errs[0] < errs[1] < errs[2]


def test_prediction_weights_give_conditional_mean():
    h, g = 0.3, TimeGrid(1.0, 16)
    w = prediction_weights(h, g)
    c = covariance_matrix(h, g.nodes)
    # orthogonality: Cov(B(T) - pred_i, B(t_j)) = 0 for j <= i
    for i in (1, 5, 12):
        resid_cov = c[-1, 1:i + 1] - w[i, 1:i + 1] @ c[1:i + 1, 1:i + 1]
        assert np.abs(resid_cov).max() < 1e-10
    assert w[-1, -1] == pytest.approx(1.0)
    ens = sample_paths(h, g, 100, 1)
    pred = predict_terminal(ens)
    assert np.allclose(pred[:, -1], ens.bh[:, -1])
    assert np.allclose(pred[:, 0], 0.0)


def test_npz_and_csv_roundtrip(tmp_path):
    ens = sample_paths(0.3, TimeGrid(1.0, 8), 5, 9)
    ens.to_npz(tmp_path / "e.npz")
    back = PathEnsemble.from_npz(tmp_path / "e.npz")
    assert np.array_equal(back.bh, ens.bh) and np.array_equal(back.path_ids, ens.path_ids)
    assert back.h == ens.h and back.grid == ens.grid
    ens.to_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "path_id,t,w,bh" and len(rows) == 1 + 5 * 9
    assert float(rows[-1].split(",")[3]) == ens.bh[-1, -1]


def test_subset_keeps_path_ids():
    ens = sample_paths(0.3, TimeGrid(1.0, 8), 10, 9)
    sub = ens.subset([2, 7])
    assert list(sub.path_ids) == [2, 7] and np.array_equal(sub.bh[1], ens.bh[7])
