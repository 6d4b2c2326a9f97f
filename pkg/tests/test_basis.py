import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from tdcg.basis import (KnotGrid, PairForceField, SplineBasis1D, TensorBasis2D,
                        TimeDependentPairForceField, export_field_csv,
                        potential_from_force)


def scipy_design(grid: KnotGrid, x: np.ndarray) -> np.ndarray:
    """Independent dense design matrix from scipy's B-spline evaluation."""
    t = grid.knots()
    cols = []
    for j in range(grid.n_basis):
        c = np.zeros(grid.n_basis)
        c[j] = 1.0
        cols.append(BSpline(t, c, grid.degree, extrapolate=False)(x))
    out = np.nan_to_num(np.column_stack(cols))
    # scipy treats the closed right endpoint as outside the half-open last span
    at_hi = np.isclose(x, grid.hi)
    if np.any(at_hi):
        out[at_hi] = 0.0
        out[at_hi, -1] = 1.0
    return out


@pytest.mark.parametrize("degree,n_basis", [(1, 2), (1, 7), (3, 4), (3, 12)])
class TestAgainstScipy:
    def test_dense_matches(self, degree, n_basis):
        grid = KnotGrid(0.3, 2.1, n_basis, degree)
        b = SplineBasis1D(grid)
        x = np.linspace(0.3, 2.1, 113)
        np.testing.assert_allclose(b.dense(x), scipy_design(grid, x), atol=1e-12)

    def test_partition_of_unity(self, degree, n_basis):
        b = SplineBasis1D(KnotGrid(-1.0, 4.0, n_basis, degree))
        x = np.linspace(-1.0, 4.0, 257)
        np.testing.assert_allclose(b.dense(x).sum(axis=1), 1.0, atol=1e-12)

    def test_combine_matches_dense(self, degree, n_basis):
        rng = np.random.default_rng(5)
        b = SplineBasis1D(KnotGrid(0.0, 1.0, n_basis, degree))
        c = rng.normal(size=n_basis)
        x = rng.uniform(0.0, 1.0, 64)
        np.testing.assert_allclose(b.combine(c, x), b.dense(x) @ c, atol=1e-12)


class TestSparsity:
    def test_at_most_degree_plus_one_nonzero(self):
        b = SplineBasis1D(KnotGrid(0.0, 1.0, 9, 3))
        first, vals = b.eval_many(np.linspace(0.0, 1.0, 101))
        assert vals.shape[1] == 4
        assert np.all(first >= 0)
        assert np.all(first + 4 <= 9)

    def test_eval_sparse_single_point(self):
        b = SplineBasis1D(KnotGrid(0.0, 1.0, 6, 1))
        hits = b.eval(0.5)
        assert len(hits) <= 2
        assert sum(v for _, v in hits) == pytest.approx(1.0)

    def test_eval_outside_domain_empty(self):
        b = SplineBasis1D(KnotGrid(0.0, 1.0, 6, 1))
        assert b.eval(-0.1) == []
        assert b.eval(1.7) == []

    def test_degree_one_hat_is_interpolatory(self):
        # hat functions peak at the knots, so coefficients are nodal values
        grid = KnotGrid(1.0, 3.0, 5, 1)
        b = SplineBasis1D(grid)
        c = np.array([2.0, -1.0, 0.5, 3.0, 7.0])
        nodes = grid.lo + grid.spacing * np.arange(5)
        np.testing.assert_allclose(b.combine(c, nodes), c, atol=1e-12)


class TestKnotGrid:
    def test_rejects_unsupported_degree(self):
        with pytest.raises(ValueError):
            KnotGrid(0.0, 1.0, 5, 2)

    def test_rejects_small_basis(self):
        with pytest.raises(ValueError):
            KnotGrid(0.0, 1.0, 3, 3)

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            KnotGrid(1.0, 1.0, 5, 1)

    def test_spacing(self):
        g = KnotGrid(0.0, 2.0, 8, 3)
        assert g.n_spans == 5
        assert g.spacing == pytest.approx(0.4)


class TestTensorBasis:
    def test_flat_index_layout(self):
        r = SplineBasis1D(KnotGrid(0.0, 1.0, 5, 1))
        t = SplineBasis1D(KnotGrid(0.0, 2.0, 4, 1))
        tb = TensorBasis2D(r, t)
        assert tb.size == 20
        assert tb.flat_index(2, 3) == 11
        hits = dict(tb.eval(0.5, 1.0))
        for s, v in hits.items():
            d, b = divmod(s, 4)
            rv = dict(r.eval(0.5))[d]
            tv = dict(t.eval(1.0))[b]
            assert v == pytest.approx(rv * tv)

    def test_product_sums_to_one(self):
        r = SplineBasis1D(KnotGrid(0.0, 1.0, 6, 3))
        t = SplineBasis1D(KnotGrid(0.0, 1.0, 5, 3))
        tb = TensorBasis2D(r, t)
        total = sum(v for _, v in tb.eval(0.37, 0.81))
        assert total == pytest.approx(1.0)


class TestPairForceField:
    def test_zero_beyond_cutoff(self):
        b = SplineBasis1D(KnotGrid(0.5, 2.0, 6, 3))
        f = PairForceField(b, np.ones(6), cutoff=1.5)
        assert f.eval_pair_force(1.7) == 0.0
        assert f.eval_pair_force(1.2) != 0.0

    def test_eval_many_matches_scalar(self):
        rng = np.random.default_rng(2)
        b = SplineBasis1D(KnotGrid(0.5, 2.0, 6, 3))
        f = PairForceField(b, rng.normal(size=6), cutoff=2.0)
        r = rng.uniform(0.4, 2.2, 50)
        np.testing.assert_allclose(f.eval_many(r),
                                   [f.eval_pair_force(v) for v in r], atol=1e-14)

    def test_potential_is_antiderivative(self):
        # u(r) = int_r^cutoff f(s) ds, so -du/dr must reproduce f between grid points
        b = SplineBasis1D(KnotGrid(0.8, 2.5, 9, 3))
        f = PairForceField(b, np.linspace(2.0, -0.5, 9), cutoff=2.5)
        r = np.linspace(0.9, 2.4, 4001)
        u = potential_from_force(f, r)
        dudr = np.gradient(u, r)
        mid = slice(10, -10)
        np.testing.assert_allclose(-dudr[mid], f.eval_many(r)[mid], atol=2e-5)

    def test_potential_zero_at_cutoff(self):
        b = SplineBasis1D(KnotGrid(0.8, 2.5, 9, 3))
        f = PairForceField(b, np.ones(9), cutoff=2.5)
        u = potential_from_force(f, np.array([2.5, 3.0]))
        np.testing.assert_allclose(u, 0.0, atol=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_potential_monotone_for_repulsive_force(self, seed):
        rng = np.random.default_rng(seed)
        b = SplineBasis1D(KnotGrid(0.5, 2.0, 7, 1))
        f = PairForceField(b, rng.uniform(0.1, 3.0, 7), cutoff=2.0)
        r = np.linspace(0.5, 2.0, 200)
        u = potential_from_force(f, r)
        assert np.all(np.diff(u) <= 1e-12)


class TestTimeDependentField:
    def make(self):
        r = SplineBasis1D(KnotGrid(0.5, 2.0, 6, 3))
        t = SplineBasis1D(KnotGrid(0.0, 4.0, 5, 3))
        rng = np.random.default_rng(9)
        return TimeDependentPairForceField(TensorBasis2D(r, t),
                                           rng.normal(size=(6, 5)), cutoff=2.0)

    def test_at_time_matches_tensor_contraction(self):
        td = self.make()
        g = td.at_time(1.3)
        for r in (0.6, 1.1, 1.9):
            direct = sum(td.theta.ravel()[s] * v for s, v in td.tensor.eval(r, 1.3))
            assert g.eval_pair_force(r) == pytest.approx(direct, abs=1e-14)
            assert td.eval_pair_force_td(r, 1.3) == pytest.approx(direct, abs=1e-14)

    def test_time_clamped_to_domain(self):
        td = self.make()
        r = np.linspace(0.6, 1.9, 11)
        np.testing.assert_allclose(td.at_time(99.0).eval_many(r),
                                   td.at_time(4.0).eval_many(r), atol=1e-15)
        np.testing.assert_allclose(td.at_time(-1.0).eval_many(r),
                                   td.at_time(0.0).eval_many(r), atol=1e-15)

    def test_t_f_property(self):
        assert self.make().t_f == pytest.approx(4.0)


def test_export_field_csv_header(tmp_path):
    b = SplineBasis1D(KnotGrid(0.5, 2.0, 6, 1))
    f = PairForceField(b, np.ones(6), cutoff=2.0)
    p = tmp_path / "f.csv"
    export_field_csv(f, np.linspace(0.5, 2.0, 5), p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "r,f,u"
    assert len(lines) == 6
