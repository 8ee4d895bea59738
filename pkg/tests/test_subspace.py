import numpy as np
import pytest

from cradapt.eigensolve import SpectralSet, smallest_eigenpairs
from cradapt.estimators import compute_indicators
from cradapt.mesh import make_square_ring, make_unit_square, refine, uniform_refine
from cradapt.subspace import (BoundAuditRow, DegenerateBasisError, SpacePair, SubspaceBasis,
                              audit_bounds, classify_case, elliptic_project_to_conforming,
                              elliptic_project_to_span, energy_orthonormalize, gap_to_conforming,
                              projection_norm, rayleigh, subspace_gap, write_audit_csv)


@pytest.fixture(scope="module")
def pair():
    return SpacePair(refine(uniform_refine(make_square_ring(), 2), [0, 4, 8]))


@pytest.fixture(scope="module")
def spectra(pair):
    cr = smallest_eigenpairs(pair.cr.stiffness, pair.cr.mass, 4, factor=pair.cr.factor)
    p1 = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, 4, factor=pair.p1.factor)
    return cr, p1


def _energy(pair, v):
    return float(np.sqrt(v @ (pair.cr.stiffness @ v)))


class _Toy:
    """Two-dimensional Euclidean stand-in for a space pair."""

    class cr:
        import scipy.sparse as _sp
        stiffness = _sp.identity(2, format="csr")


def test_gap_toy_cases():
    toy = _Toy()
    ex = SubspaceBasis(np.array([1.0, 0.0]), toy)
    ey = SubspaceBasis(np.array([0.0, 1.0]), toy)
    diag = SubspaceBasis(np.array([1.0, 1.0]), toy)
    assert subspace_gap(ex, ex) == 0.0
    assert subspace_gap(ex, ey) == pytest.approx(1.0)
    assert subspace_gap(ex, diag) == pytest.approx(np.sqrt(2) / 2, abs=1e-14)


def test_gap_axioms(pair):
    rng = np.random.default_rng(0)
    n = pair.cr.ndof
    for _ in range(5):
        E = SubspaceBasis(rng.standard_normal((n, 2)), pair)
        F = SubspaceBasis(rng.standard_normal((n, 2)), pair)
        g = subspace_gap(E, F)
        assert 0 <= g <= 1
        assert abs(g - subspace_gap(F, E)) < 1e-10
        big = SubspaceBasis(np.column_stack([E.vectors @ rng.standard_normal((2, 2)),
                                             rng.standard_normal((n, 3))]), pair)
        assert subspace_gap(E, big) < 1e-10
        assert subspace_gap(big, E) > 0.5
        E2 = SubspaceBasis(E.vectors @ rng.standard_normal((2, 2)), pair)
        F2 = SubspaceBasis(F.vectors @ rng.standard_normal((2, 2)), pair)
        assert abs(subspace_gap(E2, F2) - g) < 1e-10


def test_degenerate_basis(pair):
    v = np.random.default_rng(1).standard_normal(pair.cr.ndof)
    with pytest.raises(DegenerateBasisError):
        energy_orthonormalize(SubspaceBasis(np.column_stack([v, 2 * v]), pair))


def test_projection_to_conforming(pair):
    rng = np.random.default_rng(2)
    w = rng.standard_normal(pair.p1.ndof)
    assert np.allclose(elliptic_project_to_conforming(pair, pair.to_cr(w)), w, atol=1e-12)
    u, v = rng.standard_normal((2, pair.cr.ndof))
    a, b = 0.3, -1.7
    lin = elliptic_project_to_conforming(pair, a * u + b * v)
    assert np.allclose(lin, a * elliptic_project_to_conforming(pair, u)
                       + b * elliptic_project_to_conforming(pair, v), atol=1e-12)
    once = elliptic_project_to_conforming(pair, u)
    twice = elliptic_project_to_conforming(pair, pair.to_cr(once))
    assert np.abs(twice - once).max() <= 1e-12 * np.abs(once).max()
    best = _energy(pair, u - pair.to_cr(once))
    for _ in range(20):
        z = once + 0.1 * rng.standard_normal(pair.p1.ndof)
        assert best <= _energy(pair, u - pair.to_cr(z))


def test_projection_to_span(pair, spectra):
    rng = np.random.default_rng(3)
    B = SubspaceBasis(rng.standard_normal((pair.cr.ndof, 3)), pair)
    c = rng.standard_normal(3)
    assert np.allclose(elliptic_project_to_span(B.vectors @ c, B), c)
    X = energy_orthonormalize(B)
    v = rng.standard_normal(pair.cr.ndof)
    v -= X @ (X.T @ (pair.cr.stiffness @ v))
    assert np.abs(elliptic_project_to_span(v, B)).max() < 1e-10
    cr, _ = spectra
    uk = SubspaceBasis(cr.vectors[:, 0], pair)
    assert abs(elliptic_project_to_span(cr.vectors[:, 2], uk)[0]) < 1e-9


def test_gap_to_conforming(pair, spectra):
    rng = np.random.default_rng(4)
    E = SubspaceBasis.from_p1(pair, rng.standard_normal((pair.p1.ndof, 2)))
    assert gap_to_conforming(E) < 1e-10
    cr, _ = spectra
    mu_bounds = []
    for k in range(3):
        f = compute_indicators(pair.cr, cr.vectors[:, k], cr.values[k], k, p1=pair.p1)
        g = gap_to_conforming(SubspaceBasis(cr.vectors[:, k], pair))
        assert g <= np.sqrt(f.mu2_total / cr.values[k])
        mu_bounds.append(g)
    # cluster-sum chain
    E = SubspaceBasis(cr.vectors[:, 1:3], pair)
    assert gap_to_conforming(E) ** 2 <= mu_bounds[1] ** 2 + mu_bounds[2] ** 2 + 1e-14


def test_projection_norm_bounds(pair, spectra):
    cr, p1 = spectra
    E = SubspaceBasis(cr.vectors[:, 1:3], pair)
    F = SubspaceBasis.from_p1(pair, p1.vectors[:, :1])
    assert 0 <= projection_norm(E, F) <= 1
    assert projection_norm(E, E) == pytest.approx(1.0)


def test_rayleigh(pair, spectra):
    cr, _ = spectra
    for k in range(4):
        assert rayleigh(pair.cr, cr.vectors[:, k]) == pytest.approx(cr.values[k], rel=1e-9)
    rng = np.random.default_rng(5)
    v = rng.standard_normal(pair.cr.ndof)
    assert rayleigh(pair.cr, 4.0 * v) == pytest.approx(rayleigh(pair.cr, v), rel=1e-14)
    for _ in range(50):
        assert rayleigh(pair.cr, rng.standard_normal(pair.cr.ndof)) >= cr.values[0]
    with pytest.raises(ValueError):
        rayleigh(pair.cr, np.zeros(pair.cr.ndof))


def test_classify_case():
    assert classify_case([1.0, 2.0], 3.0) == "below"
    assert classify_case([4.0, 5.0], 3.0) == "above"
    assert classify_case([2.0, 4.0], 3.0) == "mixed"


def test_mixed_case_skips(pair, spectra):
    cr, p1 = spectra
    ref = 0.5 * (cr.values[1] + cr.values[2])
    res = audit_bounds(pair, cr, p1, [1, 2], ref, [1.0, 1.0])
    assert res.case == "mixed" and res.rows == [] and "straddles" in res.notice


def test_audit_below_on_unit_square():
    ratios, gaps = [], []
    for n in (8, 16, 32, 64):
        pair = SpacePair(make_unit_square(n))
        cr = smallest_eigenpairs(pair.cr.stiffness, pair.cr.mass, 1, factor=pair.cr.factor)
        p1 = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, 1, factor=pair.p1.factor)
        f = compute_indicators(pair.cr, cr.vectors[:, 0], cr.values[0], 0, p1=pair.p1)
        res = audit_bounds(pair, cr, p1, [0], 2 * np.pi ** 2, [f.mu2_total], [f.eta2_total])
        assert res.case == "below"
        rows = {r.bound: r for r in res.rows}
        assert rows["indicator"].lhs > 0
        # the projection bound is a theorem: lhs <= rhs
        assert rows["projection"].ratio <= 1.0
        ratios.append(rows["indicator"].ratio)
        # gap^2 against sum mu^2 / lambda^2 holds with a constant, not with 1
        gaps.append(rows["gap"].ratio)
    assert max(ratios) / min(ratios) < 2.0
    assert max(gaps) / min(gaps) < 1.2


def test_audit_above_rows():
    pair = SpacePair(make_unit_square(6))
    p1 = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, 3)
    fake = SpectralSet(p1.values.copy(), pair.to_cr(p1.vectors), p1.residuals)
    res = audit_bounds(pair, fake, p1, [1, 2], 5 * np.pi ** 2, [1.0, 2.0], [0.5, 0.5])
    assert res.case == "above"
    avg = [r for r in res.rows if r.bound == "average"]
    assert [r.j for r in avg] == [2, 3]
    assert avg[1].rhs == pytest.approx((6 * 3.0 + 4 * 1.0) / 2)


def test_audit_requires_conforming(pair, spectra):
    with pytest.raises(ValueError):
        audit_bounds(pair, spectra[0], None, [0], 100.0, [1.0])


def test_ratio_edge_cases():
    assert BoundAuditRow(1, "below", "gap", 0.0, 0.0).ratio == 0.0
    assert BoundAuditRow(1, "below", "gap", 1.0, 0.0).ratio == float("inf")
    assert BoundAuditRow(1, "below", "gap", 1.0, 4.0).ratio == 0.25


def test_audit_csv(tmp_path):
    rows = [BoundAuditRow(2, "below", "projection", 0.1, 0.2)]
    write_audit_csv(tmp_path / "a.csv", [(0, rows), (1, rows)])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "iter,case,j,lhs,rhs,ratio,bound"
    assert lines[2] == "1,below,2,0.1,0.2,0.5,projection"
