import numpy as np
import pytest

from stimcf import build_preset, build_domain
from stimcf import weak_flow as wf
from stimcf import radial_oracle as orc
from tests.test_radial_oracle import R_STAR_ANISO


@pytest.fixture(scope="module")
def flat_rec():
    ids = build_preset("flat", n=2)
    dom = build_domain(ids, {"radius": 1.0}, L=6.0, alpha=1.9, h=1 / 64.)
    rec = wf.epsilon_sweep(dom, eps_last=1e-3)
    wf.detect_jumps(rec)
    wf.reconstruct_normal_field(rec)
    return rec


@pytest.fixture(scope="module")
def aniso_rec():
    ids = build_preset("paper_anisotropic")
    dom = build_domain(ids, {"radius": 1.0}, L=6.0, alpha=1.9, h=1 / 128.)
    rec = wf.epsilon_sweep(dom, eps_last=1e-4)
    wf.detect_jumps(rec)
    wf.reconstruct_normal_field(rec)
    return rec


@pytest.fixture(scope="module")
def schw_rec():
    ids = build_preset("schwarzschild_isotropic", m=1.0)
    dom = build_domain(ids, {"radius": 0.4}, L=4.0, alpha=1.5, h=1 / 256.)
    rec = wf.epsilon_sweep(dom, eps_last=3e-5)
    wf.detect_jumps(rec)
    wf.reconstruct_normal_field(rec)
    return rec


def test_flat_sweep_matches_expanding_sphere(flat_rec):
    r = flat_rec.domain.r
    band = (r >= 1.2) & (r <= 3.0)
    err = np.max(np.abs(flat_rec.u[band] - 2 * np.log(r[band])))
    assert err / (2 * np.log(3)) < 0.02
    assert flat_rec.cauchy_ok
    assert np.all(np.diff(flat_rec.sup_deltas) < 0)


def test_flat_has_no_jumps_but_a_truncation_plateau(flat_rec):
    assert flat_rec.jumps == []
    assert len(flat_rec.truncation_plateaus) == 1
    t0 = flat_rec.truncation_plateaus[0].value
    assert t0 == pytest.approx(flat_rec.solution.bc, abs=0.05)


def test_flat_level_set_radius(flat_rec):
    t = 2 * np.log(2.0)
    mesh = wf.extract_level_sets(flat_rec, [t])[0]
    radii = np.linalg.norm(mesh.centroids, axis=1)
    assert np.mean(radii) == pytest.approx(2.0, rel=5e-3)
    assert np.median(mesh.H) == pytest.approx(1.0, rel=2e-2)


def test_extraction_rejects_truncation_zone(flat_rec):
    with pytest.raises(wf.FlowError, match="influence zone"):
        wf.extract_level_sets(flat_rec, [flat_rec.solution.bc - 0.1])


def test_nonnegative_and_imcf_dominated(flat_rec, aniso_rec, schw_rec):
    for rec in (flat_rec, aniso_rec, schw_rec):
        assert rec.u.min() >= -rec.eps_last - 1e-10
        gap = rec.u - rec.imcf.full_field()
        assert np.max(gap) <= 1e-6 * (1 + np.max(np.abs(rec.u)))


def test_monotone_along_rays_and_no_extrema(flat_rec, aniso_rec):
    for rec in (flat_rec, aniso_rec):
        ext = wf.interior_extrema(rec)
        assert ext["ok"], ext
        # shell ordering beyond all plateaus
        r = rec.domain.r
        u = rec.u
        lo, hi = rec.valid_time_range()
        r1 = wf.level_radius(rec, 0.5 * hi)
        sel1 = np.abs(r - r1) < 0.05
        sel2 = np.abs(r - (r1 + 1.0)) < 0.05
        assert np.min(u[sel2]) >= np.max(u[sel1]) - 1e-9


def test_anisotropic_jump_structure(aniso_rec):
    assert len(aniso_rec.jumps) == 1
    j = aniso_rec.jumps[0]
    # jump at t = 0 covering the annulus out to the horizon radius
    assert abs(j.value) < 20 * aniso_rec.eps_last
    assert j.inner_radius == pytest.approx(1.0, abs=2 * aniso_rec.domain.h)
    assert j.outer_radius == pytest.approx(R_STAR_ANISO, rel=0.02)
    assert wf.jump_band_excess(aniso_rec, j) < 1.0


def test_anisotropic_horizon_verification(aniso_rec):
    rep = wf.verify_horizon(aniso_rec, aniso_rec.jumps[0])
    assert rep.max_rel_residual < 0.03
    assert rep.passed


def test_jump_time_extraction_returns_both_boundaries(aniso_rec):
    j = aniso_rec.jumps[0]
    pair = wf.extract_level_sets(aniso_rec, [j.value])[0]
    inner, outer = pair
    assert np.mean(np.linalg.norm(inner.centroids, axis=1)) \
        == pytest.approx(1.0, abs=0.05)
    assert np.mean(np.linalg.norm(outer.centroids, axis=1)) \
        == pytest.approx(R_STAR_ANISO, rel=0.02)
    # away from the jump a single mesh comes back
    single = wf.extract_level_sets(aniso_rec, [1.0])[0]
    assert not isinstance(single, tuple)


def test_normal_field_radial_and_cauchy(aniso_rec):
    nf = aniso_rec.normal_field
    assert nf.cauchy_ok
    assert np.all(nf.vectors[aniso_rec.domain.r > 1.05] > 0)


def test_schwarzschild_jump_to_minimal_surface(schw_rec):
    assert len(schw_rec.jumps) == 1
    j = schw_rec.jumps[0]
    assert abs(j.value) < 20 * schw_rec.eps_last
    assert j.outer_radius == pytest.approx(0.5, rel=0.02)
    rep = wf.verify_horizon(schw_rec, j)
    assert rep.max_rel_residual < 0.03


def test_gradient_monotone_along_sweep_tail(flat_rec, aniso_rec):
    # interior gradient bound surrogate: the fraction of cells whose
    # gradient grows between consecutive rungs stays small in the tail
    for rec in (flat_rec, aniso_rec):
        assert rec.grad_increase_fraction[-1] < 0.2


def test_frauendiener_flat_identical():
    ids = build_preset("flat", n=2)
    dom = build_domain(ids, {"radius": 1.0}, L=4.0, alpha=1.9, h=1 / 64.)
    a = wf.epsilon_sweep(dom, eps_last=1e-3, with_imcf=False)
    b = wf.frauendiener_solve(dom, eps_last=1e-3, with_imcf=False)
    assert np.array_equal(a.u, b.u)


@pytest.fixture(scope="module")
def fr_rec():
    ids = build_preset("paper_anisotropic")
    dom = build_domain(ids, {"radius": 1.0}, L=6.0, alpha=1.9, h=1 / 128.)
    rec = wf.frauendiener_solve(dom, eps_last=1e-4)
    wf.detect_jumps(rec)
    return rec


def test_frauendiener_same_jump_set(aniso_rec, fr_rec):
    h = aniso_rec.domain.h
    ja = aniso_rec.jumps[0]
    jf = fr_rec.jumps[0]
    assert abs(jf.outer_radius - ja.outer_radius) < 1.5 * h
    assert abs(jf.inner_radius - ja.inner_radius) < 1.5 * h


def test_frauendiener_smooth_gradient_identity(fr_rec):
    # |grad u| = (H^2 - P^2)/H pointwise in smooth radial regions
    dom = fr_rec.domain
    prof = dom.profile
    r = dom.r
    sel = (r > 1.6) & (r < 6.0)
    grad = np.gradient(fr_rec.u, r)[sel] / dom.a[sel]
    H = prof.mean_curvature(r[sel])
    P = prof.k_trace(r[sel])
    expect = (H ** 2 - P ** 2) / H
    assert np.max(np.abs(grad - expect) / expect) < 0.01
