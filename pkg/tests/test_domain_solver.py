import numpy as np
import pytest
from numpy.testing import assert_allclose

from stimcf import build_preset, build_domain
from stimcf import solver as sv
from stimcf.domain import DomainError
from stimcf import records


@pytest.fixture(scope="module")
def flat_dom():
    ids = build_preset("flat", n=2)
    return build_domain(ids, {"radius": 1.0}, L=4.0, alpha=1.9, h=1 / 64.)


@pytest.fixture(scope="module")
def aniso_dom():
    ids = build_preset("paper_anisotropic")
    return build_domain(ids, {"radius": 1.0}, L=4.0, alpha=1.9, h=1 / 128.)


def test_build_preconditions():
    ids = build_preset("flat", n=2)
    with pytest.raises(DomainError):
        build_domain(ids, {"radius": 1.0}, L=4.0, alpha=2.0, h=1 / 32.)
    with pytest.raises(DomainError):
        build_domain(ids, {"radius": 1.0}, L=1.5, alpha=1.5, h=1 / 32.)
    with pytest.raises(DomainError):
        build_domain(ids, {"radius": -1.0}, L=4.0, alpha=1.5, h=1 / 32.)


def test_flat_subsolution_margin(flat_dom):
    # degenerate-operator residual of the log subsolution: (n - alpha)/r
    margin = flat_dom.subsolution_margin()
    assert_allclose(margin, (2.0 - 1.9) / flat_dom.r, rtol=1e-10)
    assert np.all(margin[flat_dom.r >= flat_dom.R0] > 0)


def test_feasibility_numbers(flat_dom):
    feas = flat_dom.feasibility()
    assert 0 < feas["eps_max"] < 1
    assert feas["eps_max"] == pytest.approx(
        0.9 * feas["boundary_area"] / feas["volume"])
    # the bridge-barrier cap underflows on any usable domain
    assert feas["eps_theoretical_cap"] < 1e-30


def test_radial_jacobian_matches_fd(aniso_dom):
    rng = np.random.default_rng(3)
    dom = aniso_dom
    u = np.clip(2 * np.log(dom.r), 0, 2.0) + 0.05 * rng.normal(size=len(dom.r))
    u[0], u[-1] = 0.0, 2.0
    for eps, s, variant in [(0.05, 1.0, "stimcf"), (0.02, 0.3, "stimcf"),
                            (0.05, 1.0, "frauendiener")]:
        J = dom.jacobian(u, eps, s, variant).toarray()
        d = 1e-6
        cols = rng.choice(len(u) - 2, 25, replace=False)
        for j in cols:
            up = u.copy()
            up[j + 1] += d
            um = u.copy()
            um[j + 1] -= d
            col = (dom.residual(up, eps, s, variant)
                   - dom.residual(um, eps, s, variant)) / (2 * d)
            denom = max(1.0, np.max(np.abs(col)))
            # a wrong term shows up at O(1); FD truncation sits far below
            assert np.max(np.abs(col - J[:, j])) / denom < 5e-4


def test_residual_trivial_states(flat_dom):
    # u = 0 with eps = 1, s = 0: divergence term zero, root term one
    u = np.zeros(len(flat_dom.r))
    res = flat_dom.residual(u, 1.0, 0.0)
    assert_allclose(res, -1.0, rtol=0, atol=1e-14)


def test_s_term_is_the_only_k_dependence(flat_dom, aniso_dom):
    rng = np.random.default_rng(5)
    u = np.clip(2 * np.log(flat_dom.r), 0, 2.0)
    u += 0.1 * rng.normal(size=len(u))
    u[0], u[-1] = 0, 2
    # s = 0 kills the K term: identical residuals whatever K is
    r_flat = flat_dom.residual(u, 0.05, 0.0)
    u2 = np.interp(aniso_dom.r, flat_dom.r, u)
    r_a0 = aniso_dom.residual(u2, 0.05, 0.0)
    r_a0_b = aniso_dom.residual(u2, 0.05, 0.0, "frauendiener")
    assert np.array_equal(r_a0, r_a0_b)
    # and for K = 0 data the operator family is s-independent bit for bit
    assert np.array_equal(flat_dom.residual(u, 0.05, 0.0),
                          flat_dom.residual(u, 0.05, 1.0))


def test_newton_zero_iterations_from_exact_solution(flat_dom):
    sol = sv.newton_solve(flat_dom, 0.02, 1.0, bc=2.0)
    assert sol.converged
    again = sv.newton_solve(flat_dom, 0.02, 1.0, u_init=sol.interior, bc=2.0)
    assert again.converged and again.iterations == 0
    assert np.array_equal(again.interior, sol.interior)


def test_bit_for_bit_s_independence_for_k_zero(flat_dom):
    a = sv.newton_solve(flat_dom, 0.02, 0.0, bc=2.0)
    b = sv.newton_solve(flat_dom, 0.02, 1.0, bc=2.0)
    assert a.converged and b.converged
    assert np.array_equal(a.interior, b.interior)


def test_default_start_converges_into_barrier_window():
    # the default (transport-profile) start converges and the solution sits
    # inside the a-priori window; a subsolution start is reported honestly
    # when the damped iteration cannot move it (never silent garbage)
    ids = build_preset("flat", n=2)
    dom = build_domain(ids, {"radius": 1.0}, L=2.5, alpha=1.9, h=1 / 32.)
    sol = sv.newton_solve(dom, 0.05, 1.0, bc=dom.L - 2.0)
    assert sol.converged
    rep = sv.apriori_monitor(dom, sol)
    assert rep.ok
    v = dom.subsolution_values(shift=-2.0)[1:-1]
    from_v = sv.newton_solve(dom, 0.05, 1.0, u_init=v, bc=dom.L - 2.0)
    assert from_v.converged or from_v.diagnostic is not None


def test_eps_above_feasibility_reports_diagnostic(flat_dom):
    feas = flat_dom.feasibility()
    eps_bad = 1.5 * feas["eps_divergence_bound"]
    sol = sv.newton_solve(flat_dom, eps_bad, 1.0, bc=2.0, maxit=15)
    assert not sol.converged
    assert "feasibility" in sol.diagnostic


def test_apriori_window_on_converged_solves(aniso_dom):
    warm = None
    for eps in (1 / 32., 1 / 64., 1 / 128.):
        sol = sv.newton_solve(aniso_dom, eps, 1.0, u_init=warm, bc=2.0)
        assert sol.converged
        warm = sol.interior
        rep = sv.apriori_monitor(aniso_dom, sol)
        assert rep.ok, rep.violations
        assert rep.measured["min_u"] >= -eps - 1e-8
        assert rep.measured["max_u"] <= 2.0 + 1e-8


def test_barrier_ordering_against_imcf(aniso_dom):
    sol = sv.newton_solve(aniso_dom, 1 / 64., 1.0, bc=2.0)
    ref = sv.imcf_reference_solve(aniso_dom, 1 / 64.)
    # here bc matches, so domination is the per-eps barrier ordering
    sol2 = sv.newton_solve(aniso_dom, 1 / 64., 1.0, bc=ref.bc,
                           u_init=None)
    rep = sv.apriori_monitor(aniso_dom, sol2, imcf_reference=ref)
    assert rep.ok, rep.violations
    v1_floor = -sol.eps  # bridge barrier is above -eps by construction
    assert rep.measured["min_u"] >= v1_floor - 1e-8


def test_second_order_convergence_against_fine_reference():
    ids = build_preset("flat", n=2)
    sols = {}
    for h in (1 / 32., 1 / 64., 1 / 128.):
        dom = build_domain(ids, {"radius": 1.0}, L=3.0, alpha=1.9, h=h)
        sols[h] = (dom, sv.newton_solve(dom, 0.02, 1.0, bc=1.0))
        assert sols[h][1].converged
    dom_f, fine = sols[1 / 128.]
    errs = []
    for h in (1 / 32., 1 / 64.):
        dom, sol = sols[h]
        u_f = np.interp(dom.r, dom_f.r, fine.full_field())
        band = (dom.r > 1.1) & (dom.r < 0.9 * dom.r[-1])
        errs.append(np.max(np.abs(sol.full_field() - u_f)[band]))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_continuation_trace_and_k_zero_collapse(flat_dom, aniso_dom):
    sol, trace, rungs = sv.continuation_solve(flat_dom, 0.03)
    assert [row[0] for row in trace] == [1.0]
    sol2, trace2, rungs2 = sv.continuation_solve(aniso_dom, 0.03)
    assert trace2[0][0] == 0.0 and trace2[-1][0] == 1.0
    assert all(row[3] for row in trace2)
    assert sol2.converged and sol2.s == 1.0


def test_checkpoint_roundtrip_reproduces_residual(tmp_path, aniso_dom):
    sol = sv.newton_solve(aniso_dom, 0.02, 1.0, bc=2.0)
    path = tmp_path / "state.ckpt"
    records.save_checkpoint(path, aniso_dom, sol)
    back = records.load_checkpoint(path, aniso_dom)
    assert np.array_equal(back.interior, sol.interior)
    r1 = sv.residual_field(aniso_dom, sol)
    r2 = sv.residual_field(aniso_dom, back)
    assert np.array_equal(r1, r2)
    other = build_domain(build_preset("flat", n=2), {"radius": 1.0},
                         L=4.0, alpha=1.9, h=1 / 64.)
    with pytest.raises(records.RecordError):
        records.load_checkpoint(path, other)


def test_grid_jacobian_matches_fd():
    ids = build_preset("flat", n=1)
    dom = build_domain(ids, {"radius": 1.0}, L=2.2, alpha=0.9, h=1 / 4.,
                       mode="grid")
    rng = np.random.default_rng(0)
    dom.K_act = 0.1 * rng.normal(size=dom.K_act.shape)
    dom.K_act = 0.5 * (dom.K_act + np.swapaxes(dom.K_act, 1, 2))
    u = np.clip(np.log(dom.r_act), 0, 0.2) + 0.1 * rng.normal(size=dom.n_unknowns)
    for variant in ("stimcf", "frauendiener"):
        J = dom.jacobian(u, 0.08, 0.7, 0.2, variant).toarray()
        r0 = dom.residual(u, 0.08, 0.7, 0.2, variant)
        d = 1e-7
        for j in rng.choice(dom.n_unknowns, 20, replace=False):
            up = u.copy()
            up[j] += d
            col = (dom.residual(up, 0.08, 0.7, 0.2, variant) - r0) / d
            assert np.max(np.abs(col - J[:, j])) / max(1, np.max(np.abs(col))) \
                < 2e-5


def test_grid_domain_rejects_offdiagonal_metric():
    ids = build_preset("flat", n=1)

    def skew(x):
        m = len(np.atleast_2d(x))
        g = np.broadcast_to(np.eye(2), (m, 2, 2)).copy()
        g[:, 0, 1] = g[:, 1, 0] = 0.1
        return g

    ids._metric = skew
    with pytest.raises(DomainError, match="diagonal"):
        build_domain(ids, {"radius": 1.0}, L=2.2, alpha=0.9, h=1 / 4.,
                     mode="grid")
