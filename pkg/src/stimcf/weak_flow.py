"""Drive the regularization to zero and read off the weak flow.

The sweep runs the continuation per epsilon rung with warm starts, tracks
Cauchy deltas of u and the L1 stabilization of |grad u| (the compactness
hypotheses are monitored, not proven), and keeps the gradient tail needed to
reconstruct the unit normal across plateaus.  Jump regions are plateaus of
the metric gradient; their outer boundary radius is located by value-crossing
extrapolation, which resolves the horizon well below one cell.
"""

import numpy as np

from . import solver as sv
from . import surface_geometry as sg
from .extraction import extract_isosurface
from .radial_oracle import sphere_area

TRUNCATION_MARGIN = 1.0     # flow times within this of s(L-2) are boundary-driven
GRAD_TOL_FACTOR = 10.0      # plateau when |grad u|_g < factor * eps_last
DEFAULT_EPS0 = 1.0 / 32.0


class FlowError(RuntimeError):
    pass


class JumpRegion:
    def __init__(self, cells, value, t_lo, t_hi, volume, inner_radius=None,
                 outer_radius=None, inner_mesh=None, outer_mesh=None,
                 truncation_artifact=False):
        self.cells = cells
        self.value = value
        self.t_lo = t_lo
        self.t_hi = t_hi
        self.volume = volume
        self.inner_radius = inner_radius
        self.outer_radius = outer_radius
        self.inner_mesh = inner_mesh
        self.outer_mesh = outer_mesh
        self.truncation_artifact = truncation_artifact

    def __repr__(self):
        kind = "truncation" if self.truncation_artifact else "jump"
        return (f"JumpRegion({kind}, t0={self.value:.4g}, cells={len(self.cells)}, "
                f"outer_r={self.outer_radius})")


class FlowRecord:
    """Everything a run produces: the limit u, sweep diagnostics, jumps,
    reconstructed normals and the IMCF reference."""

    def __init__(self, domain, variant="stimcf"):
        self.domain = domain
        self.ids = domain.ids
        self.variant = variant
        self.epsilons = []
        self.sup_deltas = []
        self.grad_l1_deltas = []
        self.grad_increase_fraction = []
        self.traces = []
        self.apriori = []
        self.tail = []            # (eps, interior, metric-gradient data)
        self.solution = None
        self.imcf = None
        self.cauchy_ok = None
        self.suggestion = None
        self.jumps = []
        self.normal_field = None
        self.level_sets = {}

    @property
    def eps_last(self):
        return self.epsilons[-1]

    @property
    def u(self):
        return self.solution.full_field()

    def truncation_threshold(self):
        bc = self.solution.bc
        return bc - min(TRUNCATION_MARGIN, 0.35 * bc)

    def probe_mask(self):
        return self.u < self.truncation_threshold()

    def valid_time_range(self):
        return (0.0, self.truncation_threshold())


def _gradient_data(dom, sol):
    """What the normal reconstruction needs per rung: for the radial lane the
    signed radial derivative, for grids the per-axis raised gradient."""
    if dom.kind == "radial":
        u = sol.full_field()
        return np.gradient(u, dom.r) / dom.a
    grads = [dom.G_ops[k] @ sol.interior + dom.G_bc_outer[k] * sol.bc
             for k in range(dom.d)]
    return np.stack(grads, axis=1)


def _grad_l1(dom, sol):
    if dom.kind == "radial":
        vols = sphere_area(dom.n) * dom.A * dom.a * dom.h
        return float(np.sum(np.abs(_gradient_data(dom, sol)) * vols))
    vols = dom.sg_act * dom.h ** dom.d
    return float(np.sum(sol.metric_gradient() * vols))


def epsilon_sweep(dom, schedule=None, eps_last=1e-3, eps0=None,
                  tol_sweep=0.05, tol_newton=sv.TOL_NEWTON, keep_tail=4,
                  with_imcf=True, variant="stimcf", monitor=True):
    """Run the continuation per epsilon rung down a geometric schedule.

    The first rung cold-starts from the transport profile and backs off to a
    smaller eps0 when that fails (smaller regularization is the easier cold
    start for this operator).  Subsequent rungs warm-start from the previous
    rung, per continuity parameter.  Returns a FlowRecord.
    """
    feas = dom.feasibility()
    if schedule is None:
        start = min(feas["eps_max"], DEFAULT_EPS0) if eps0 is None else eps0
        schedule = []
        e = start
        while True:
            schedule.append(e)
            if e <= eps_last:
                break
            e = max(e / 2.0, eps_last)
    schedule = list(schedule)
    if np.any(np.diff(schedule) >= 0):
        raise FlowError("epsilon schedule must be strictly decreasing")
    if schedule[0] > feas["eps_max"]:
        raise FlowError(
            f"schedule starts above the feasibility bound {feas['eps_max']:.3g}")
    rec = FlowRecord(dom, variant)
    warm = {}
    imcf_warm = None
    prev = None
    prev_grad = None
    prev_l1 = None
    i = 0
    while i < len(schedule):
        eps = schedule[i]
        try:
            sol, trace, rungs = sv.continuation_solve(
                dom, eps, warm=warm, tol=tol_newton, variant=variant)
        except sv.SolverError:
            if prev is None and len(rec.epsilons) == 0:
                # cold-start backoff: drop the top rung and retry colder,
                # but never below 8 eps_last (a cascade that deep means the
                # configuration is wrong, not the start)
                schedule = [e for e in schedule if e < eps]
                if not schedule or schedule[0] < 8 * eps_last * (1 - 1e-12):
                    raise FlowError(
                        f"cold start failed down to eps={eps:.3g}; "
                        "check alpha/L (domain size) and resolution")
                continue
            raise
        warm = rungs
        rec.epsilons.append(eps)
        rec.traces.append(trace)
        grad = _gradient_data(dom, sol)
        l1 = _grad_l1(dom, sol)
        if prev is not None:
            delta = float(np.max(np.abs(sol.full_field() - prev)))
            rec.sup_deltas.append(delta)
            rec.grad_l1_deltas.append(abs(l1 - prev_l1))
            gmag_now = np.abs(grad) if dom.kind == "radial" else sol.metric_gradient()
            gmag_prev = prev_grad
            tol_g = 1e-6 * (1 + np.max(gmag_prev))
            rec.grad_increase_fraction.append(
                float(np.mean(gmag_now > gmag_prev + tol_g)))
        prev = sol.full_field()
        prev_grad = np.abs(grad) if dom.kind == "radial" else sol.metric_gradient()
        prev_l1 = l1
        rec.tail.append((eps, sol.interior.copy(), grad))
        if len(rec.tail) > keep_tail:
            rec.tail.pop(0)
        imcf_sol = None
        if with_imcf:
            imcf_sol = sv.imcf_reference_solve(dom, eps, warm=imcf_warm,
                                               tol=tol_newton)
            if not imcf_sol.converged:
                raise FlowError(f"IMCF reference failed at eps={eps}")
            imcf_warm = imcf_sol.interior
        if monitor:
            rec.apriori.append(sv.apriori_monitor(dom, sol,
                                                  imcf_reference=imcf_sol))
        rec.solution = sol
        rec.imcf = imcf_sol
        i += 1
    if rec.sup_deltas:
        rec.cauchy_ok = rec.sup_deltas[-1] < tol_sweep
        if not rec.cauchy_ok:
            rate = (rec.sup_deltas[-1] / rec.sup_deltas[-2]
                    if len(rec.sup_deltas) > 1 else np.nan)
            rec.suggestion = (f"sweep not Cauchy at tol {tol_sweep}: last delta "
                              f"{rec.sup_deltas[-1]:.3g}, rate {rate:.3g}; "
                              "extend the schedule below "
                              f"{rec.eps_last:.3g}")
    else:
        rec.cauchy_ok = True
    return rec


def frauendiener_solve(dom, **kwargs):
    """Same pipeline for the projected-flow level-set equation
    (div term = |grad u|/2 + sqrt(|grad u|^2 + 4 P-term^2)/2)."""
    kwargs.setdefault("variant", "frauendiener")
    return epsilon_sweep(dom, **kwargs)


# -- jump detection ----------------------------------------------------------

def detect_jumps(rec, grad_tol=None, min_cells=3, mesh_subdivisions=4):
    """Plateau components of |grad u|_g below grad_tol with positive volume.

    grad_tol defaults to GRAD_TOL_FACTOR * eps_last: on a plateau the
    regularized gradient is O(eps) (the rescaled graph has order-one slope),
    so a fixed multiple of the final regularization separates plateaus from
    transport regions.  Components living at the outer truncation value are
    classified as truncation artifacts, not jumps.
    """
    dom = rec.domain
    sol = rec.solution
    if grad_tol is None:
        grad_tol = GRAD_TOL_FACTOR * rec.eps_last
    bc = sol.bc
    jumps = []
    if dom.kind == "radial":
        u = rec.u
        grad = np.abs(np.gradient(u, dom.r)) / dom.a
        mask = grad < grad_tol
        idx = np.where(mask)[0]
        if len(idx) == 0:
            rec.jumps = []
            return rec.jumps
        breaks = np.where(np.diff(idx) > 1)[0]
        comps = np.split(idx, breaks + 1)
        omega = sphere_area(dom.n)
        for comp in comps:
            if len(comp) < min_cells:
                continue
            t0 = float(np.median(u[comp]))
            vol = float(np.sum(omega * dom.A[comp] * dom.a[comp] * dom.h))
            trunc = t0 > rec.truncation_threshold()
            inner_r = float(dom.r[comp[0]])
            outer_r = _plateau_outer_radius(rec, t0, comp)
            jump = JumpRegion(comp, t0, float(np.min(u[comp])),
                              float(np.max(u[comp])), vol,
                              inner_radius=inner_r, outer_radius=outer_r,
                              truncation_artifact=trunc)
            if not trunc and dom.n in (1, 2):
                jump.inner_mesh = _radial_mesh(dom, inner_r,
                                               subdivisions=mesh_subdivisions)
                jump.outer_mesh = _radial_mesh(dom, outer_r,
                                               subdivisions=mesh_subdivisions)
            jumps.append(jump)
    else:
        from scipy import ndimage
        grad = sol.metric_gradient()
        full = np.zeros(dom.shape, float).ravel()
        act = np.where(dom.active)[0]
        mask_full = np.zeros(len(full), bool)
        mask_full[act[grad < grad_tol]] = True
        lab, nlab = ndimage.label(mask_full.reshape(dom.shape))
        lab = lab.ravel()
        ufull = _full_grid_field(rec)
        for li in range(1, nlab + 1):
            cells = np.where(lab == li)[0]
            if len(cells) < min_cells:
                continue
            vals = ufull.ravel()[cells]
            t0 = float(np.median(vals))
            vol = float(np.sum(dom.sqrt_g[cells]) * dom.h ** dom.d)
            trunc = t0 > rec.truncation_threshold()
            rads = np.linalg.norm(dom.centers[cells], axis=1)
            jump = JumpRegion(cells, t0, float(np.min(vals)), float(np.max(vals)),
                              vol, inner_radius=float(np.min(rads)),
                              outer_radius=float(np.max(rads)),
                              truncation_artifact=trunc)
            if not trunc:
                delta = 3 * rec.eps_last
                jump.inner_mesh = _grid_level_mesh(rec, t0 - delta)
                jump.outer_mesh = _grid_level_mesh(rec, t0 + delta)
            jumps.append(jump)
    rec.jumps = [j for j in jumps if not j.truncation_artifact]
    rec.truncation_plateaus = [j for j in jumps if j.truncation_artifact]
    return rec.jumps


def _plateau_outer_radius(rec, t0, comp, k=60.0):
    """Outer edge of a radial plateau by anchored value-crossing extrapolation.

    Past the gradient knee the arrival time follows u - u_edge ~ c (r - r*)^p
    (p = 3/2 where the spacetime mean curvature has a square-root zero, 2 for
    K = 0 horizons).  Crossing radii of three geometric thresholds fit the
    exponent and extrapolate the O(delta^(1/p)) bias away; anchoring the
    thresholds at the knee value keeps the plateau's own eps-scale variation
    out of the fit.  Falls back to the knee radius when the fit is unusable.
    """
    dom = rec.domain
    u = rec.u
    r = dom.r
    grad = np.abs(np.gradient(u, r)) / dom.a
    g_med = float(np.median(grad[comp]))
    knee_level = max(8.0 * g_med, 2.0 * GRAD_TOL_FACTOR * rec.eps_last)
    i = comp[-1]
    while i < len(r) - 2 and grad[i] <= knee_level:
        i += 1
    knee = i
    u_edge = float(u[knee])
    uu = np.maximum.accumulate(u[knee:])
    rr = r[knee:]

    def crossing(target):
        j = int(np.searchsorted(uu, target))
        if j <= 0:
            return rr[0]
        if j >= len(uu):
            return rr[-1]
        w = (target - uu[j - 1]) / max(uu[j] - uu[j - 1], 1e-300)
        return rr[j - 1] + w * (rr[j] - rr[j - 1])

    d_base = max(k * rec.eps_last, 2.0 * (u_edge - t0))
    r1, r2, r3 = (crossing(u_edge + d_base * f) for f in (16.0, 4.0, 1.0))
    num, den = r1 - r2, r2 - r3
    fallback = float(r[knee])
    if den <= 1e-14 or num <= den:
        return fallback
    ratio = num / den
    if not (1.3 < ratio < 20.0):
        return fallback
    est = float(r3 - den / (ratio - 1.0))
    if not (fallback - 5 * dom.h <= est <= r3):
        return fallback
    return est


def _radial_mesh(dom, radius, subdivisions=3, segments=512):
    if dom.n == 1:
        return sg.circle_mesh(radius, segments=segments)
    return sg.icosphere(radius=radius, subdivisions=subdivisions)


def _full_grid_field(rec):
    """u extended to the full grid: smooth signed-distance continuation into
    E0 (slope matched to the boundary gradient) and the Dirichlet value
    outside, so interpolants and contouring stay well behaved."""
    dom = rec.domain
    full = np.full(int(np.prod(dom.shape)), rec.solution.bc)
    act = np.where(dom.active)[0]
    grad = rec.solution.metric_gradient()
    near = dom.r_act <= dom.e0_radius + 2 * dom.h
    slope = float(np.median(grad[near])) if np.any(near) else 1.0
    inside = dom.sdf <= 0
    full[inside] = dom.sdf[inside] * max(slope, 1e-3)
    full[act] = rec.solution.interior
    return full.reshape(dom.shape)


def _grid_level_mesh(rec, t):
    dom = rec.domain
    full = _full_grid_field(rec)
    origin = dom.centers[0]
    return extract_isosurface(full, origin, dom.h, t,
                              interior_point=dom.e0_center)


def grid_field_interpolator(rec):
    """Quadratic interpolant of the extended u field (grid lane), used as the
    level-set description when extracting mesh diagnostics."""
    from scipy.ndimage import map_coordinates
    dom = rec.domain
    full = _full_grid_field(rec)
    origin = dom.centers[0]

    def phi(points):
        pts = np.atleast_2d(points)
        coords = (pts - origin[None, :]) / dom.h
        return map_coordinates(full, coords.T, order=2, mode="nearest")
    return phi


# -- level sets ---------------------------------------------------------------

def extract_level_sets(rec, times, subdivisions=3, segments=512):
    """Meshes of Sigma_t = boundary of {u < t}; at jump values both the inner
    and outer boundary (Sigma_t, Sigma_t+) are returned as a pair."""
    lo, hi = rec.valid_time_range()
    out = []
    for t in times:
        if t < lo - 1e-12 or t > hi:
            raise FlowError(
                f"time {t} beyond the outer boundary influence zone (max {hi:.3g})")
        jump = _jump_at(rec, t)
        if jump is not None:
            out.append((jump.inner_mesh, jump.outer_mesh))
            continue
        if rec.domain.kind == "radial":
            r_t = _radius_of_level(rec, t)
            mesh = _radial_mesh(rec.domain, r_t, subdivisions, segments)
            sg.populate_diagnostics(rec.ids, mesh,
                                    level_set=sg.sphere_level_set(np.zeros(rec.domain.ids.dim)))
        else:
            mesh = _grid_level_mesh(rec, t)
            if mesh is not None:
                # away from jumps the flow field itself describes the level
                # set; its normal-field divergence is the H of choice
                sg.populate_diagnostics(rec.ids, mesh,
                                        level_set=grid_field_interpolator(rec),
                                        level_set_h=rec.domain.h)
        out.append(mesh)
        rec.level_sets[t] = mesh
    return out


def _jump_at(rec, t):
    for j in rec.jumps:
        if j.t_lo - 1e-12 <= t <= j.t_hi + 1e-12:
            return j
    return None


def _radius_of_level(rec, t):
    dom = rec.domain
    u = np.maximum.accumulate(rec.u)
    return float(np.interp(t, u, dom.r))


def level_radius(rec, t):
    """Radius of the level set (radial lane), honoring jumps."""
    j = _jump_at(rec, t)
    if j is not None:
        return j.outer_radius
    return _radius_of_level(rec, t)


# -- normal reconstruction ----------------------------------------------------

class NormalField:
    def __init__(self, vectors, cauchy_ok, max_angle, plateau_mask):
        self.vectors = vectors
        self.cauchy_ok = cauchy_ok
        self.max_angle = max_angle
        self.plateau_mask = plateau_mask


def reconstruct_normal_field(rec, angle_tol_deg=1.0):
    """Limit of nu_eps = grad u_eps / |grad u_eps| over the sweep tail.

    Plateau cells accept the limit when consecutive tail normals agree in
    angle below the tolerance; non-Cauchy cells are flagged and excluded from
    horizon verification.  Off plateaus the final gradient direction is used.
    """
    dom = rec.domain
    if not rec.jumps and not getattr(rec, "truncation_plateaus", []):
        detect_jumps(rec)
    grad_tol = GRAD_TOL_FACTOR * rec.eps_last
    if dom.kind == "radial":
        signs = [np.sign(g + 1e-300) for (_, _, g) in rec.tail]
        agree = np.ones(len(dom.r), bool)
        for k in range(1, len(signs)):
            agree &= (signs[k] == signs[k - 1])
        vec = signs[-1]
        plateau = np.zeros(len(dom.r), bool)
        for j in rec.jumps:
            plateau[j.cells] = True
        field = NormalField(vec, bool(np.all(agree[plateau])) if plateau.any()
                            else True, 0.0, plateau)
    else:
        tails = []
        for (eps_k, interior, grad) in rec.tail:
            mag = np.sqrt(np.sum(grad * grad, axis=1))
            tails.append(grad / np.maximum(mag, 1e-300)[:, None])
        max_ang = np.zeros(dom.n_unknowns)
        for k in range(1, len(tails)):
            cosv = np.clip(np.sum(tails[k] * tails[k - 1], axis=1), -1, 1)
            max_ang = np.maximum(max_ang, np.degrees(np.arccos(cosv)))
        plateau = np.zeros(dom.n_unknowns, bool)
        act = np.where(dom.active)[0]
        pos = {c: i for i, c in enumerate(act)}
        for j in rec.jumps:
            for c in j.cells:
                if c in pos:
                    plateau[pos[c]] = True
        ok = max_ang <= angle_tol_deg
        vec = tails[-1]
        field = NormalField(vec, bool(np.all(ok[plateau])) if plateau.any()
                            else True,
                            float(np.max(max_ang[plateau])) if plateau.any() else 0.0,
                            plateau)
    rec.normal_field = field
    return field


def plateau_k_trace(rec, radii):
    """|P_nu| along plateau radii with the reconstructed (radial) normal."""
    prof = rec.domain.profile
    return np.abs(prof.k_trace(np.asarray(radii, float)))


# -- horizon verification -----------------------------------------------------

class HorizonReport:
    def __init__(self, radius, max_rel_residual, weak_inner_ok, per_facet,
                 tol_h):
        self.radius = radius
        self.max_rel_residual = max_rel_residual
        self.weak_inner_ok = weak_inner_ok
        self.per_facet = per_facet
        self.tol_h = tol_h

    @property
    def passed(self):
        return self.max_rel_residual < self.tol_h and self.weak_inner_ok

    def __repr__(self):
        return (f"HorizonReport(r={self.radius:.5g}, "
                f"max|H-|P||/H={self.max_rel_residual:.3%}, "
                f"{'pass' if self.passed else 'FAIL'})")


def verify_horizon(rec, jump, tol_h=0.03):
    """Check H = |P_nu| on the outer jump boundary Sigma_t0+.

    Per-facet residuals use the reconstructed normal; the inner boundary is
    tested for the weak inequality H >= |P_nu| only where it coincides with
    the hull boundary (disjoint horizons make that check vacuous).
    """
    if rec.normal_field is None:
        reconstruct_normal_field(rec)
    dom = rec.domain
    if jump.outer_mesh is None:
        raise FlowError("jump has no outer boundary mesh")
    if dom.kind == "radial":
        mesh = jump.outer_mesh
        sg.populate_diagnostics(rec.ids, mesh,
                                level_set=sg.sphere_level_set(np.zeros(rec.ids.dim)))
        H = mesh.H
        P = mesh.P
    else:
        mesh = jump.outer_mesh
        sg.populate_diagnostics(rec.ids, mesh, level_set=None)
        H, P = mesh.H, mesh.P
    # scale: |H| where it is the dominant quantity, else the round-sphere
    # curvature at this radius (a K = 0 horizon has H -> 0, |P| = 0, and the
    # raw ratio |H - |P||/H would be 1 no matter how accurate the radius)
    scale = np.maximum(np.maximum(np.abs(H), np.abs(P)),
                       rec.ids.n / max(jump.outer_radius, 1e-12))
    rel = np.abs(H - np.abs(P)) / scale
    coincide = (jump.outer_radius - jump.inner_radius) < 2.5 * dom.h
    weak_ok = True
    if coincide and jump.inner_mesh is not None:
        sg.populate_diagnostics(rec.ids, jump.inner_mesh,
                                level_set=sg.sphere_level_set(np.zeros(rec.ids.dim))
                                if dom.kind == "radial" else None)
        weak_ok = bool(np.median(jump.inner_mesh.H)
                       >= np.abs(np.median(jump.inner_mesh.P)) - tol_h)
    return HorizonReport(jump.outer_radius, float(np.max(rel)), weak_ok,
                         rel, tol_h)


# -- structural invariants ----------------------------------------------------

def jump_band_excess(rec, jump):
    """Volume of {t_lo < u < t_hi} beyond the plateau cells, in units of one
    cell layer of the outer boundary (a genuine plateau stays below 1)."""
    dom = rec.domain
    u = rec.u if dom.kind == "radial" else rec.solution.interior
    band = (u > jump.t_lo) & (u < jump.t_hi)
    if dom.kind == "radial":
        vols = sphere_area(dom.n) * dom.A * dom.a * dom.h
        band_vol = float(np.sum(vols[band]))
        plateau_vol = float(np.sum(vols[jump.cells]))
        layer = sphere_area(dom.n) * (jump.outer_radius ** dom.n) * dom.h
    else:
        vols = dom.sg_act * dom.h ** dom.d
        band_vol = float(np.sum(vols[band]))
        act = np.where(dom.active)[0]
        sel = np.isin(act, jump.cells)
        plateau_vol = float(np.sum(vols[sel]))
        layer = sphere_area(dom.n) * (jump.outer_radius ** dom.n) * dom.h
    return max(band_vol - plateau_vol, 0.0) / layer


def interior_extrema(rec, margin=None):
    """Worst strict interior local max/min margins of u (should be ~0)."""
    dom = rec.domain
    if margin is None:
        margin = 10 * rec.eps_last * dom.h
    if dom.kind == "radial":
        u = rec.u
        mx = np.maximum(u[:-2], u[2:])
        mn = np.minimum(u[:-2], u[2:])
        max_excess = float(np.max(u[1:-1] - mx, initial=0.0))
        min_excess = float(np.max(mn - u[1:-1], initial=0.0))
    else:
        full = _full_grid_field(rec).ravel()
        act = np.where(dom.active)[0]
        max_excess = 0.0
        min_excess = 0.0
        neigh = []
        for ax in range(dom.d):
            for stp in (+1, -1):
                neigh.append(dom._neighbors(act, ax, stp))
        neigh = np.stack(neigh, axis=1)
        vals = np.where(neigh >= 0, full[np.maximum(neigh, 0)], np.inf)
        mn = np.min(vals, axis=1)
        vals = np.where(neigh >= 0, full[np.maximum(neigh, 0)], -np.inf)
        mx = np.max(vals, axis=1)
        uact = full[act]
        max_excess = float(np.max(uact - mx, initial=0.0))
        min_excess = float(np.max(mn - uact, initial=0.0))
    return {"max_excess": max_excess, "min_excess": min_excess,
            "margin": margin,
            "ok": max_excess <= margin and min_excess <= margin}
