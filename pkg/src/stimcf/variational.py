"""Variational functionals, minimality tests, outward hulls and Q(t).

The discrete perimeter is a face-weighted cut metric.  In the radial lane it
is exact (sphere areas); on Cartesian grids the stencil couples axis,
face-diagonal and (3D) corner-diagonal neighbors with weights calibrated so
straight interfaces are measured uniformly in direction to within a few
percent (constants below).  Min-cut is exact for this discrete functional,
which is also the one every comparison here uses.
"""

import itertools

import numpy as np

from ._maxflow import MaxFlow
from .radial_oracle import sphere_area
from .weak_flow import level_radius

TOL_MIN_REL = 1e-3


def _cut_stencil(d):
    """Offsets and unit weights of the calibrated cut metric, with the
    measured worst-case direction error (flat space, unit spacing)."""
    if d == 2:
        offs = [(1, 0), (0, 1), (1, 1), (1, -1)]
        base = np.array([np.sqrt(2) - 1.0, np.sqrt(2) - 1.0,
                         1.0 - 1.0 / np.sqrt(2), 1.0 - 1.0 / np.sqrt(2)])
        thetas = np.linspace(0, np.pi / 4, 181)
        nus = np.stack([np.cos(thetas), np.sin(thetas)], 1)
    elif d == 3:
        offs = ([(1, 0, 0), (0, 1, 0), (0, 0, 1)]
                + [(1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1),
                   (0, 1, 1), (0, 1, -1)]
                + [(1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1)])
        base = np.array([0.15479] * 3 + [0.12982] * 6 + [0.08150] * 4)
        rng = np.random.default_rng(11)
        nus = rng.normal(size=(400, 3))
        nus /= np.linalg.norm(nus, axis=1)[:, None]
    else:
        raise ValueError("cut stencil supports d = 2, 3")
    # base weights make axis and diagonal planes exact (zero anisotropy
    # error there); err records the worst error over general directions
    O = np.array(offs, float)
    est = np.abs(nus @ O.T) @ base
    err = float(max(abs(est.max() - 1), abs(1 - est.min())))
    return [tuple(o) for o in offs], base, err


CUT_ANISOTROPY_2D = _cut_stencil(2)[2]
CUT_ANISOTROPY_3D = _cut_stencil(3)[2]


class SetProblem:
    """Cells, adjacency weights and bulk gains for set functionals.

    value(F) = sum of cut weights between F and its complement (within the
    problem's cell universe plus the outside) minus sum of gains over F - E.
    E is the mandatory core (the hull constraint F >= E).
    """

    def __init__(self, n_cells, pairs, weights, boundary_weights, gains,
                 core_mask, free_mask):
        self.n_cells = int(n_cells)
        self.pairs = np.asarray(pairs, int).reshape(-1, 2)
        self.weights = np.asarray(weights, float)
        self.boundary_weights = np.asarray(boundary_weights, float)
        self.gains = np.asarray(gains, float)
        self.core = np.asarray(core_mask, bool)
        self.free = np.asarray(free_mask, bool)
        if np.any(self.core & self.free):
            raise ValueError("core and free cells must be disjoint")

    def perimeter(self, mask):
        mask = np.asarray(mask, bool)
        cut = mask[self.pairs[:, 0]] != mask[self.pairs[:, 1]]
        return float(np.sum(self.weights[cut]) +
                     np.sum(self.boundary_weights[mask]))

    def value(self, mask):
        mask = np.asarray(mask, bool)
        if np.any(self.core & ~mask):
            raise ValueError("candidate set must contain the core")
        gain = float(np.sum(self.gains[mask & ~self.core]))
        return self.perimeter(mask) - gain


def exhaustive_minimizers(problem, tol=1e-11):
    """All minimizers over subsets of the free cells (<= 20 of them), the
    minimum value, and the inclusion-minimal minimizer.

    Vectorized over the whole power set: per-face cut indicators are XORs of
    subset bit columns, so a 2^20 enumeration is a handful of array passes.
    """
    free = np.where(problem.free)[0]
    k = len(free)
    if k > 20:
        raise ValueError("enumeration limited to 20 free cells")
    col = {c: j for j, c in enumerate(free)}
    npat = 1 << k
    pats = np.arange(npat, dtype=np.uint32)
    bits = ((pats[:, None] >> np.arange(k, dtype=np.uint32)[None, :]) & 1
            ).astype(bool)
    values = np.zeros(npat)
    in_set = problem.core
    for (a, b), w in zip(problem.pairs, problem.weights):
        fa, fb = a in col, b in col
        if fa and fb:
            cut = bits[:, col[a]] ^ bits[:, col[b]]
            values += w * cut
        elif fa or fb:
            j = col[a] if fa else col[b]
            other_in = in_set[b if fa else a]
            cut = bits[:, j] != other_in
            values += w * cut
        else:
            values += w * (in_set[a] != in_set[b])
    for i in np.where(problem.boundary_weights > 0)[0]:
        if i in col:
            values += problem.boundary_weights[i] * bits[:, col[i]]
        elif in_set[i]:
            values += problem.boundary_weights[i]
    for i in np.where(problem.gains != 0)[0]:
        if i in col:
            values -= problem.gains[i] * bits[:, col[i]]
        elif in_set[i] and not problem.core[i]:
            values -= problem.gains[i]
    best = float(np.min(values))
    arg = np.where(values <= best + tol)[0]
    masks = []
    for p in arg:
        mask = problem.core.copy()
        mask[free[bits[p]]] = True
        masks.append(mask)
    minimal = masks[0].copy()
    for m in masks[1:]:
        minimal &= m
    # the minimizer lattice is closed under intersection
    if abs(problem.value(minimal) - best) > 10 * max(tol, 1e-12):
        minimal = min(masks, key=lambda m: int(np.sum(m)))
    return best, masks, minimal


def mincut_hull(problem):
    """Inclusion-minimal minimizer of the set functional by max-flow.

    Source side = inside F.  Gains enter as source links on free cells (paid
    when excluded); core cells are pinned to the source, non-universe cells
    to the sink via the boundary weights.
    """
    n = problem.n_cells
    mf = MaxFlow(n)
    s, t = mf.source, mf.sink
    INF = (np.sum(problem.weights) + np.sum(problem.boundary_weights)
           + np.sum(np.abs(problem.gains)) + 1.0)
    for i in np.where(problem.core)[0]:
        mf.add_edge(s, int(i), INF)
    for i in np.where(problem.free)[0]:
        if problem.gains[i] > 0:
            mf.add_edge(s, int(i), problem.gains[i])
    for i in np.where(~problem.core & ~problem.free)[0]:
        mf.add_edge(int(i), t, INF)
    for (a, b), w in zip(problem.pairs, problem.weights):
        if w > 0:
            mf.add_edge(int(a), int(b), w, w)
    for i in np.where(problem.boundary_weights > 0)[0]:
        mf.add_edge(int(i), t, problem.boundary_weights[i])
    mf.solve()
    side = mf.source_side()
    mask = np.asarray(side, bool)
    mask |= problem.core
    mask &= (problem.core | problem.free)
    return mask, problem.value(mask)


# -- domain-backed set problems ------------------------------------------------

def radial_set_problem(dom, core_radius, omega_radius, p_field=None):
    """Shell cells on a radial domain; exact metric areas and volumes.

    p_field: |P_nu| per node (defaults to the radial-normal value |kappa_r|).
    """
    r, a, b, n = dom.r, dom.a, dom.b, dom.n
    ncell = len(r) - 1
    omega = sphere_area(n)
    areas = omega * (b * r) ** n          # at nodes = faces of the shells
    vols = omega * 0.5 * (((b * r) ** n * a)[:-1] + ((b * r) ** n * a)[1:]) * dom.h
    if p_field is None:
        p_field = np.abs(dom.kr)
    pcell = 0.5 * (p_field[:-1] + p_field[1:])
    gains = pcell * vols
    pairs = np.stack([np.arange(ncell - 1), np.arange(1, ncell)], 1)
    weights = areas[1:-1]
    boundary = np.zeros(ncell)
    boundary[-1] = areas[-1]
    centers = 0.5 * (r[:-1] + r[1:])
    core = centers < core_radius
    free = (~core) & (centers < omega_radius)
    prob = SetProblem(ncell, pairs, weights, boundary, gains, core, free)
    prob.shell_centers = centers
    prob.shell_volumes = vols
    return prob


def grid_set_problem(dom, core_mask_cells, omega_mask_cells, p_cells):
    """Cut-metric problem over the active cells of a grid domain.

    Weights carry the local metric area factor sqrt(det g * g^(oo)) along
    each stencil offset; gains are |P_nu| times metric cell volume.
    """
    d = dom.d
    offs, unit_w, _ = _cut_stencil(d)
    act = np.where(dom.active)[0]
    nact = len(act)
    pos = -np.ones(int(np.prod(dom.shape)), int)
    pos[act] = np.arange(nact)
    pairs, weights = [], []
    boundary = np.zeros(nact)
    hfac = dom.h ** (d - 1)
    gdiag = dom.g_diag[act]
    sg = dom.sqrt_g[act]
    for off, w in zip(offs, unit_w):
        nb = act.copy()
        ok = np.ones(nact, bool)
        coords = np.array(np.unravel_index(act, dom.shape))
        coords = coords + np.array(off)[:, None]
        for ax in range(d):
            ok &= (coords[ax] >= 0) & (coords[ax] < dom.shape[ax])
        nb = np.full(nact, -1)
        nb[ok] = np.ravel_multi_index(tuple(coords[:, ok]), dom.shape)
        o = np.array(off, float)
        o /= np.linalg.norm(o)
        # metric line element along the offset and area factor
        for i in range(nact):
            if nb[i] < 0 or not dom.active[nb[i]]:
                continue
            jj = pos[nb[i]]
            gseg = np.sum(gdiag[i] * o * o)
            wij = w * hfac * sg[i] / np.sqrt(gseg)
            pairs.append((i, jj))
            weights.append(wij)
    gains = p_cells * sg * dom.h ** d
    core = np.asarray(core_mask_cells, bool)
    free = np.asarray(omega_mask_cells, bool) & ~core
    return SetProblem(nact, np.array(pairs), np.array(weights), boundary,
                      gains, core, free)


def outward_hull(problem):
    """Minimizer of perimeter minus the |P_nu| bulk gain over supersets of
    the core, exact on the discrete functional (min cut)."""
    mask, value = mincut_hull(problem)
    return mask, value


# -- function-level functional -------------------------------------------------

def functional_on_function(dom, v, bulk, region_mask=None, bc=0.0):
    """J(v) = total variation of v plus the frozen bulk term integral.

    The TV quadrature reuses the solver's face structure (radial: exact; the
    grid lane uses axis faces with metric weights), so set indicators
    reproduce the perimeter up to the stencil choice.
    """
    if dom.kind == "radial":
        omega = sphere_area(dom.n)
        areas = omega * (dom.b * dom.r) ** dom.n
        fa = 0.5 * (areas[1:] + areas[:-1])
        dv = np.abs(np.diff(v))
        tv = np.sum(fa * dv) if region_mask is None else np.sum(
            (fa * dv)[region_mask[:-1] & region_mask[1:]])
        vols = omega * dom.A * dom.a * dom.h
        cell = v * bulk * vols
        blk = np.sum(cell if region_mask is None else cell[region_mask])
        return float(tv + blk)
    gn = dom.D_op @ v + dom.D_bc_outer * bc
    ginv_n = dom.f_ginv[np.arange(len(gn)), dom.f_ax]
    face_w = dom.f_sqrt_g * np.sqrt(ginv_n) * dom.h ** (dom.d - 1) * dom.h
    tv = np.sum(face_w * np.abs(gn))
    vols = dom.sg_act * dom.h ** dom.d
    cell = v * bulk * vols
    blk = np.sum(cell if region_mask is None else cell[region_mask])
    return float(tv + blk)


def frozen_bulk(rec):
    """sqrt(|grad u|^2 + P_nu^2) of the recorded limit, the frozen bulk term."""
    dom = rec.domain
    if dom.kind == "radial":
        grad = np.abs(np.gradient(rec.u, dom.r)) / dom.a
        return np.sqrt(grad ** 2 + dom.kr ** 2)
    grad = rec.solution.metric_gradient()
    if rec.normal_field is None:
        from .weak_flow import reconstruct_normal_field
        reconstruct_normal_field(rec)
    nu = rec.normal_field.vectors
    act = np.where(dom.active)[0]
    K = dom.K_act
    gin = dom.ginv_cells
    # P_nu = tr K - K(nu#, nu#) with nu# the raised unit vector
    mag = np.sqrt(np.sum(gin * nu * nu, axis=1))
    nuh = nu / np.maximum(mag, 1e-300)[:, None]
    raised = gin * nuh
    trK = sum(gin[:, k] * K[:, k, k] for k in range(dom.d))
    pnu = trK - np.einsum('mi,mj,mij->m', raised, raised, K)
    return np.sqrt(grad ** 2 + pnu ** 2)


class MinimalityReport:
    def __init__(self):
        self.rows = []
        self.failures = []

    @property
    def ok(self):
        return not self.failures


def minimality_test(rec, n_random=60, seed=5, tol_rel=TOL_MIN_REL, families=(
        "bump", "dent", "plateau_shift", "level_dilation")):
    """Compare J(u) against compactly supported competitors.

    Families: random bumps and dents, plateau value shifts on detected jumps,
    and level dilations (blended resampling u(s x)).  A failure is a
    competitor beating the solution by more than tol_rel of the local energy
    scale.
    """
    dom = rec.domain
    if dom.kind != "radial":
        raise NotImplementedError("minimality sweep runs on the radial lane")
    rng = np.random.default_rng(seed)
    bulk = frozen_bulk(rec)
    u = rec.u
    r = dom.r
    lo, hi = rec.valid_time_range()
    rmax = level_radius(rec, hi) if hi > lo else r[-1]
    base = functional_on_function(dom, u, bulk)
    scale = abs(base) + 1.0
    rep = MinimalityReport()

    def try_competitor(name, v):
        val = functional_on_function(dom, v, bulk)
        margin = val - base
        rep.rows.append((name, margin))
        if margin < -tol_rel * scale:
            rep.failures.append((name, margin))

    for k in range(n_random):
        rho = rng.uniform(3 * dom.h, 0.5)
        # {v != u} must stay compactly inside the annulus
        x0 = rng.uniform(r[0] + rho + 2 * dom.h,
                         max(min(rmax, r[-1] - rho - 2 * dom.h),
                             r[0] + rho + 3 * dom.h))
        c = rng.uniform(0.01, 0.5) * (1 if k % 2 == 0 else -1)
        hat = np.maximum(0.0, 1.0 - np.abs(r - x0) / rho)
        fam = "bump" if c > 0 else "dent"
        if fam in families:
            try_competitor(f"{fam}[{k}]", u + c * hat)
    if "plateau_shift" in families:
        for j, jump in enumerate(rec.jumps):
            for c in (0.05, -0.05, 0.2, -0.2):
                v = u.copy()
                v[jump.cells] += c
                try_competitor(f"plateau_shift[{j},{c}]", v)
    if "level_dilation" in families:
        for sdil in (0.97, 1.03):
            cut = np.clip((rmax - r) / max(rmax - r[0], dom.h), 0, 1)
            cut = np.minimum(cut, np.clip((r - r[0]) / 0.5, 0, 1))
            us = np.interp(np.clip(sdil * r, r[0], r[-1]), r, u)
            try_competitor(f"level_dilation[{sdil}]", u + cut * (us - u))
    return rep


# -- set functional over recorded flows ----------------------------------------

def functional_on_set(problem, mask, bulk_cells=None):
    """|d*F| - integral over F of the frozen bulk (per-cell values times
    volume); defaults to the problem's stored gains."""
    mask = np.asarray(mask, bool)
    per = problem.perimeter(mask)
    if bulk_cells is None:
        blk = float(np.sum(problem.gains[mask]))
    else:
        blk = float(np.sum(bulk_cells[mask]))
    return per - blk


def submodularity_gap(problem, mask_a, mask_b):
    """J(A u B) + J(A n B) - J(A) - J(B) <= 0 for the cut functional."""
    union = mask_a | mask_b
    inter = mask_a & mask_b
    return (functional_on_set(problem, union)
            + functional_on_set(problem, inter)
            - functional_on_set(problem, mask_a)
            - functional_on_set(problem, mask_b))


# -- area identity and the monotone quantity ------------------------------------

def area_identity_check(rec, jump):
    """Residual of |dE_t+| = |dE_t| + int_(E_t+ - E_t) |P_nu| at a jump.

    Returns the three terms and the relative residual.  The identity needs
    the inner set to be outward optimizing; a trapped E_0 genuinely violates
    it and the signed residual records by how much.
    """
    dom = rec.domain
    if dom.kind != "radial":
        raise NotImplementedError("area identity runs on the radial lane")
    omega = sphere_area(dom.n)

    def area(rad):
        b = float(dom.ids.radial.b(rad))
        return omega * (b * rad) ** dom.n

    a_in = area(jump.inner_radius)
    a_out = area(jump.outer_radius)
    rr = np.linspace(jump.inner_radius, jump.outer_radius, 4097)
    b = np.asarray(dom.ids.radial.b(rr), float)
    a = np.asarray(dom.ids.radial.a(rr), float)
    p = np.abs(np.asarray(dom.ids.radial.kappa_r(rr), float))
    integrand = p * omega * (b * rr) ** dom.n * a
    bulk = float(np.trapezoid(integrand, rr))
    residual = a_out - (a_in + bulk)
    return {"outer_area": a_out, "inner_area": a_in, "bulk": bulk,
            "residual": residual, "rel_residual": residual / a_out}


def monotone_quantity(rec, times=None, n_times=160):
    """Q(t) = |Sigma_t| + int_(u<=t minus E0) |P_nu|, its derivative and the
    smooth-flow prediction int sqrt((H+|P|)/(H-|P|)).

    Returns a dict of arrays over the probe times; Q must be nondecreasing
    (checked by the caller against quadrature tolerance).
    """
    dom = rec.domain
    if dom.kind != "radial":
        raise NotImplementedError("Q(t) tracing runs on the radial lane")
    lo, hi = rec.valid_time_range()
    if times is None:
        times = np.linspace(lo, hi - 0.05 * (hi - lo), n_times)
    times = np.asarray(times, float)
    omega = sphere_area(dom.n)
    r = dom.r
    vols = omega * dom.A * dom.a * dom.h
    pnode = np.abs(dom.kr)
    cum = np.concatenate([[0.0], np.cumsum(
        0.5 * (pnode[1:] * vols[1:] + pnode[:-1] * vols[:-1]))])

    def bulk_to(rad):
        return float(np.interp(rad, r, cum))

    radii = np.array([level_radius(rec, t) for t in times])
    areas = omega * (np.asarray(dom.ids.radial.b(radii)) * radii) ** dom.n
    Q = areas + np.array([bulk_to(rad) for rad in radii])
    prof = dom.profile
    H = prof.mean_curvature(radii)
    P = prof.k_trace(radii)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.sqrt(np.maximum(H + np.abs(P), 0.0)
                            / np.maximum(H - np.abs(P), 1e-300))
    predicted = areas * integrand
    dQ = np.gradient(Q, times)
    return {"t": times, "Q": Q, "dQ_dt": dQ, "predicted": predicted,
            "area": areas, "radius": radii}
