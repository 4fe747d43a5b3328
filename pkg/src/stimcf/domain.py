"""Discrete annular domains Omega_L = F_L \\ E0 and the regularized operator.

Two lanes share one solver interface (``residual``, ``jacobian``, masks and
boundary data): a 1D radial lane for spherically symmetric data and a
cell-centered Cartesian lane (2D/3D) for general grids.  The outer boundary
sits where the log subsolution v = alpha ln(|x|/R0) reaches the level L; all
solutions carry u = 0 on the inner boundary and u = s (L - 2) outside.
"""

import numpy as np
import scipy.sparse as sp

from .initial_data import InitialDataError
from .radial_oracle import RadialProfile, sphere_area

SUBSOLUTION_MARGIN = 1e-3
FEASIBILITY_SAFETY = 0.9
# optional face-averaged share in the RHS |grad u|^2.  The centered square
# admits an odd-even near-null family near Dirichlet boundaries (the
# divergence term is gradient-magnitude blind once |grad u| >> eps), seen as
# an O(h) boundary-localized slope sawtooth; a face-averaged share removes it
# but costs Newton robustness at plateau-onset kinks, so the default keeps
# the centered scheme and the monitors read parity-averaged slopes instead.
RHS_FACE_BLEND_BOUNDARY = 0.0
RHS_FACE_BLEND_GLOBAL = 0.0


class DomainError(ValueError):
    pass


def rhs_value(W2, T, s, variant):
    """Right-hand side of the regularized level-set equation.

    stimcf:        sqrt(W^2 + s T^2)
    frauendiener:  W/2 + sqrt(W^2 + 4 s T^2)/2
    with W^2 = eps^2 + |grad u|^2 and T the K-contraction term; both reduce
    to W when K vanishes.
    """
    if variant == "stimcf":
        return np.sqrt(W2 + s * T ** 2)
    if variant == "frauendiener":
        return 0.5 * np.sqrt(W2) + 0.5 * np.sqrt(W2 + 4.0 * s * T ** 2)
    raise DomainError(f"unknown operator variant '{variant}'")


def rhs_derivs(W2, T, s, variant):
    """(dR/dW2, dR/dT) for the chosen right-hand side."""
    if variant == "stimcf":
        R = np.sqrt(W2 + s * T ** 2)
        return 0.5 / R, s * T / R
    if variant == "frauendiener":
        root = np.sqrt(W2 + 4.0 * s * T ** 2)
        return 0.25 / np.sqrt(W2) + 0.25 / root, 2.0 * s * T / root
    raise DomainError(f"unknown operator variant '{variant}'")


def outer_radius(L, alpha, R0):
    return R0 * np.exp(L / alpha)


class RadialDomain:
    """Nodes r_in .. r_out with warped-product metric samples.

    The discrete operator is the face-flux form of
    div_g( grad u / sqrt(eps^2 + |grad u|^2) )
      - sqrt( eps^2 + |grad u|^2 + s (grad u . K . grad u / (eps^2+|grad u|^2))^2 )
    with second-order centered differences.
    """

    kind = "radial"

    def __init__(self, ids, r_in, h, L, alpha, R0):
        if ids.radial is None:
            raise DomainError("radial domain needs data with a radial reduction")
        self.ids = ids
        self.n = ids.n
        self.L = float(L)
        self.alpha = float(alpha)
        self.R0 = float(R0)
        self.r_in = float(r_in)
        self.r_out = outer_radius(L, alpha, R0)
        N = int(round((self.r_out - self.r_in) / h))
        if N < 8:
            raise DomainError("domain too thin for the stencil")
        # land the outer boundary exactly on the last node so refinement
        # studies compare identical problems (h shifts by < h/2N)
        self.h = (self.r_out - self.r_in) / N
        self.r = np.linspace(self.r_in, self.r_out, N + 1)
        rad = ids.radial
        self.a = np.asarray(rad.a(self.r), float)
        self.b = np.asarray(rad.b(self.r), float)
        self.kr = np.asarray(rad.kappa_r(self.r), float)
        self.A = (self.b * self.r) ** self.n
        self.af = 0.5 * (self.a[1:] + self.a[:-1])
        self.Af = 0.5 * (self.A[1:] + self.A[:-1])
        self.n_unknowns = N - 1
        self.profile = RadialProfile.from_initial_data(ids, r_max=4 * self.r_out)

    # geometry helpers -----------------------------------------------------
    def cell_volumes(self):
        # dual volumes of interior nodes, metric measure a (b r)^n dr dOmega
        return sphere_area(self.n) * self.A[1:-1] * self.a[1:-1] * self.h

    def boundary_measures(self):
        omega = sphere_area(self.n)
        area_in = omega * (self.b[0] * self.r[0]) ** self.n
        area_out = omega * (self.b[-1] * self.r[-1]) ** self.n
        vol = omega * np.sum(self.A * self.a) * self.h
        return area_in, area_out, vol

    def metric_gradient(self, u):
        """|grad u|_g at the nodes (centered, one-sided at the ends)."""
        du = np.gradient(u, self.r)
        return du / self.a

    def full_vector(self, interior, bc_inner, bc_outer):
        u = np.empty(len(self.r))
        u[0] = bc_inner
        u[-1] = bc_outer
        u[1:-1] = interior
        return u

    # discrete operator ----------------------------------------------------
    # |grad u|^2 in the right-hand side blends the centered square with the
    # average of face difference quotients squared (see RHS_FACE_BLEND)
    def _blend(self):
        th = np.full(len(self.r) - 2, RHS_FACE_BLEND_GLOBAL)
        th[0] = th[-1] = RHS_FACE_BLEND_BOUNDARY
        return th

    def _grad_squares(self, u):
        h, af, a = self.h, self.af, self.a
        du = np.diff(u) / h
        q2 = (du / af) ** 2
        Gc = (u[2:] - u[:-2]) / (2 * h) / a[1:-1]
        th = self._blend()
        G2 = (1 - th) * Gc ** 2 + th * 0.5 * (q2[1:] + q2[:-1])
        return du, Gc, G2

    def residual(self, u, eps, s, variant="stimcf"):
        h, af, Af, A, a, kr = self.h, self.af, self.Af, self.A, self.a, self.kr
        du, Gc, G2 = self._grad_squares(u)
        Wf = np.sqrt(eps ** 2 + (du / af) ** 2)
        F = Af * du / (af * Wf)
        div = (F[1:] - F[:-1]) / (A[1:-1] * a[1:-1] * h)
        W2 = eps ** 2 + G2
        T = G2 * kr[1:-1] / W2
        return div - rhs_value(W2, T, s, variant)

    def jacobian(self, u, eps, s, variant="stimcf"):
        h, af, Af, A, a, kr = self.h, self.af, self.Af, self.A, self.a, self.kr
        du, Gc, G2 = self._grad_squares(u)
        Wf = np.sqrt(eps ** 2 + (du / af) ** 2)
        dF = Af * eps ** 2 / (af * Wf ** 3) / h
        ci = 1.0 / (A[1:-1] * a[1:-1] * h)
        dlo = ci * dF[:-1]
        dhi = ci * dF[1:]
        dd = -ci * (dF[1:] + dF[:-1])
        W2 = eps ** 2 + G2
        T = G2 * kr[1:-1] / W2
        dRdW2, dRdT = rhs_derivs(W2, T, s, variant)
        # T = G2 k/(eps^2 + G2): dT/dG2 = k eps^2 / W2^2
        dRdG2 = dRdW2 + dRdT * kr[1:-1] * eps ** 2 / W2 ** 2
        th = self._blend()
        gplus = dRdG2 * th * du[1:] / (af[1:] ** 2 * h)
        gminus = dRdG2 * th * du[:-1] / (af[:-1] ** 2 * h)
        gcent = dRdG2 * (1 - th) * Gc / (h * a[1:-1])
        dlo = dlo + gminus + gcent
        dhi = dhi - gplus - gcent
        dd = dd - (gminus - gplus)
        return sp.diags([dlo[1:], dd, dhi[:-1]], [-1, 0, 1], format="csc")

    def subsolution_values(self, shift=0.0):
        v = self.alpha * np.log(np.maximum(self.r, 1e-300) / self.R0)
        return v + shift

    def subsolution_margin(self, radii=None):
        """Residual of v = alpha ln(r/R0) under the degenerate operator:
        H(r) - sqrt( (alpha/(a r))^2 + P^2 )."""
        rr = self.r if radii is None else np.asarray(radii, float)
        H = self.profile.mean_curvature(rr)
        gradv = self.alpha / (self.a if radii is None else
                              np.asarray(self.ids.radial.a(rr), float)) / rr
        P = -(self.kr if radii is None else np.asarray(self.ids.radial.kappa_r(rr), float))
        return H - np.sqrt(gradv ** 2 + P ** 2)

    def feasibility(self):
        area_in, area_out, vol = self.boundary_measures()
        eps_div = (area_in + area_out) / vol
        return {
            "eps_divergence_bound": eps_div,
            "eps_max": FEASIBILITY_SAFETY * eps_div,
            "volume": vol,
            "boundary_area": area_in + area_out,
            "eps_theoretical_cap": _bridge_cap(self),
        }


def _bridge_cap(dom):
    """The e^{-A b_L} lower-barrier cap with A = 2(C2 + |lambda| + 4).

    Recorded as a diagnostic only: for any usable domain it underflows to
    zero, so it cannot gate schedules (see the run manifest).
    """
    if dom.kind == "radial":
        H_plus = max(float(dom.profile.mean_curvature(dom.r_in)), 0.0)
        lam = float(np.max(np.abs(dom.kr)))
        ric = np.abs(dom.profile.ricci_normal(dom.r))
        C1 = (dom.n + 1) * float(np.max(ric))
        b_L = dom.r_out - dom.r_in
    else:
        H_plus = dom.n / dom.e0_radius if dom.e0_radius else 1.0
        lam = float(np.max(np.abs(np.linalg.eigvalsh(dom.K_cells))))
        C1 = 0.0
        b_L = dom.R_L - dom.e0_radius
    C2 = H_plus + C1 * b_L
    A = 2.0 * (C2 + lam + 4.0)
    with np.errstate(under="ignore"):
        return float(np.exp(-A * b_L))


class GridDomain:
    """Cell-centered Cartesian lane for diagonal metrics in the chart.

    Cells inside E0 and beyond the outer sphere are Dirichlet ghosts; faces
    crossing the inner interface use first-order cut-cell interpolation to
    the zero level of the signed distance of E0.
    """

    kind = "grid"
    THETA_MIN = 0.1

    def __init__(self, ids, e0_center, e0_radius, h, L, alpha, R0):
        self.ids = ids
        self.n = ids.n
        d = ids.dim
        if d not in (2, 3):
            raise DomainError("grid lane supports chart dimensions 2 and 3")
        self.d = d
        self.L = float(L)
        self.alpha = float(alpha)
        self.R0 = float(R0)
        self.e0_center = np.asarray(e0_center, float)
        self.e0_radius = float(e0_radius)
        self.R_L = outer_radius(L, alpha, R0)
        self.h = float(h)
        half = self.R_L + 2 * h
        m = int(np.ceil(2 * half / h))
        if m % 2:
            m += 1
        self.shape = (m,) * d
        axes = [(-half + (np.arange(m) + 0.5) * h) for _ in range(d)]
        grids = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([g.ravel() for g in grids], axis=1)
        x = self.centers
        self.sdf = np.linalg.norm(x - self.e0_center, axis=1) - self.e0_radius
        rad = np.linalg.norm(x, axis=1)
        self.active = (self.sdf > 0) & (rad < self.R_L)
        if not np.any(self.sdf <= 0):
            raise DomainError("E0 is not resolved by the grid")
        if np.any((self.sdf <= 0) & (rad >= self.R_L)):
            raise DomainError("E0 touches the outer boundary")
        g = ids.metric(x)
        mask = ~np.eye(d, dtype=bool)
        if np.max(np.abs(g[:, mask])) > 1e-12:
            raise DomainError("grid lane requires a diagonal metric in the chart")
        self.g_diag = np.einsum('mii->mi', g).copy()
        self.sqrt_g = np.sqrt(np.prod(self.g_diag, axis=1))
        self.K_cells = ids.second_form(x)
        self.idx = -np.ones(len(x), dtype=int)
        self.idx[self.active] = np.arange(int(np.sum(self.active)))
        self.n_unknowns = int(np.sum(self.active))
        rr = np.maximum(rad, 1e-300)
        self._subsol = self.alpha * np.log(rr / self.R0)
        self._build_faces()
        self._build_gradients()

    # construction helpers --------------------------------------------------
    def _neighbors(self, flat, axis, step):
        coords = np.array(np.unravel_index(flat, self.shape))
        coords[axis] += step
        valid = (coords[axis] >= 0) & (coords[axis] < self.shape[axis])
        out = -np.ones(len(flat), dtype=int)
        out[valid] = np.ravel_multi_index(tuple(coords[:, valid]), self.shape)
        return out

    def _build_faces(self):
        # faces between an active cell and its +axis neighbor (active or
        # ghost), plus ghost-to-active faces on the minus side
        act = np.where(self.active)[0]
        lo_all, hi_all, ax_all = [], [], []
        for ax in range(self.d):
            plus = self._neighbors(act, ax, +1)
            ok = plus >= 0
            lo_all.append(act[ok])
            hi_all.append(plus[ok])
            ax_all.append(np.full(int(np.sum(ok)), ax))
            minus = self._neighbors(act, ax, -1)
            ghost = (minus >= 0) & (~self.active[np.maximum(minus, 0)])
            lo_all.append(minus[ghost])
            hi_all.append(act[ghost])
            ax_all.append(np.full(int(np.sum(ghost)), ax))
        self.f_lo = np.concatenate(lo_all)
        self.f_hi = np.concatenate(hi_all)
        self.f_ax = np.concatenate(ax_all)
        # classify: both active / hi ghost / lo ghost
        self.f_kind = np.zeros(len(self.f_lo), dtype=int)
        self.f_kind[~self.active[self.f_hi]] = 1
        self.f_kind[~self.active[self.f_lo]] = 2
        # ghost Dirichlet data: inner (u=0 at cut) vs outer (u=bc)
        ghost = np.where(self.f_kind == 1, self.f_hi, self.f_lo)
        self.f_ghost_inner = self.sdf[ghost] <= 0
        # cut fraction theta from cell center to the interface along the face
        th = np.ones(len(self.f_lo))
        cut = (self.f_kind > 0) & self.f_ghost_inner
        own = np.where(self.f_kind == 1, self.f_lo, self.f_hi)
        th[cut] = self.sdf[own[cut]] / np.maximum(
            self.sdf[own[cut]] - self.sdf[ghost[cut]], 1e-300)
        self.f_theta = np.clip(th, self.THETA_MIN, 1.0)
        gi = 1.0 / self.g_diag
        self.f_sqrt_g = 0.5 * (self.sqrt_g[self.f_lo] + self.sqrt_g[self.f_hi])
        self.f_ginv = 0.5 * (gi[self.f_lo] + gi[self.f_hi])

    def _build_gradients(self):
        """Sparse centered-gradient operators per axis over active cells,
        one-sided into Dirichlet ghosts (affine parts handled via bc hooks)."""
        nact = self.n_unknowns
        act = np.where(self.active)[0]
        self.G_ops = []
        self.G_bc_inner = []   # coefficient of the inner Dirichlet value (=0)
        self.G_bc_outer = []   # coefficient of the outer Dirichlet value (=bc)
        for ax in range(self.d):
            plus = self._neighbors(act, ax, +1)
            minus = self._neighbors(act, ax, -1)
            rows, cols, vals = [], [], []
            bco = np.zeros(nact)
            for sgn, nb in ((+1, plus), (-1, minus)):
                exists = nb >= 0
                is_act = exists & self.active[np.maximum(nb, 0)]
                r = self.idx[act[is_act]]
                c = self.idx[nb[is_act]]
                rows.append(r)
                cols.append(c)
                vals.append(np.full(len(r), sgn / (2 * self.h)))
                gho = exists & ~self.active[np.maximum(nb, 0)]
                inner = gho & (self.sdf[np.maximum(nb, 0)] <= 0)
                outer = gho & ~inner
                # inner ghost: linear extrapolation through the interface zero
                # at fraction theta gives u_ghost = u_i (1 - 1/theta)
                gi = act[inner]
                if len(gi):
                    th = np.clip(self.sdf[gi] / np.maximum(
                        self.sdf[gi] - self.sdf[nb[inner]], 1e-300),
                        self.THETA_MIN, 1.0)
                    rows.append(self.idx[gi])
                    cols.append(self.idx[gi])
                    vals.append(sgn * (1.0 - 1.0 / th) / (2 * self.h))
                go = act[outer]
                if len(go):
                    # outer ghost carries the Dirichlet value bc
                    bco[self.idx[go]] += sgn / (2 * self.h)
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
            op = sp.csr_matrix((vals, (rows, cols)), shape=(nact, nact))
            self.G_ops.append(op)
            self.G_bc_inner.append(np.zeros(nact))
            self.G_bc_outer.append(bco)
        # face normal-difference operator
        nline = len(self.f_lo)
        rows, cols, vals = [], [], []
        self.D_bc_outer = np.zeros(nline)
        hfac = 1.0 / self.h
        both = self.f_kind == 0
        r = np.where(both)[0]
        rows += [r, r]
        cols += [self.idx[self.f_hi[both]], self.idx[self.f_lo[both]]]
        vals += [np.full(len(r), hfac), np.full(len(r), -hfac)]
        hi_ghost = self.f_kind == 1
        r = np.where(hi_ghost)[0]
        inner = self.f_ghost_inner[hi_ghost]
        th = self.f_theta[hi_ghost]
        coef = np.where(inner, -1.0 / (th * self.h), -hfac)
        rows += [r]
        cols += [self.idx[self.f_lo[hi_ghost]]]
        vals += [coef]
        self.D_bc_outer[r[~inner]] = hfac
        lo_ghost = self.f_kind == 2
        r = np.where(lo_ghost)[0]
        inner = self.f_ghost_inner[lo_ghost]
        th = self.f_theta[lo_ghost]
        coef = np.where(inner, 1.0 / (th * self.h), hfac)
        rows += [r]
        cols += [self.idx[self.f_hi[lo_ghost]]]
        vals += [coef]
        self.D_bc_outer[r[~inner]] = -hfac
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        self.D_op = sp.csr_matrix((vals, (rows, cols)),
                                  shape=(nline, self.n_unknowns))
        # divergence assembly: owner gets +F, neighbor gets -F (metric volume)
        vol = self.sqrt_g * self.h
        lo_act = self.active[self.f_lo]
        hi_act = self.active[self.f_hi]
        r1 = self.idx[self.f_lo[lo_act]]
        c1 = np.where(lo_act)[0]
        r2 = self.idx[self.f_hi[hi_act]]
        c2 = np.where(hi_act)[0]
        rows = np.concatenate([r1, r2])
        cols = np.concatenate([c1, c2])
        vals = np.concatenate([+1.0 / vol[self.f_lo[lo_act]],
                               -1.0 / vol[self.f_hi[hi_act]]])
        self.Div_op = sp.csr_matrix((vals, (rows, cols)),
                                    shape=(self.n_unknowns, len(self.f_lo)))
        # per-cell face lookup (plus/minus face along each axis)
        nact = self.n_unknowns
        self.face_plus = np.full((self.d, nact), -1, dtype=int)
        self.face_minus = np.full((self.d, nact), -1, dtype=int)
        for fi in range(len(self.f_lo)):
            ax = self.f_ax[fi]
            lo, hi = self.f_lo[fi], self.f_hi[fi]
            if self.active[lo]:
                self.face_plus[ax, self.idx[lo]] = fi
            if self.active[hi]:
                self.face_minus[ax, self.idx[hi]] = fi
        if np.any(self.face_plus < 0) or np.any(self.face_minus < 0):
            raise DomainError("active cell missing a face (grid too tight)")
        act = np.where(self.active)[0]
        self.ginv_cells = 1.0 / self.g_diag[act]
        self.K_act = self.K_cells[act]
        self.sg_act = self.sqrt_g[act]
        self.r_act = np.linalg.norm(self.centers[act], axis=1)
        self.subsol_act = self._subsol[act]

    # operator --------------------------------------------------------------
    def _face_state(self, u, bc, eps):
        gn = self.D_op @ u + self.D_bc_outer * bc
        gts = []
        cell_grads = [self.G_ops[k] @ u + self.G_bc_outer[k] * bc
                      for k in range(self.d)]
        for k in range(self.d):
            avg = 0.5 * (self._cell_to_face(cell_grads[k], self.f_lo)
                         + self._cell_to_face(cell_grads[k], self.f_hi))
            gts.append(avg)
        W2 = eps ** 2 + 0.0
        for k in range(self.d):
            comp = np.where(self.f_ax == k, gn, gts[k])
            W2 = W2 + self.f_ginv[:, k] * comp ** 2
        return gn, gts, cell_grads, np.sqrt(W2)

    def _cell_to_face(self, cell_vals, cells):
        out = np.zeros(len(cells))
        act = self.active[cells]
        out[act] = cell_vals[self.idx[cells[act]]]
        inact = ~act
        # ghost cells: copy owner value (first-order extension)
        ghosts = cells[inact]
        owners = np.where(self.active[self.f_lo[inact]],
                          self.f_lo[inact], self.f_hi[inact])
        out[inact] = cell_vals[self.idx[owners]]
        return out

    def _cell_blend(self):
        if not hasattr(self, "_th_cells"):
            th = np.full(self.n_unknowns, RHS_FACE_BLEND_GLOBAL)
            for fi in np.where(self.f_kind > 0)[0]:
                own = self.f_lo[fi] if self.active[self.f_lo[fi]] \
                    else self.f_hi[fi]
                th[self.idx[own]] = RHS_FACE_BLEND_BOUNDARY
            self._th_cells = th
        return self._th_cells

    def _cell_w2(self, gn, cell_grads, eps):
        # blended |grad u|^2 per cell (face-averaged at boundary cells)
        th = self._cell_blend()
        W2c = np.full(self.n_unknowns, eps ** 2)
        for k in range(self.d):
            q2 = 0.5 * (gn[self.face_plus[k]] ** 2
                        + gn[self.face_minus[k]] ** 2)
            W2c = W2c + self.ginv_cells[:, k] * (
                (1 - th) * cell_grads[k] ** 2 + th * q2)
        return W2c

    def residual(self, u, eps, s, bc, variant="stimcf"):
        gn, gts, cell_grads, Wf = self._face_state(u, bc, eps)
        ginv_n = self.f_ginv[np.arange(len(gn)), self.f_ax]
        F = self.f_sqrt_g * ginv_n * gn / Wf
        div = self.Div_op @ F
        W2c = self._cell_w2(gn, cell_grads, eps)
        raised = [self.ginv_cells[:, k] * cell_grads[k] for k in range(self.d)]
        KT = np.zeros(self.n_unknowns)
        for i in range(self.d):
            for j in range(self.d):
                KT += raised[i] * raised[j] * self.K_act[:, i, j]
        T = KT / W2c
        return div - rhs_value(W2c, T, s, variant)

    def jacobian(self, u, eps, s, bc, variant="stimcf"):
        gn, gts, cell_grads, Wf = self._face_state(u, bc, eps)
        nf = len(gn)
        ginv_n = self.f_ginv[np.arange(nf), self.f_ax]
        # dF/dgn and dF/dgt_k
        dF_dgn = self.f_sqrt_g * ginv_n * (1.0 / Wf
                                           - ginv_n * gn ** 2 / Wf ** 3)
        J = self.Div_op @ (sp.diags(dF_dgn) @ self.D_op)
        half = self._face_average_op()
        for k in range(self.d):
            tang = self.f_ax != k
            comp = np.where(tang, gts[k], 0.0)
            dF_dgt = -self.f_sqrt_g * ginv_n * gn * self.f_ginv[:, k] * comp / Wf ** 3
            J = J + self.Div_op @ (sp.diags(dF_dgt) @ (half @ self.G_ops[k]))
        # RHS part: W2 from face pairs, K-term from centered gradients
        W2c = self._cell_w2(gn, cell_grads, eps)
        raised = [self.ginv_cells[:, k] * cell_grads[k] for k in range(self.d)]
        KT = np.zeros(self.n_unknowns)
        for i in range(self.d):
            for j in range(self.d):
                KT += raised[i] * raised[j] * self.K_act[:, i, j]
        T = KT / W2c
        dRdW2, dRdT = rhs_derivs(W2c, T, s, variant)
        coef_w2 = dRdW2 - dRdT * T / W2c
        th = self._cell_blend()
        for k in range(self.d):
            for faces in (self.face_plus[k], self.face_minus[k]):
                w = th * coef_w2 * self.ginv_cells[:, k] * gn[faces]
                J = J - sp.csr_matrix(
                    (w, (np.arange(self.n_unknowns), faces)),
                    shape=(self.n_unknowns, len(gn))) @ self.D_op
            J = J - sp.diags((1 - th) * coef_w2 * 2
                             * self.ginv_cells[:, k] * cell_grads[k])                 @ self.G_ops[k]
            dKT_dgk = np.zeros(self.n_unknowns)
            for j in range(self.d):
                dKT_dgk += 2 * self.ginv_cells[:, k] * raised[j] * self.K_act[:, k, j]
            J = J - sp.diags(dRdT * dKT_dgk / W2c) @ self.G_ops[k]
        return J.tocsc()

    def _face_average_op(self):
        if hasattr(self, "_half_op"):
            return self._half_op
        nf = len(self.f_lo)
        rows, cols, vals = [], [], []
        for side in (self.f_lo, self.f_hi):
            act = self.active[side]
            rows.append(np.where(act)[0])
            cols.append(self.idx[side[act]])
            vals.append(np.full(int(np.sum(act)), 0.5))
            inact = np.where(~act)[0]
            owners = np.where(self.active[self.f_lo[inact]],
                              self.f_lo[inact], self.f_hi[inact])
            rows.append(inact)
            cols.append(self.idx[owners])
            vals.append(np.full(len(inact), 0.5))
        self._half_op = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nf, self.n_unknowns))
        return self._half_op

    def metric_gradient(self, u, bc):
        cell_grads = [self.G_ops[k] @ u + self.G_bc_outer[k] * bc
                      for k in range(self.d)]
        W2 = np.zeros(self.n_unknowns)
        for k in range(self.d):
            W2 += self.ginv_cells[:, k] * cell_grads[k] ** 2
        return np.sqrt(W2)

    def subsolution_values(self, shift=0.0):
        return self.subsol_act + shift

    def subsolution_margin(self):
        """Degenerate-operator residual of v on active cells beyond R0,
        via the pointwise formula for diagonal metrics."""
        act = np.where(self.active)[0]
        x = self.centers[act]
        return _pointwise_margin(self.ids, x, self.alpha)

    def feasibility(self):
        vol = float(np.sum(self.sg_act) * self.h ** self.d)
        area_in = sphere_area(self.n) * self.e0_radius ** self.n
        area_out = sphere_area(self.n) * self.R_L ** self.n
        gbar = float(np.mean(self.g_diag[self.active]))
        area = (area_in + area_out) * gbar ** (self.n / 2)
        eps_div = area / vol
        return {
            "eps_divergence_bound": eps_div,
            "eps_max": FEASIBILITY_SAFETY * eps_div,
            "volume": vol,
            "boundary_area": area,
            "eps_theoretical_cap": _bridge_cap(self),
        }


def _pointwise_margin(ids, x, alpha, h=1e-4):
    """H_level - sqrt(|grad v|^2 + P_nu^2) for v = alpha ln|x| at points x."""
    from .surface_geometry import level_set_mean_curvature
    x = np.atleast_2d(x)
    r = np.linalg.norm(x, axis=1)
    nu = x / r[:, None]
    H = level_set_mean_curvature(ids, x, lambda p: np.linalg.norm(p, axis=1), h=h)
    g = ids.metric(x)
    ginv = np.linalg.inv(g)
    K = ids.second_form(x)
    gradv_sq = alpha ** 2 * np.einsum('mij,mi,mj->m', ginv, nu, nu) / r ** 2
    # unit g-normal of the coordinate sphere
    nrm = np.sqrt(np.einsum('mij,mi,mj->m', ginv, nu, nu))
    nu_up = np.einsum('mij,mj->mi', ginv, nu) / nrm[:, None]
    trK = np.einsum('mij,mij->m', ginv, K)
    P = trK - np.einsum('mi,mj,mij->m', nu_up, nu_up, K)
    return H - np.sqrt(gradv_sq + P ** 2)


def choose_anchor_radius(ids, alpha, e0_outer_radius, margin=SUBSOLUTION_MARGIN,
                         r_max=64.0, n_scan=256):
    """Smallest tested radius beyond which the log subsolution residual stays
    above the margin, and beyond the inner region."""
    lo = max(1.001 * e0_outer_radius, 1.001 * ids.inner_radius, 0.05)
    radii = np.geomspace(lo, r_max, n_scan)
    if ids.radial is not None:
        prof = RadialProfile.from_initial_data(ids, r_max=4 * r_max)
        H = prof.mean_curvature(radii)
        gradv = alpha / (np.asarray(ids.radial.a(radii)) * radii)
        P = -np.asarray(ids.radial.kappa_r(radii))
        res = H - np.sqrt(gradv ** 2 + P ** 2)
    else:
        dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0],
                         [1, 1, 1] / np.sqrt(3)])[:, :ids.dim]
        res = np.array([np.min(_pointwise_margin(
            ids, r * dirs, alpha)) for r in radii])
    # the residual of the log subsolution decays like (n - alpha)/r, so the
    # margin is enforced on r * residual (dimensionless)
    ok = res * radii >= margin
    suffix_ok = np.flip(np.logical_and.accumulate(np.flip(ok)))
    idx = np.where(suffix_ok)[0]
    if len(idx) == 0:
        raise DomainError(
            f"no admissible subsolution anchor radius with margin {margin}")
    return float(radii[idx[0]])


def build_domain(ids, e0, L, alpha, h, mode="auto"):
    """Construct the computational annulus for data `ids`.

    e0 is ``{"center": (...), "radius": rho}``; L > 2 with the inner/outer
    separation required by the a-priori estimates; 0 < alpha < n.
    mode: "radial", "grid", or "auto" (radial when the data provides an exact
    reduction and E0 is a centered ball).
    """
    if not (0.0 < alpha < ids.n):
        raise DomainError(f"need 0 < alpha < n = {ids.n}")
    if L <= 2.0:
        raise DomainError("need L > 2")
    center = np.asarray(e0.get("center", np.zeros(ids.dim)), float)
    radius = float(e0["radius"])
    if radius <= 0:
        raise DomainError("E0 radius must be positive")
    R0 = choose_anchor_radius(ids, alpha, radius if np.allclose(center, 0)
                              else radius + np.linalg.norm(center))
    if mode == "auto":
        mode = ("radial" if ids.radial is not None and np.allclose(center, 0.0)
                else "grid")
    if mode == "radial":
        dom = RadialDomain(ids, radius, h, L, alpha, R0)
    elif mode == "grid":
        dom = GridDomain(ids, center, radius, h, L, alpha, R0)
    else:
        raise DomainError(f"unknown domain mode '{mode}'")
    sep = (dom.r_out - radius) if mode == "radial" else (dom.R_L - radius)
    if sep <= 2.0:
        raise DomainError(
            f"outer boundary too close to E0 (separation {sep:.2f} <= 2); raise L")
    return dom
