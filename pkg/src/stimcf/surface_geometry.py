"""Extrinsic geometry of hypersurfaces: H, P, expansions and classification.

Meshes are simplicial (segments in a 2D chart, triangles in 3D) with
per-facet diagnostics.  Mean curvature comes from the divergence of the
extended unit normal when the surface is described as a level set (spheres,
extracted level sets), and from the discrete first variation of metric area
for free meshes.  Sign convention: outward normal, H = n/r > 0 on round
spheres in the flat chart.
"""

import numpy as np

from .initial_data import _as_points


class SurfaceError(ValueError):
    pass


class SurfaceMesh:
    """Closed simplicial hypersurface with cached per-facet diagnostics.

    Fields H, P, Phi, theta_plus, theta_minus are filled by the operations
    below; Phi is NaN wherever H^2 < P^2 (spacetime mean curvature undefined
    there, which is a flag rather than an error).
    """

    def __init__(self, vertices, facets, interior_point=None, closed=True):
        self.vertices = np.asarray(vertices, float)
        self.facets = np.asarray(facets, int)
        self.dim = self.vertices.shape[1]
        if self.facets.shape[1] != self.dim:
            raise SurfaceError("facet arity must match chart dimension")
        self.closed = closed
        self.interior_point = (np.zeros(self.dim) if interior_point is None
                               else np.asarray(interior_point, float))
        self.H = None
        self.P = None
        self.Phi = None
        self.theta_plus = None
        self.theta_minus = None
        self._euclid_geometry()

    # -- chart (Euclidean) geometry, metric corrections applied on demand --
    def _euclid_geometry(self):
        V, F = self.vertices, self.facets
        self.centroids = V[F].mean(axis=1)
        if self.dim == 2:
            e = V[F[:, 1]] - V[F[:, 0]]
            self.e_lengths = np.linalg.norm(e, axis=1)
            raw = np.stack([e[:, 1], -e[:, 0]], axis=1)
        else:
            e1 = V[F[:, 1]] - V[F[:, 0]]
            e2 = V[F[:, 2]] - V[F[:, 0]]
            raw = np.cross(e1, e2)
            self.e_lengths = np.linalg.norm(raw, axis=1)
        nrm = np.linalg.norm(raw, axis=1)
        if np.any(nrm < 1e-300):
            raise SurfaceError("degenerate facet (zero chart area)")
        self.conormals = raw / nrm[:, None]          # Euclidean unit covector
        out = np.einsum('mi,mi->m', self.conormals,
                        self.centroids - self.interior_point)
        flip = out < 0
        self.conormals[flip] *= -1.0

    def facet_tangents(self):
        V, F = self.vertices, self.facets
        if self.dim == 2:
            return [(V[F[:, 1]] - V[F[:, 0]])]
        return [V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]]]

    def metric_areas(self, ids):
        """Per-facet area element in the metric of `ids`."""
        g = ids.metric(self.centroids)
        tans = self.facet_tangents()
        if self.dim == 2:
            t = tans[0]
            return np.sqrt(np.einsum('mij,mi,mj->m', g, t, t))
        g11 = np.einsum('mij,mi,mj->m', g, tans[0], tans[0])
        g22 = np.einsum('mij,mi,mj->m', g, tans[1], tans[1])
        g12 = np.einsum('mij,mi,mj->m', g, tans[0], tans[1])
        return 0.5 * np.sqrt(np.maximum(g11 * g22 - g12 ** 2, 0.0))

    def unit_normals(self, ids):
        """Outward unit normals in the metric: raise the Euclidean conormal
        with g^{-1} and normalize (this is g-orthogonal to the facet)."""
        ginv = ids.inverse_metric(self.centroids)
        nu = np.einsum('mij,mj->mi', ginv, self.conormals)
        nrm = np.sqrt(np.einsum('mij,mi,mj->m',
                                ids.metric(self.centroids), nu, nu))
        return nu / nrm[:, None]

    def total_area(self, ids):
        return float(np.sum(self.metric_areas(ids)))


# -- generators ------------------------------------------------------------

def circle_mesh(radius, segments=256, center=(0.0, 0.0)):
    th = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    V = np.stack([radius * np.cos(th), radius * np.sin(th)], axis=1)
    V += np.asarray(center)[None, :]
    F = np.stack([np.arange(segments), (np.arange(segments) + 1) % segments],
                 axis=1)
    return SurfaceMesh(V, F, interior_point=np.asarray(center, float))


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere mesh from a subdivided icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    V = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    V /= np.linalg.norm(V, axis=1)[:, None]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    V = list(map(tuple, V))
    for _ in range(subdivisions):
        cache = {}
        newF = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = 0.5 * (np.array(V[i]) + np.array(V[j]))
                m /= np.linalg.norm(m)
                V.append(tuple(m))
                cache[key] = len(V) - 1
            return cache[key]

        for a, b, c in F:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            newF += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = newF
    V = np.array(V) * radius + np.asarray(center)[None, :]
    return SurfaceMesh(V, np.array(F), interior_point=np.asarray(center, float))


# -- level-set mean curvature ----------------------------------------------

def level_set_mean_curvature(ids, points, phi, h=1e-4):
    """H = div_g( grad phi / |grad phi|_g ) at points, by nested central FD.

    `phi` maps (m, d) points to level values; the extended unit normal field
    is differentiated with the metric volume weight, matching the operator of
    the level-set formulation exactly.
    """
    points = _as_points(points)
    d = points.shape[1]
    shifts = np.eye(d) * h

    def unit_field(x):
        grad = np.stack([(phi(x + shifts[c]) - phi(x - shifts[c])) / (2 * h)
                         for c in range(d)], axis=1)
        ginv = ids.inverse_metric(x)
        up = np.einsum('mij,mj->mi', ginv, grad)
        norm = np.sqrt(np.maximum(np.einsum('mi,mi->m', up, grad), 1e-300))
        sg = ids.sqrt_det_metric(x)
        return (sg[:, None] * up / norm[:, None])

    sg0 = ids.sqrt_det_metric(points)
    div = np.zeros(len(points))
    for c in range(d):
        fp = unit_field(points + shifts[c])[:, c]
        fm = unit_field(points - shifts[c])[:, c]
        div += (fp - fm) / (2 * h)
    return div / sg0


def mean_curvature(ids, surf, level_set=None, h=1e-4, level_set_h=None):
    """Per-facet mean curvature of the mesh in the data's metric.

    level_set: optional callable describing the surface as its zero/level set
    (used for spheres and extracted level sets); free meshes fall back to the
    vertex first-variation estimate averaged onto facets.
    """
    nu = surf.unit_normals(ids)
    norms = np.sqrt(np.einsum('mij,mi,mj->m', ids.metric(surf.centroids),
                              nu, nu))
    if np.max(np.abs(norms - 1.0)) > 1e-8:
        raise SurfaceError("normals failed to normalize in the metric")
    if level_set is not None:
        H = level_set_mean_curvature(ids, surf.centroids, level_set,
                                     h=level_set_h or h)
    else:
        Hv = weak_mean_curvature(ids, surf)
        H = Hv[surf.facets].mean(axis=1)
    surf.H = H
    return H


def sphere_level_set(center):
    center = np.asarray(center, float)

    def phi(x):
        return np.linalg.norm(_as_points(x) - center[None, :], axis=1)
    return phi


def k_trace(ids, surf):
    """P = (g^ij - nu^i nu^j) K_ij per facet (the spacetime trace term)."""
    x = surf.centroids
    K = ids.second_form(x)
    ginv = ids.inverse_metric(x)
    nu = surf.unit_normals(ids)
    trK = np.einsum('mij,mij->m', ginv, K)
    P = trK - np.einsum('mi,mj,mij->m', nu, nu, K)
    surf.P = P
    return P


def spacetime_mean_curvature(surf):
    """Fill (Phi, theta+, theta-) from stored H and P; Phi NaN when H^2<P^2."""
    if surf.H is None or surf.P is None:
        raise SurfaceError("populate H and P before the spacetime quantities")
    H, P = surf.H, surf.P
    disc = H ** 2 - P ** 2
    surf.Phi = np.where(disc >= 0, np.sqrt(np.maximum(disc, 0.0)), np.nan)
    surf.theta_plus = H + P
    surf.theta_minus = H - P
    return surf.Phi, surf.theta_plus, surf.theta_minus


def classify(surf, tol=None):
    """Classify the surface from facet medians of H, P, theta+-.

    Returns a set drawn from {untrapped, trapped, MOTS, MITS,
    generalized_horizon}; a MOTS or MITS is in particular a generalized
    apparent horizon, so several labels may coexist.
    """
    if surf.theta_plus is None:
        spacetime_mean_curvature(surf)
    H = float(np.median(surf.H))
    P = float(np.median(surf.P))
    tp = float(np.median(surf.theta_plus))
    tm = float(np.median(surf.theta_minus))
    if tol is None:
        scale = max(abs(H), abs(P), 1e-12)
        tol = 1e-3 * scale
    labels = set()
    if abs(tp) <= tol:
        labels.add("MOTS")
    if abs(tm) <= tol:
        labels.add("MITS")
    if abs(H - abs(P)) <= tol and H >= -tol:
        labels.add("generalized_horizon")
    if H > abs(P) + tol and H > 0:
        labels.add("untrapped")
    if H < abs(P) - tol:
        labels.add("trapped")
    return labels


def weak_mean_curvature(ids, surf):
    """Per-vertex weak mean curvature from the first variation of area.

    Solves the discrete identity  sum_T d(area_T)/d(vertex) = H nu mu_vertex
    with lumped vertex measure mu = sum of adjacent facet areas / arity; the
    metric is frozen per facet at its centroid (exact in the flat chart).
    """
    if not surf.closed:
        raise SurfaceError("weak mean curvature needs a closed mesh")
    V, F = surf.vertices, surf.facets
    g = ids.metric(surf.centroids)
    nV = len(V)
    grad = np.zeros_like(V)
    dual = np.zeros(nV)
    if surf.dim == 2:
        t = V[F[:, 1]] - V[F[:, 0]]
        lg = np.sqrt(np.einsum('mij,mi,mj->m', g, t, t))
        gt = np.einsum('mij,mj->mi', g, t) / lg[:, None]
        np.add.at(grad, F[:, 0], -gt)
        np.add.at(grad, F[:, 1], gt)
        np.add.at(dual, F[:, 0], 0.5 * lg)
        np.add.at(dual, F[:, 1], 0.5 * lg)
    else:
        e1 = V[F[:, 1]] - V[F[:, 0]]
        e2 = V[F[:, 2]] - V[F[:, 0]]
        g11 = np.einsum('mij,mi,mj->m', g, e1, e1)
        g22 = np.einsum('mij,mi,mj->m', g, e2, e2)
        g12 = np.einsum('mij,mi,mj->m', g, e1, e2)
        area = 0.5 * np.sqrt(np.maximum(g11 * g22 - g12 ** 2, 1e-300))
        ge1 = np.einsum('mij,mj->mi', g, e1)
        ge2 = np.einsum('mij,mj->mi', g, e2)
        dA_de1 = (g22[:, None] * ge1 - g12[:, None] * ge2) / (4 * area[:, None])
        dA_de2 = (g11[:, None] * ge2 - g12[:, None] * ge1) / (4 * area[:, None])
        np.add.at(grad, F[:, 0], -(dA_de1 + dA_de2))
        np.add.at(grad, F[:, 1], dA_de1)
        np.add.at(grad, F[:, 2], dA_de2)
        third = area / 3.0
        for k in range(3):
            np.add.at(dual, F[:, k], third)
    # vertex normals: area-weighted facet normals
    nu_f = surf.unit_normals(ids)
    areas = surf.metric_areas(ids)
    nu_v = np.zeros_like(V)
    for k in range(F.shape[1]):
        np.add.at(nu_v, F[:, k], areas[:, None] * nu_f)
    nrm = np.linalg.norm(nu_v, axis=1)
    nu_v /= np.maximum(nrm, 1e-300)[:, None]
    return np.einsum('vi,vi->v', grad, nu_v) / np.maximum(dual, 1e-300)


def populate_diagnostics(ids, surf, level_set=None, level_set_h=None):
    """Fill H, P, Phi, theta+- and return the mesh."""
    mean_curvature(ids, surf, level_set=level_set, level_set_h=level_set_h)
    k_trace(ids, surf)
    spacetime_mean_curvature(surf)
    return surf


# -- plain-text interchange -------------------------------------------------

def write_off(surf, path):
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(surf.vertices)} {len(surf.facets)} 0\n")
        for v in surf.vertices:
            fh.write(" ".join("%.17g" % c for c in v) + "\n")
        for f in surf.facets:
            fh.write(f"{len(f)} " + " ".join(str(i) for i in f) + "\n")


def read_off(path, interior_point=None):
    with open(path) as fh:
        tokens = fh.read().split()
    if tokens[0] != "OFF":
        raise SurfaceError("not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    flat = np.array(tokens[pos:], dtype=float)
    dim = 3
    V = flat[: nv * dim].reshape(nv, dim)
    rest = flat[nv * dim:]
    F = []
    i = 0
    for _ in range(nf):
        k = int(rest[i])
        F.append(rest[i + 1: i + 1 + k].astype(int))
        i += k + 1
    F = np.array(F)
    if np.all(V[:, 2] == 0.0) and F.shape[1] == 2:
        V = V[:, :2]
    return SurfaceMesh(V, F, interior_point=interior_point)


def diagnostics_csv(surf, ids, path, labels=None):
    """Per-facet CSV: id, area, H, P, Phi, theta+, theta-, label."""
    areas = surf.metric_areas(ids)
    lab = labels if labels is not None else ["" for _ in range(len(surf.facets))]
    with open(path, "w") as fh:
        fh.write("facet,area,H,P,Phi,theta_plus,theta_minus,label\n")
        for i in range(len(surf.facets)):
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%s\n" % (
                i, areas[i], surf.H[i], surf.P[i], surf.Phi[i],
                surf.theta_plus[i], surf.theta_minus[i], lab[i]))
