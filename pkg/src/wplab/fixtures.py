"""Built-in fibers: flat torus benchmark, regular 4g-gon surfaces, refinement.

The genus-g >= 2 fixture is the maximally symmetric surface obtained from a
regular hyperbolic 4g-gon with corner angles 2*pi/(4g) and opposite sides
identified.  All 4g corners land on a single vertex with total angle exactly
2*pi, so the quotient carries no cone singularities and the discrete
conformal structure converges to the smooth hyperbolic surface under
geodesic midpoint refinement.

Refinement is intrinsic: each triangle is embedded in the hyperboloid model
from its edge lengths alone, geodesic midpoints are computed there, and the
four sub-triangles inherit exact hyperbolic lengths.  Midpoints of shared
edges agree from both sides because they depend only on the edge length.
"""

from __future__ import annotations

import math

import numpy as np

from .surface import TriangulatedFiber, TopologyError


def torus_fiber(n):
    """Flat unit torus, n x n grid of right-triangle pairs (genus 1).

    Operator benchmark only; not admissible as a canonically polarized fiber.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    h = 1.0 / n
    vid = lambda i, j: (i % n) * n + (j % n)
    vx = np.zeros(n * n)
    vy = np.zeros(n * n)
    for i in range(n):
        for j in range(n):
            vx[vid(i, j)] = i * h
            vy[vid(i, j)] = j * h
    edge_list = []
    edge_len = []
    edge_index = {}

    def add_edge(a, b, length, role):
        key = (a, b, role)
        if key not in edge_index:
            edge_index[key] = len(edge_list)
            edge_list.append((a, b))
            edge_len.append(length)
        return edge_index[key]

    faces = []
    for i in range(n):
        for j in range(n):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v01 = vid(i, j + 1)
            v11 = vid(i + 1, j + 1)
            eh0 = add_edge(v00, v10, h, ("h", i % n, j % n))
            ev1 = add_edge(v10, v11, h, ("v", (i + 1) % n, j % n))
            ed = add_edge(v00, v11, math.sqrt(2) * h, ("d", i % n, j % n))
            ev0 = add_edge(v00, v01, h, ("v", i % n, j % n))
            eh1 = add_edge(v01, v11, h, ("h", i % n, (j + 1) % n))
            # lower triangle (v00, v10, v11), upper (v00, v11, v01)
            faces.append(((eh0, ev1, ed), 1))
            faces.append(((ed, eh1, ev0), 1))
    fiber = TriangulatedFiber(
        vx=vx, vy=vy,
        edge_v=np.array(edge_list, dtype=int),
        edge_len=np.array(edge_len),
        face_e=np.array([f[0] for f in faces], dtype=int),
        face_o=np.array([f[1] for f in faces], dtype=int),
        genus=1)
    return fiber.finalize(check_genus=False)


# ----------------------------------------------------------------------
def _dual_law_side(A, B, C):
    """Hyperbolic side opposite angle A in a triangle with angles A, B, C."""
    return math.acosh((math.cos(A) + math.cos(B) * math.cos(C))
                      / (math.sin(B) * math.sin(C)))


def polygon_fiber(genus, level=0):
    """Regular 4g-gon surface, fan-triangulated, refined `level` times."""
    if genus < 2:
        raise TopologyError("polygon fiber needs genus >= 2")
    n = 4 * genus
    central = 2 * math.pi / n
    corner = math.pi / n          # half the polygon interior angle 2*pi/n
    R = _dual_law_side(corner, corner, central)
    s = _dual_law_side(central, corner, corner)

    # vertex 0 = polygon center, vertex 1 = the single identified corner
    vx = np.array([0.0, math.tanh(R / 2)])
    vy = np.array([0.0, 0.0])
    edge_list = []
    edge_len = []
    for _ in range(n):                      # spokes
        edge_list.append((0, 1))
        edge_len.append(R)
    for _ in range(n // 2):                 # identified sides (self-loops)
        edge_list.append((1, 1))
        edge_len.append(s)
    faces = []
    for k in range(n):
        side = n + (k % (n // 2))
        faces.append(((k, side, (k + 1) % n), 1))
    fiber = TriangulatedFiber(
        vx=vx, vy=vy,
        edge_v=np.array(edge_list, dtype=int),
        edge_len=np.array(edge_len),
        face_e=np.array([f[0] for f in faces], dtype=int),
        face_o=np.array([f[1] for f in faces], dtype=int),
        genus=genus)
    fiber.finalize()
    for _ in range(level):
        fiber = refine_fiber(fiber, geometry="hyperbolic")
    return fiber


def bolza_fiber(level=0):
    return polygon_fiber(2, level)


# ----------------------------------------------------------------------
def _hyperboloid_triangle(l0, l1, l2):
    """Embed corners (P0, P1, P2) in the hyperboloid from side lengths.

    Slot s joins corners s and s+1: |P0P1| = l0, |P1P2| = l1, |P2P0| = l2.
    """
    ang0 = math.acos(min(1.0, max(-1.0,
        (math.cosh(l0) * math.cosh(l2) - math.cosh(l1))
        / (math.sinh(l0) * math.sinh(l2)))))
    P0 = np.array([0.0, 0.0, 1.0])
    P1 = np.array([math.sinh(l0), 0.0, math.cosh(l0)])
    P2 = np.array([math.sinh(l2) * math.cos(ang0),
                   math.sinh(l2) * math.sin(ang0), math.cosh(l2)])
    return P0, P1, P2


def _hyp_mid(X, Y):
    m = X + Y
    nrm = math.sqrt(max(m[2] ** 2 - m[0] ** 2 - m[1] ** 2, 1e-300))
    return m / nrm


def _hyp_dist(X, Y):
    c = X[2] * Y[2] - X[0] * Y[0] - X[1] * Y[1]
    return math.acosh(max(c, 1.0))


def refine_fiber(fiber, geometry="hyperbolic"):
    """4-to-1 midpoint subdivision with intrinsic edge lengths.

    geometry = "hyperbolic": geodesic midpoints via per-face hyperboloid
    embedding; "euclidean": planar midpoints (used for the torus benchmark).
    """
    V, E, F = fiber.n_vertices, fiber.n_edges, fiber.n_faces
    new_vx = np.concatenate([fiber.vx, np.zeros(E)])
    new_vy = np.concatenate([fiber.vy, np.zeros(E)])
    for e in range(E):
        u, v = fiber.edge_v[e]
        new_vx[V + e] = 0.5 * (fiber.vx[u] + fiber.vx[v])
        new_vy[V + e] = 0.5 * (fiber.vy[u] + fiber.vy[v])

    # half-edge ids: edge e splits into halves 2e (tail side) and 2e+1 (head
    # side) along the traversal direction of its primary (first) face usage.
    primary = {}
    for f in range(F):
        e = list(fiber.face_e[f])
        if fiber.face_o[f] < 0:
            e = [e[0], e[2], e[1]]
        for s in range(3):
            if e[s] not in primary:
                primary[e[s]] = (f, s)

    edge_list = [None] * (2 * E)
    edge_len = [0.0] * (2 * E)

    def half_ids(f, s, eidx):
        """(half at corner s, half at corner s+1) for face f's slot s."""
        if primary[eidx] == (f, s):
            return 2 * eidx, 2 * eidx + 1
        return 2 * eidx + 1, 2 * eidx

    new_faces = []
    n_mid = [0]
    mid_edge_list = []
    mid_edge_len = []

    for f in range(F):
        e = list(fiber.face_e[f])
        if fiber.face_o[f] < 0:
            e = [e[0], e[2], e[1]]
        v = fiber.face_v[f]
        l = fiber.face_len[f]
        m = [V + e[s] for s in range(3)]

        for s in range(3):
            lo, hi = half_ids(f, s, e[s])
            edge_list[lo] = (v[s], m[s])
            edge_list[hi] = (m[s], v[(s + 1) % 3])
            edge_len[lo] = l[s] / 2.0
            edge_len[hi] = l[s] / 2.0

        if geometry == "hyperbolic":
            P = _hyperboloid_triangle(*l)
            mid = [_hyp_mid(P[s], P[(s + 1) % 3]) for s in range(3)]
            c01 = _hyp_dist(mid[0], mid[1])
            c12 = _hyp_dist(mid[1], mid[2])
            c20 = _hyp_dist(mid[2], mid[0])
        else:
            c01, c12, c20 = l[1] / 2.0, l[2] / 2.0, l[0] / 2.0

        base = 2 * E + len(mid_edge_list)
        mid_edge_list.extend([(m[0], m[1]), (m[1], m[2]), (m[2], m[0])])
        mid_edge_len.extend([c01, c12, c20])
        e01, e12, e20 = base, base + 1, base + 2

        h0a, h0b = half_ids(f, 0, e[0])
        h1a, h1b = half_ids(f, 1, e[1])
        h2a, h2b = half_ids(f, 2, e[2])
        # corner triangles (v_s, m_s, m_{s-1}) and the central one
        new_faces.append(((h0a, e20, h2b), 1))      # v0, m0, m2
        new_faces.append(((h1a, e01, h0b), 1))      # v1, m1, m0
        new_faces.append(((h2a, e12, h1b), 1))      # v2, m2, m1
        new_faces.append(((e01, e12, e20), 1))      # m0, m1, m2

    all_edges = np.array(edge_list + mid_edge_list, dtype=int)
    all_lens = np.array(edge_len + mid_edge_len)
    out = TriangulatedFiber(
        vx=new_vx, vy=new_vy, edge_v=all_edges, edge_len=all_lens,
        face_e=np.array([f0 for f0, _ in new_faces], dtype=int),
        face_o=np.array([o for _, o in new_faces], dtype=int),
        genus=fiber.genus)
    return out.finalize(check_genus=(fiber.genus >= 2))


def smooth_bump(fiber, amplitude=0.2, mode=1):
    """Deterministic smooth real bump: a low Laplace eigenfunction rescaled.

    Uses the flat (g = 1) scalar box so it is independent of any metric
    choice; mode counts nonconstant eigenfunctions from the bottom.
    """
    from .surface import BoxOperator, HermitianMetric
    metric = HermitianMetric(fiber, np.ones(fiber.n_vertices))
    box = BoxOperator(fiber, metric, 0, 0)
    w, U = box.eig(k=mode + 1)
    u = U[:, mode].real
    u = u - np.sum(u * metric.vertex_mass(0, 0)) / np.sum(metric.vertex_mass(0, 0))
    m = np.max(np.abs(u))
    return amplitude * u / (m if m > 0 else 1.0)
