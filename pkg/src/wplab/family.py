"""Holomorphic families over a one-dimensional complex parameter grid.

A family is a grid of fibers sharing one mesh topology (the differentiable
trivialization is the identity on vertex ids).  The built-in construction
deforms the base edge lengths by a Beltrami field mu:  in the chart of the
primary face of an edge with vector e, the length at parameter s is
|e + s mu conj(e)|, which is chart independent because mu has weight
(-1, 1).  Per-face triangle shapes are then Moebius in s, so the discrete
conformal structure varies holomorphically and the Kodaira-Spencer class of
d/ds at s = 0 is [mu].

Horizontal lift in the trivialization frame.  Our per-vertex data are the
Kahler-Einstein densities g(v, s) of the deformed fibers, i.e. the density
in the moving holomorphic charts sampled along the trivialization.  Writing
B for the Beltrami rate of the trivialization (recovered from finite
differences of the face layouts), the chart junk of the non-holomorphic
trivialization cancels in the combinations

    g_sb  = dbar_eval(d_s log g) - B * dz_eval(log g)        (mixed term)
    a     = -g_sb / g                                        (lift)
    A     = dbar(a) + B                                      (KS form)
    phi   = dss_bar(log g) - |g_sb|^2 / g                    (direct route)

which are honest global fields; the naive expressions without the B terms
are trivialization artifacts of vanishing Kodaira-Spencer class.  A is
harmonic up to discretization (the infinitesimal Einstein condition), phi
solves (1 + box) phi = |A|^2 up to discretization, and the Weil-Petersson
norm equals both the harmonic L2 norm of A and the fiber integral of
phi g dV.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .surface import (
    TriangulatedFiber, HermitianMetric, FormField, BoxOperator,
    load_fiber, dump_fiber, l2_inner, dbar, dbar_star, harmonic_project,
    harmonic_basis, holomorphic_sections, zero_field, FieldMismatchError,
)
from .ke import solve_ke, KEMetric


class StencilError(ValueError):
    """Grid point too close to the boundary for the requested stencil."""


@dataclass
class FamilySpec:
    """Fibers over a (2w+1) x (2w+1) complex parameter grid."""

    fibers: list                   # row-major, index = (i + w) * (2w+1) + (j + w)
    spacing: float
    half_width: int
    mu_face: np.ndarray = None     # construction Beltrami (center charts), optional
    ke_tol: float = 1e-10
    _ke: dict = dc_field(default_factory=dict, repr=False)

    @property
    def size(self):
        return 2 * self.half_width + 1

    def flat(self, i, j):
        w = self.half_width
        if not (-w <= i <= w and -w <= j <= w):
            raise StencilError("grid offset (%d, %d) outside half-width %d"
                               % (i, j, w))
        return (i + w) * self.size + (j + w)

    def s_value(self, i, j):
        return (i + 1j * j) * self.spacing

    def fiber(self, i, j):
        return self.fibers[self.flat(i, j)]

    def ke(self, i, j):
        key = self.flat(i, j)
        if key not in self._ke:
            fib = self.fibers[key]
            seed = HermitianMetric(fib, np.ones(fib.n_vertices))
            self._ke[key] = solve_ke(fib, seed, tol=self.ke_tol, max_iter=40)
        return self._ke[key]

    def metric(self, i, j):
        return self.ke(i, j).metric()

    def log_g(self, i, j):
        return np.log(self.ke(i, j).g)

    def require_stencil(self, i, j, radius=1):
        w = self.half_width
        if abs(i) + radius > w or abs(j) + radius > w:
            raise StencilError(
                "point (%d, %d) lacks a radius-%d stencil in half-width %d"
                % (i, j, radius, w))


def _edge_chart_data(base):
    """Primary chart vector per edge and face->edge transfer structure."""
    primary = {}
    for f in range(base.n_faces):
        for s in range(3):
            e = base.face_slot_edge[f, s]
            primary.setdefault(e, (f, s))
    evec = np.zeros(base.n_edges, dtype=complex)
    usages = [[] for _ in range(base.n_edges)]
    for f in range(base.n_faces):
        p = base.layout[f]
        for s in range(3):
            e = base.face_slot_edge[f, s]
            usages[e].append((f, p[(s + 1) % 3] - p[s]))
    for e, (f, s) in primary.items():
        p = base.layout[f]
        evec[e] = p[(s + 1) % 3] - p[s]
    return primary, evec, usages


def _face_to_edge_avg(base, field_face, evec, usages):
    """Average a weight-(-1, 1) face field onto edges in the primary chart.

    Opposite traversal directions give the chart rotation r with
    vec_primary = r * (-vec_other); a (-1, 1) coefficient transports by r^2.
    """
    out = np.zeros(base.n_edges, dtype=complex)
    for e in range(base.n_edges):
        acc = 0.0
        for k, (f, vec) in enumerate(usages[e]):
            if k == 0:
                r = 1.0            # discovery order makes usage 0 primary
            else:
                r = evec[e] / (-vec)
                r = r / abs(r)
            acc += field_face[f] * r ** 2
        out[e] = acc / len(usages[e])
    return out


def _build_grid_fibers(base, em, ec, evec, spacing, offsets):
    fibers = {}
    for (i, j) in offsets:
        s = (i + 1j * j) * spacing
        L = np.abs(evec + (s * em + np.conj(s) * ec) * np.conj(evec))
        if np.any(L <= 0):
            raise ValueError("deformation too large: degenerate edge")
        fib = TriangulatedFiber(
            vx=base.vx.copy(), vy=base.vy.copy(),
            edge_v=base.edge_v.copy(), edge_len=L,
            face_e=base.face_e.copy(), face_o=base.face_o.copy(),
            genus=base.genus)
        fibers[(i, j)] = fib.finalize()
    return fibers


def _shape_rates(base, fibers, spacing):
    """(mu_eff, nu_eff) per face from layout finite differences at center."""
    def beta(fib):
        e1 = base.layout[:, 1] - base.layout[:, 0]
        e2 = base.layout[:, 2] - base.layout[:, 0]
        f1 = fib.layout[:, 1] - fib.layout[:, 0]
        f2 = fib.layout[:, 2] - fib.layout[:, 0]
        det = e1 * np.conj(e2) - e2 * np.conj(e1)
        return (e1 * f2 - e2 * f1) / det

    bx = (beta(fibers[(1, 0)]) - beta(fibers[(-1, 0)])) / (2 * spacing)
    by = (beta(fibers[(0, 1)]) - beta(fibers[(0, -1)])) / (2 * spacing)
    return 0.5 * (bx - 1j * by), 0.5 * (bx + 1j * by)


def make_beltrami_family(base, mu_face, spacing, half_width=2, ke_tol=1e-10,
                         nu_passes=4):
    """Deform the base edge lengths by s * mu over the grid.

    Edge data are face-averaged, and an auxiliary sbar-term is tuned in a
    few fixed-point passes so the antiholomorphic shape rate nu of the
    resulting family vanishes at the center (the raw per-edge deformation
    of a varying mu leaves an O(h) nu behind).  The family is then
    holomorphic at the center up to the compensation residual, which is
    reported on the returned spec.
    """
    mu_face = np.asarray(mu_face, dtype=complex)
    if len(mu_face) != base.n_faces:
        raise ValueError("mu must be a per-face field")
    primary, evec, usages = _edge_chart_data(base)
    em = _face_to_edge_avg(base, mu_face, evec, usages)
    ec = np.zeros(base.n_edges, dtype=complex)
    probe = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    nu_res = np.inf
    mu_eff = mu_face
    for _ in range(max(nu_passes, 1)):
        fibers = _build_grid_fibers(base, em, ec, evec, spacing, probe)
        mu_eff, nu_eff = _shape_rates(base, fibers, spacing)
        nu_res = float(np.max(np.abs(nu_eff)))
        if nu_res < 1e-9 * max(np.max(np.abs(mu_eff)), 1e-30):
            break
        ec -= _face_to_edge_avg(base, nu_eff, evec, usages)

    w = half_width
    offsets = [(i, j) for i in range(-w, w + 1) for j in range(-w, w + 1)]
    grid = _build_grid_fibers(base, em, ec, evec, spacing, offsets)
    fibers = [grid[(i, j)] for i in range(-w, w + 1) for j in range(-w, w + 1)]
    spec = FamilySpec(fibers=fibers, spacing=spacing, half_width=half_width,
                      mu_face=np.asarray(mu_eff), ke_tol=ke_tol)
    spec.nu_residual = nu_res
    spec.mu_input = mu_face
    return spec


def harmonic_beltrami(metric, which=0, scale=1.0):
    """Per-face harmonic Beltrami field conj(q)/g from the K^2 kernel."""
    fiber = metric.fiber
    basis, _, _ = holomorphic_sections(metric, 2)
    q = basis[:, which]
    qf = fiber.vertex_to_face_values(q, 2, 0).mean(axis=1)
    mu = np.conj(qf) / metric.g_face()
    m = np.max(np.abs(mu))
    return mu * (scale / m if m > 0 else 0.0)


# ----------------------------------------------------------------------
# finite differences on the grid (complex Wirtinger combinations)
def _ds(values, spacing):
    """values: dict offset -> array; returns d/ds at the center."""
    dx = (values[(1, 0)] - values[(-1, 0)]) / (2 * spacing)
    dy = (values[(0, 1)] - values[(0, -1)]) / (2 * spacing)
    return 0.5 * (dx - 1j * dy)


def _dssbar(values, spacing):
    """d2/(ds dsbar) at the center (quarter of the grid Laplacian)."""
    lap = (values[(1, 0)] + values[(-1, 0)] + values[(0, 1)] + values[(0, -1)]
           - 4.0 * values[(0, 0)]) / spacing ** 2
    return 0.25 * lap


def trivialization_rate(family, i=0, j=0):
    """Per-face Beltrami rate B of the mesh trivialization at a grid point.

    B is the d/ds derivative of the antilinear coefficient of the affine map
    between face layouts of neighboring fibers, i.e. the dbar of the
    trivialization vector field of the Kodaira-Spencer construction.
    """
    family.require_stencil(i, j, 1)
    base = family.fiber(i, j)

    def beta(fib):
        # antilinear part of the layout map base -> fib per face
        e1 = base.layout[:, 1] - base.layout[:, 0]
        e2 = base.layout[:, 2] - base.layout[:, 0]
        f1 = fib.layout[:, 1] - fib.layout[:, 0]
        f2 = fib.layout[:, 2] - fib.layout[:, 0]
        det = e1 * np.conj(e2) - e2 * np.conj(e1)
        return (e1 * f2 - e2 * f1) / det

    vals = {}
    for off in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
        vals[off] = beta(family.fiber(i + off[0], j + off[1]))
    return _ds(vals, family.spacing)


@dataclass
class HorizontalLift:
    """Lift coefficients and trivialization-frame metric derivatives."""

    family: FamilySpec
    at: tuple
    direction: complex
    a: FormField                  # weight (-1, 0) vertex field
    g_sb: np.ndarray              # corrected mixed term, vertex (0,1) values
    g_ssb: np.ndarray             # d_s d_sbar log g, vertex values (real)
    B_face: np.ndarray            # trivialization Beltrami rate per face


def _remove_chart_scale(fib, met, u, B_face):
    """Subtract the chart-scale part of the measured density rate u.

    The per-vertex density is sampled in per-face flat charts whose scale
    varies holomorphically along the family; this contributes a term w with
    dbar w = dz B to d_s log g.  Subtracting a discrete dbar-primitive of
    dz B at the field level (before differentiating) avoids the otherwise
    catastrophic cancellation of two rough O(1) objects.
    """
    B_vertex = fib.face_to_vertex(B_face, -1, 1)
    Z = fib.dz_face_matrix(-1, 1) @ B_vertex          # face rep of dz B
    D = fib.dbar_face_matrix(0, 0)
    mf = met.face_mass(0, 1)
    mv = met.vertex_mass(0, 0)
    S = (D.conj().T.multiply(mf) @ D).tocsc()
    w = spla.splu(S + 1e-12 * sp.diags(mv)).solve(D.conj().T @ (mf * Z))
    return u - w, B_vertex


def horizontal_lift(family, at=(0, 0), direction=1.0 + 0.0j):
    """Horizontal lift of direction * d/ds at a grid point (Lemma-style).

    a = -g^{zbar z} g_{s zbar} with the mixed term taken from centered
    finite differences of the metric family in the trivialization frame,
    corrected for the Beltrami rate B of the trivialization and for the
    holomorphic scale drift of the sampling charts.
    """
    i, j = at
    family.require_stencil(i, j, 1)
    fib = family.fiber(i, j)
    met = family.metric(i, j)
    logs = {}
    for off in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]:
        logs[off] = family.log_g(i + off[0], j + off[1])
    u = _ds(logs, family.spacing)
    B_face = family.mu_face if (family.mu_face is not None and (i, j) == (0, 0)) \
        else trivialization_rate(family, i, j)
    u_clean, B_vertex = _remove_chart_scale(fib, met, u, B_face)

    dbar_u = fib.face_to_vertex(fib.dbar_face_matrix(0, 0) @ u_clean, 0, 1)
    dlg = met.dlog_g()
    g_sb = (dbar_u - B_vertex * dlg) * direction
    a_vals = -g_sb / met.g
    g_ssb = _dssbar(logs, family.spacing).real * abs(direction) ** 2
    a = FormField(fib, 0, 0, "tangent", a_vals)
    return HorizontalLift(family=family, at=(i, j), direction=direction,
                          a=a, g_sb=g_sb, g_ssb=g_ssb, B_face=B_face)


@dataclass
class KSForm:
    """Kodaira-Spencer representative with residual certificates."""

    field: FormField               # (0,1) tangent-valued, face representation
    lowered: np.ndarray            # A_{zbar zbar} = A * g at vertices
    harmonicity: float             # ||dbar* A|| / ||A||
    symmetry: float                # lowered-index symmetry defect (0 for n=1)
    metric: HermitianMetric

    def norm(self):
        return self.field.norm(self.metric)

    def vertex_values(self):
        return self.field.to_vertex().values


def _finish_ks(fib, met, vals_face, direction=1.0):
    A = FormField(fib, 0, 1, "tangent", vals_face * direction, rep="face")
    nrm = A.norm(met)
    res = dbar_star(A, met).norm(met) / nrm if nrm > 0 else 0.0
    Av = A.to_vertex().values
    lowered = Av * met.g
    # n = 1: both antiholomorphic slots coincide; the defect is identically 0
    symmetry = 0.0
    return KSForm(field=A, lowered=lowered, harmonicity=res,
                  symmetry=symmetry, metric=met)


def ks_form(lift):
    """A = dbar(lift) + B restricted to the fiber, with certificates."""
    family, (i, j) = lift.family, lift.at
    fib = family.fiber(i, j)
    met = family.metric(i, j)
    da = fib.dbar_face_matrix(-1, 0) @ lift.a.values
    vals = da + lift.B_face * lift.direction
    return _finish_ks(fib, met, vals)


def ks_from_trivialization(family, at=(0, 0), direction=1.0 + 0.0j):
    """The trivialization representative B (generally not harmonic)."""
    i, j = at
    fib = family.fiber(i, j)
    met = family.metric(i, j)
    B_face = trivialization_rate(family, i, j)
    return _finish_ks(fib, met, B_face, direction)


def wp_norm(ks):
    """Weil-Petersson norm^2: integral of |A|^2 g dV."""
    return l2_inner(ks.field, ks.field, ks.metric).real


@dataclass
class PhiField:
    values: np.ndarray
    route: str
    positive: bool
    det_identity_residual: float = 0.0


def phi_field_pde(ks):
    """Solve (1 + box) phi = |A|^2 on the fiber (elimination equation)."""
    met = ks.metric
    box = BoxOperator(met.fiber, met, 0, 0)
    av = ks.field.to_vertex().values
    rhs = np.abs(av) ** 2
    phi = box.solve_shifted(1.0, rhs.astype(complex)).real
    return PhiField(values=phi, route="pde", positive=bool(np.all(phi > 0)))


def phi_field_direct(family, at=(0, 0), direction=1.0 + 0.0j, lift=None):
    """phi = g_ssbar - |g_sbar|^2 / g from grid finite differences.

    Also evaluates the 2x2 determinant identity
    phi * g = det [[g_ssbar, g_sbar], [conj(g_sbar), g]] pointwise.
    """
    if lift is None:
        lift = horizontal_lift(family, at, direction)
    i, j = at
    met = family.metric(i, j)
    g = met.g
    phi = lift.g_ssb - (np.abs(lift.g_sb) ** 2) / g
    det = lift.g_ssb * g - np.abs(lift.g_sb) ** 2
    resid = float(np.max(np.abs(det - phi * g)) /
                  (np.max(np.abs(det)) + 1e-300))
    return PhiField(values=phi, route="direct",
                    positive=bool(np.all(phi > 0)),
                    det_identity_residual=resid)


def wp_via_fiber_integral(family, at=(0, 0), direction=1.0 + 0.0j, lift=None):
    """WP norm^2 as the fiber integral of phi_direct g dV."""
    i, j = at
    phi = phi_field_direct(family, at, direction, lift=lift)
    met = family.metric(i, j)
    return float(np.sum(phi.values * met.g * met.fiber.area_v))


# ----------------------------------------------------------------------
# deformed dbar operators on the base mesh (coefficients linear in s)
def deformed_dbar_parts(family, weight_m):
    """(D0, D1) with D_s = D0 + s D1 the dbar on m-differentials of X_s.

    In base-mesh representation the operator on weight-(m, 0) fields is
    dbar + s (mu dz + m (dz mu)), the classical Beltrami deformation of the
    dbar operator on m-differentials.  Exactly linear in s, so kernels form
    a holomorphic family of subspaces.
    """
    if family.mu_face is None:
        raise ValueError("family lacks an explicit Beltrami field")
    base = family.fiber(0, 0)
    D0 = base.dbar_face_matrix(weight_m, 0)
    Dz = base.dz_face_matrix(weight_m, 0)
    # face values of dz mu: mu has weight (-1, 1)
    mu_v = base.face_to_vertex(family.mu_face, -1, 1)
    dmu_face = base.dz_face_matrix(-1, 1) @ mu_v
    M1 = sp.diags(family.mu_face) @ Dz
    rows = np.repeat(np.arange(base.n_faces), 3)
    cols = base.face_v.ravel()
    transport = base.rot ** (-weight_m)
    vals = (np.repeat(dmu_face * weight_m, 3).reshape(-1, 3)
            * transport / 3.0).ravel()
    M2 = sp.csr_matrix((vals, (rows, cols)),
                       shape=(base.n_faces, base.n_vertices))
    return D0, (M1 + M2).tocsr()


def holomorphic_frame(family, weight_m, normalizers=None):
    """Holomorphic frame of ker(D0 + s D1) over the grid.

    Per grid point the near-kernel basis is gauge-fixed by s-independent
    sampling functionals, which makes the frame independent of eigenvector
    gauge and holomorphic wherever the kernel family is.  Returns
    (frames dict offset -> (V, k) array, rank k, residual diagnostics).
    """
    base = family.fiber(0, 0)
    met0 = family.metric(0, 0)
    D0, D1 = deformed_dbar_parts(family, weight_m)
    mv = met0.vertex_mass(weight_m, 0)
    mf = met0.face_mass(weight_m, 1)
    k = {2: 3 * (base.genus - 1), 1: base.genus, 0: 1}.get(weight_m)
    if k is None:
        k = max(0, (2 * weight_m - 1) * (base.genus - 1))

    frames = {}
    resid = {}
    w = family.half_width
    for i in range(-w, w + 1):
        for j in range(-w, w + 1):
            s = family.s_value(i, j)
            Ds = (D0 + s * D1).toarray()
            S = Ds.conj().T @ (mf[:, None] * Ds)
            rootm = np.sqrt(mv)
            Ssym = S / rootm[:, None] / rootm[None, :]
            wvals, Y = scipy.linalg.eigh(0.5 * (Ssym + Ssym.conj().T))
            basis = (Y[:, :k] / rootm[:, None])
            frames[(i, j)] = basis
            resid[(i, j)] = float(np.sqrt(max(wvals[k - 1], 0.0))) if k else 0.0
            gap = wvals[k] / max(wvals[k - 1], 1e-300) if k else np.inf
    if normalizers is None:
        normalizers = (mv[:, None] * frames[(0, 0)]).conj().T   # (k, V)
    out = {}
    for key, basis in frames.items():
        C = normalizers @ basis                                  # (k, k)
        out[key] = basis @ np.linalg.inv(C)
    return out, k, resid


# ----------------------------------------------------------------------
def _closed_one_cochains(fiber, count):
    """Closed, coexact-free edge cochains spanning 2g classes (flat data)."""
    V, E, F = fiber.n_vertices, fiber.n_edges, fiber.n_faces
    rows, cols, vals = [], [], []
    seen = {}
    for f in range(F):
        for s in range(3):
            e = fiber.face_slot_edge[f, s]
            sign = 1.0 if e not in seen else -1.0
            seen.setdefault(e, (f, s))
            rows.append(f)
            cols.append(e)
            vals.append(sign)
    d1 = sp.csr_matrix((vals, (rows, cols)), shape=(F, E))
    rows = list(range(E)) + list(range(E))
    cols = list(fiber.edge_v[:, 1]) + list(fiber.edge_v[:, 0])
    vals = [1.0] * E + [-1.0] * E
    d0 = sp.csr_matrix((vals, (rows, cols)), shape=(E, V))
    # harmonic cochains: kernel of d1 orthogonal to im(d0)
    A = (d1.conj().T @ d1 + d0 @ d0.conj().T).toarray()
    wvals, U = scipy.linalg.eigh(A)
    k = 2 * fiber.genus
    return U[:, :count or k], wvals[:max(count or k, 1) + 1]


def _whitney_split(fiber, cochain):
    """Per-face (alpha, beta) with the cochain's 1-form = alpha dz + beta dzbar."""
    F = fiber.n_faces
    alpha = np.zeros(F, dtype=complex)
    beta = np.zeros(F, dtype=complex)
    seen = {}
    for f in range(F):
        p = fiber.layout[f]
        e_ids = fiber.face_slot_edge[f]
        vecs = [p[(s + 1) % 3] - p[s] for s in range(3)]
        vals = []
        for s in range(3):
            e = e_ids[s]
            sign = 1.0 if seen.setdefault(e, (f, s)) == (f, s) else -1.0
            vals.append(sign * cochain[e])
        # solve alpha v + beta conj(v) = val on two independent edges
        M = np.array([[vecs[0], np.conj(vecs[0])],
                      [vecs[1], np.conj(vecs[1])]])
        sol = np.linalg.solve(M, np.array([vals[0], vals[1]]))
        alpha[f], beta[f] = sol
    return alpha, beta


def serre_pairing(family, n_sections=None, n_classes=None):
    """Fiber integrals of psi wedge chi per grid point plus CR residuals.

    psi runs through a holomorphic frame of the abelian differentials
    (weight 1 kernel of the deformed dbar); chi through the (0,1)_s parts of
    fixed closed harmonic one-cochains (flat Gauss-Manin sections).  The
    pairing matrix entries are holomorphic functions of s; the returned
    residual is max |dbar_s pairing| / max |pairing| over the inner grid.
    """
    base = family.fiber(0, 0)
    if family.mu_face is None:
        raise ValueError("family lacks an explicit Beltrami field")
    frames, k, _ = holomorphic_frame(family, 1)
    if n_sections is not None:
        k = min(k, n_sections)
    m = n_classes or 2 * base.genus
    cochains, _ = _closed_one_cochains(base, m)
    alphas = np.zeros((m, base.n_faces), dtype=complex)
    betas = np.zeros((m, base.n_faces), dtype=complex)
    for c in range(m):
        alphas[c], betas[c] = _whitney_split(base, cochains[:, c])

    w = family.half_width
    pair = {}
    for i in range(-w, w + 1):
        for j in range(-w, w + 1):
            s = family.s_value(i, j)
            mu = s * family.mu_face
            jac = 1.0 - np.abs(mu) ** 2
            P = np.zeros((k, m), dtype=complex)
            for a in range(k):
                Fv = frames[(i, j)][:, a]
                Ff = base.vertex_to_face_values(Fv, 1, 0).mean(axis=1)
                for c in range(m):
                    Q = (betas[c] - mu * alphas[c]) / jac
                    P[a, c] = np.sum(Ff * Q * jac * base.area_f)
            pair[(i, j)] = P

    # Cauchy-Riemann residual of every entry on the inner grid
    scale = max(np.max(np.abs(P)) for P in pair.values())
    worst = 0.0
    for i in range(-w + 1, w):
        for j in range(-w + 1, w):
            vals = {off: pair[(i + off[0], j + off[1])]
                    for off in [(1, 0), (-1, 0), (0, 1), (0, -1)]}
            dx = (vals[(1, 0)] - vals[(-1, 0)]) / (2 * family.spacing)
            dy = (vals[(0, 1)] - vals[(0, -1)]) / (2 * family.spacing)
            dbar_s = 0.5 * (dx + 1j * dy)
            worst = max(worst, float(np.max(np.abs(dbar_s))))
    return pair, worst, scale
