"""Discrete Riemann-surface engine.

A fiber is a closed oriented triangulated surface whose geometry is carried by
per-edge lengths (the discrete conformal structure).  Each face is laid out as
a Euclidean triangle from its edge lengths; each vertex gets a star chart by
unrolling its corner wedges with the total angle normalized to 2*pi.  Chart
transitions are then unit rotations, so tensor fields of weight (a, b)
(sections of K^a otimes Kbar^b) are stored as plain complex arrays:

  * weight-(a, 0) fields live on vertices (vertex charts),
  * weight-(a, 1) fields, i.e. (0,1)-form valued objects, live naturally on
    faces (face charts), with a lossy vertex-collocated view for pointwise
    products.

The dbar operator is the per-face P1 gradient of the transported corner
values; dbar* is its exact matrix adjoint under the discrete L2 products, so
adjointness holds to machine precision by construction.  Curvature of the
underlying cone-flat structure is carried by the angle defects: the discrete
i ddbar log of a *density* is the P1 evaluation of the vertex values plus the
defect measure.  This makes discrete Gauss-Bonnet exact.

Weight bookkeeping: a field of bidegree (p, q) with values in a bundle tag
has holomorphic weight a = p + bundle offset and antiholomorphic weight b = q.
A hermitian metric of density g gives the pointwise norm |f|^2 g^{-(a+b)} and
the volume form g dV, hence vertex masses g^{1-a-b} A_v and face masses
g^{-(a+b-1)} T_f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class MeshParseError(ValueError):
    """Malformed mesh file."""


class TopologyError(ValueError):
    """Mesh does not describe a closed oriented surface of admissible genus."""


class FieldMismatchError(ValueError):
    """Incompatible bidegree/bundle/representation in a field operation."""


# Bundle tags and their holomorphic weight offsets (n = 1 throughout).
_BUNDLE_OFFSET = {
    "scalar": 0,
    "tangent": -1,      # T_X = K^{-1}
    "lambda_t": -1,     # Lambda^p T with p read from the field's own p-slot
    "omega_k": 1,       # Omega^p(K); p = 0 gives K, p = 1 gives K^2
}

# Eigenvalue cutoff for harmonic-space rank detection, relative to lambda_max.
HARMONIC_CUTOFF_REL = 1e-8
DENSE_EIG_MAX = 4500


def _common_vertex(e1, e2):
    s = set(e1) & set(e2)
    if len(s) == 1:
        return s.pop()
    if len(s) == 2:
        # multigraph edge pair sharing both endpoints; pick deterministically
        return min(s)
    raise TopologyError("face edges do not chain")


@dataclass
class TriangulatedFiber:
    """Closed oriented triangulated surface with discrete conformal lengths."""

    vx: np.ndarray             # (V,) chart x per vertex (advisory)
    vy: np.ndarray             # (V,) chart y per vertex (advisory)
    edge_v: np.ndarray         # (E, 2) endpoint vertex ids
    edge_len: np.ndarray       # (E,) positive lengths
    face_e: np.ndarray         # (F, 3) edge ids in cyclic order
    face_o: np.ndarray         # (F,) +1 keep cyclic order, -1 reverse
    genus: int

    # derived, filled by finalize()
    face_v: np.ndarray = dc_field(default=None, repr=False)
    face_len: np.ndarray = dc_field(default=None, repr=False)
    layout: np.ndarray = dc_field(default=None, repr=False)
    area_f: np.ndarray = dc_field(default=None, repr=False)
    angles: np.ndarray = dc_field(default=None, repr=False)
    theta_v: np.ndarray = dc_field(default=None, repr=False)
    defect: np.ndarray = dc_field(default=None, repr=False)
    area_v: np.ndarray = dc_field(default=None, repr=False)
    rot: np.ndarray = dc_field(default=None, repr=False)
    grad_zbar: np.ndarray = dc_field(default=None, repr=False)
    grad_z: np.ndarray = dc_field(default=None, repr=False)
    _op_cache: dict = dc_field(default_factory=dict, repr=False)

    # ------------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vx)

    @property
    def n_edges(self):
        return len(self.edge_len)

    @property
    def n_faces(self):
        return len(self.face_e)

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    # ------------------------------------------------------------------
    def finalize(self, check_genus=True):
        """Validate invariants and build layouts, charts and rotations."""
        V, E, F = self.n_vertices, self.n_edges, self.n_faces
        if np.any(self.edge_len <= 0):
            raise TopologyError("nonpositive edge length")
        if check_genus and self.genus < 2:
            raise TopologyError(
                "canonical polarization requires genus >= 2, got %d" % self.genus)
        if self.euler_characteristic() != 2 - 2 * self.genus:
            raise TopologyError(
                "Euler characteristic %d does not match genus %d"
                % (self.euler_characteristic(), self.genus))

        # every edge must be used by exactly two face slots
        use = np.zeros(E, dtype=int)
        for f in range(F):
            for e in self.face_e[f]:
                use[e] += 1
        if np.any(use != 2):
            raise TopologyError("surface is not closed (edge usage != 2)")

        # chain each face: slot s joins corner s to corner s+1
        self.face_v = np.zeros((F, 3), dtype=int)
        self.face_len = np.zeros((F, 3))
        self.face_slot_edge = np.zeros((F, 3), dtype=int)
        for f in range(F):
            e = list(self.face_e[f])
            if self.face_o[f] < 0:
                e = [e[0], e[2], e[1]]
            ends = [self.edge_v[i] for i in e]
            v1 = _common_vertex(ends[0], ends[1])
            v2 = _common_vertex(ends[1], ends[2])
            v0 = _common_vertex(ends[2], ends[0])
            self.face_v[f] = (v0, v1, v2)
            self.face_len[f] = [self.edge_len[i] for i in e]
            self.face_slot_edge[f] = e

        # triangle inequality and flat layout per face
        l0, l1, l2 = self.face_len[:, 0], self.face_len[:, 1], self.face_len[:, 2]
        if np.any(l0 + l1 <= l2) or np.any(l1 + l2 <= l0) or np.any(l2 + l0 <= l1):
            raise TopologyError("triangle inequality violated on a face")
        x2 = (l0 ** 2 + l2 ** 2 - l1 ** 2) / (2.0 * l0)
        y2 = np.sqrt(np.maximum(l2 ** 2 - x2 ** 2, 1e-300))
        self.layout = np.zeros((F, 3), dtype=complex)
        self.layout[:, 1] = l0
        self.layout[:, 2] = x2 + 1j * y2
        self.area_f = 0.5 * l0 * y2

        # corner angles from lengths
        def _ang(a, b, c):
            return np.arccos(np.clip((b ** 2 + c ** 2 - a ** 2) / (2 * b * c), -1, 1))
        self.angles = np.stack(
            [_ang(l1, l2, l0), _ang(l2, l0, l1), _ang(l0, l1, l2)], axis=1)

        self.theta_v = np.zeros(V)
        np.add.at(self.theta_v, self.face_v.ravel(), self.angles.ravel())
        self.defect = 2 * math.pi - self.theta_v
        self.area_v = np.zeros(V)
        np.add.at(self.area_v, self.face_v.ravel(),
                  np.repeat(self.area_f / 3.0, 3))

        self._build_halfedges()
        self._build_vertex_charts()
        self._build_gradients()
        self._op_cache = {}
        return self

    # ------------------------------------------------------------------
    def _build_halfedges(self):
        F = self.n_faces
        slot_of_edge = {}
        self.twin = np.full((F, 3), -1, dtype=int)  # (f, s) -> flat he id f*3+s
        for f in range(F):
            e = list(self.face_e[f])
            if self.face_o[f] < 0:
                e = [e[0], e[2], e[1]]
            for s in range(3):
                key = e[s]
                if key in slot_of_edge:
                    g_, t_ = slot_of_edge.pop(key)
                    self.twin[f, s] = g_ * 3 + t_
                    self.twin[g_, t_] = f * 3 + s
                else:
                    slot_of_edge[key] = (f, s)
        if slot_of_edge:
            raise TopologyError("unmatched half-edges")
        # orientability: twins must traverse the shared edge oppositely;
        # with layouts all ccw this is captured by the vertex classes below.

    def _build_vertex_charts(self):
        """Order the corner wedges around each vertex and assign rotations."""
        V, F = self.n_vertices, self.n_faces
        corner_of = [[] for _ in range(V)]
        for f in range(F):
            for s in range(3):
                corner_of[self.face_v[f, s]].append((f, s))
        self.rot = np.zeros((F, 3), dtype=complex)

        for v in range(V):
            corners = corner_of[v]
            if not corners:
                raise TopologyError("isolated vertex %d" % v)
            # walk ccw: next corner lies across the incoming half-edge (f, s+2)
            start = corners[0]
            order = []
            f, s = start
            for _ in range(len(corners)):
                order.append((f, s))
                t = self.twin[f, (s + 2) % 3]
                f, s = divmod(t, 3)
                if self.face_v[f, s] != v:
                    raise TopologyError("inconsistent orientation at vertex %d" % v)
                if (f, s) == start:
                    break
            if len(order) != len(corners):
                raise TopologyError("vertex star is not a single disk at %d" % v)

            # canonical chart origin: rotate the cycle so it starts at the
            # corner with the smallest outgoing edge id.  Half-edge ids
            # inherit the parent edge order under refinement, so restricted
            # fields keep coherent phases across nested meshes.
            keys = [(self.face_slot_edge[f_, s_], f_, s_) for (f_, s_) in order]
            t0 = keys.index(min(keys))
            order = order[t0:] + order[:t0]

            scale = 2 * math.pi / self.theta_v[v]
            acc = 0.0
            for (f, s) in order:
                p = self.layout[f]
                out_face = p[(s + 1) % 3] - p[s]
                in_face = p[(s + 2) % 3] - p[s]
                ang = self.angles[f, s]
                out_vtx = np.exp(1j * scale * acc)
                in_vtx = np.exp(1j * scale * (acc + ang))
                r1 = (out_face / abs(out_face)) / out_vtx
                r2 = (in_face / abs(in_face)) / in_vtx
                # bisector convention between the two edge-based rotations
                d = np.angle(r2 / r1)
                self.rot[f, s] = r1 * np.exp(0.5j * d)
                acc += ang

    def _build_gradients(self):
        """P1 gradient coefficients per face: d_zbar u = sum_i c_i u_i."""
        p = self.layout
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1 * np.conj(e2) - e2 * np.conj(e1)     # = -4i T
        self.grad_zbar = np.stack(
            [(e2 - e1) / det, -e2 / det, e1 / det], axis=1)
        self.grad_z = np.stack(
            [(np.conj(e1) - np.conj(e2)) / det, np.conj(e2) / det,
             -np.conj(e1) / det], axis=1)

    # ------------------------------------------------------------------
    # transported differentiation and averaging matrices, cached by weight
    def dbar_face_matrix(self, a, b=0):
        """Sparse (F, V): per-face d_zbar of a weight-(a, b) vertex field."""
        key = ("dbar", a, b)
        if key not in self._op_cache:
            self._op_cache[key] = self._assemble_face_diff(self.grad_zbar, a, b)
        return self._op_cache[key]

    def dz_face_matrix(self, a, b=0):
        """Sparse (F, V): per-face plain d_z of a weight-(a, b) vertex field."""
        key = ("dz", a, b)
        if key not in self._op_cache:
            self._op_cache[key] = self._assemble_face_diff(self.grad_z, a, b)
        return self._op_cache[key]

    def _assemble_face_diff(self, coeffs, a, b):
        F = self.n_faces
        rows = np.repeat(np.arange(F), 3)
        cols = self.face_v.ravel()
        transport = self.rot ** (-a) * np.conj(self.rot) ** (-b)
        vals = (coeffs * transport).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(F, self.n_vertices))

    def face_to_vertex_matrix(self, a, b):
        """Sparse (V, F): area-weighted transported average of face values."""
        key = ("avg", a, b)
        if key not in self._op_cache:
            F = self.n_faces
            rows = self.face_v.ravel()
            cols = np.repeat(np.arange(F), 3)
            transport = self.rot ** a * np.conj(self.rot) ** b
            w = np.repeat(self.area_f / 3.0, 3).reshape(F, 3) / \
                self.area_v[self.face_v]
            vals = (w * transport).ravel()
            self._op_cache[key] = sp.csr_matrix(
                (vals, (rows, cols)), shape=(self.n_vertices, F))
        return self._op_cache[key]

    def vertex_to_face_values(self, values, a, b):
        """(F, 3) transported corner values of a weight-(a, b) vertex field."""
        transport = self.rot ** (-a) * np.conj(self.rot) ** (-b)
        return values[self.face_v] * transport

    def face_to_vertex(self, face_values, a, b):
        return self.face_to_vertex_matrix(a, b) @ face_values


# ----------------------------------------------------------------------
# mesh file format:  header "fiber-mesh v1", sections VERTICES/EDGES/FACES
def load_fiber(path, check_genus=True):
    """Parse a mesh file and return a validated TriangulatedFiber."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split() != ["fiber-mesh", "v1"]:
        raise MeshParseError("missing 'fiber-mesh v1' header in %s" % path)
    section = None
    genus = None
    vx, vy, edges, lens, faces, orients = [], [], [], [], [], []
    for ln in lines[1:]:
        up = ln.upper()
        if up.startswith("GENUS"):
            genus = int(ln.split()[1])
            continue
        if up in ("VERTICES", "EDGES", "FACES"):
            section = up
            continue
        parts = ln.split()
        try:
            if section == "VERTICES":
                if len(parts) != 3:
                    raise ValueError
                vx.append(float(parts[1]))
                vy.append(float(parts[2]))
                if int(parts[0]) != len(vx) - 1:
                    raise MeshParseError("vertex ids must be 0..V-1 in order")
            elif section == "EDGES":
                if len(parts) != 3:
                    raise ValueError
                edges.append((int(parts[0]), int(parts[1])))
                lens.append(float(parts[2]))
            elif section == "FACES":
                if len(parts) != 4:
                    raise ValueError
                faces.append((int(parts[0]), int(parts[1]), int(parts[2])))
                orients.append(int(parts[3]))
            else:
                raise MeshParseError("data line outside any section: %r" % ln)
        except MeshParseError:
            raise
        except ValueError:
            raise MeshParseError("cannot parse line %r" % ln)
    if genus is None:
        raise MeshParseError("missing GENUS line")
    if not faces:
        raise MeshParseError("no faces")
    ev = np.array(edges, dtype=int)
    fe = np.array(faces, dtype=int)
    if ev.max(initial=-1) >= len(vx) or fe.max(initial=-1) >= len(lens):
        raise MeshParseError("index out of range")
    fiber = TriangulatedFiber(
        vx=np.array(vx), vy=np.array(vy), edge_v=ev,
        edge_len=np.array(lens), face_e=fe,
        face_o=np.array(orients, dtype=int), genus=genus)
    return fiber.finalize(check_genus=check_genus)


def dump_fiber(fiber, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fiber-mesh v1\n")
        fh.write("GENUS %d\n" % fiber.genus)
        fh.write("VERTICES\n")
        for i in range(fiber.n_vertices):
            fh.write("%d %.17g %.17g\n" % (i, fiber.vx[i], fiber.vy[i]))
        fh.write("EDGES\n")
        for i in range(fiber.n_edges):
            fh.write("%d %d %.17g\n"
                     % (fiber.edge_v[i, 0], fiber.edge_v[i, 1], fiber.edge_len[i]))
        fh.write("FACES\n")
        for i in range(fiber.n_faces):
            fh.write("%d %d %d %d\n"
                     % (fiber.face_e[i, 0], fiber.face_e[i, 1],
                        fiber.face_e[i, 2], fiber.face_o[i]))


# ----------------------------------------------------------------------
@dataclass
class HermitianMetric:
    """Per-vertex positive metric density g with respect to the charts."""

    fiber: TriangulatedFiber
    g: np.ndarray
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        if np.any(self.g <= 0):
            raise ValueError("metric density must be positive everywhere")

    @property
    def volume(self):
        return float(np.sum(self.g * self.fiber.area_v))

    def g_face(self):
        if "gf" not in self._cache:
            self._cache["gf"] = self.g[self.fiber.face_v].mean(axis=1)
        return self._cache["gf"]

    def vertex_mass(self, a, b):
        w = a + b
        return self.g ** (1 - w) * self.fiber.area_v

    def face_mass(self, a, b):
        w = a + b
        return self.g_face() ** (1 - w) * self.fiber.area_f

    def dlog_g(self):
        """Vertex values of d_z log g (weight (1, 0))."""
        if "dlg" not in self._cache:
            f = self.fiber
            face_vals = f.dz_face_matrix(0, 0) @ np.log(self.g).astype(complex)
            self._cache["dlg"] = f.face_to_vertex(face_vals, 1, 0)
        return self._cache["dlg"]


# ----------------------------------------------------------------------
@dataclass
class FormField:
    """A (p, q)-form with values in a tagged bundle, n = 1 conventions."""

    fiber: TriangulatedFiber
    p: int
    q: int
    bundle: str
    values: np.ndarray
    rep: str = "vertex"       # "vertex" | "face"
    conj: bool = False

    def __post_init__(self):
        if self.bundle not in _BUNDLE_OFFSET:
            raise FieldMismatchError("unknown bundle tag %r" % self.bundle)
        if not (0 <= self.p <= 1) or not (0 <= self.q <= 2):
            raise FieldMismatchError("bidegree out of range for n = 1")
        if self.q == 2 and np.any(self.values != 0):
            raise FieldMismatchError("(p,2)-forms vanish identically for n = 1")
        n_expected = self.fiber.n_vertices if self.rep == "vertex" \
            else self.fiber.n_faces
        if len(self.values) != n_expected:
            raise FieldMismatchError(
                "coefficient array length %d does not match %s count %d"
                % (len(self.values), self.rep, n_expected))
        self.values = np.asarray(self.values, dtype=complex)

    @property
    def weight(self):
        """Holomorphic/antiholomorphic weight (a, b) of the coefficient."""
        return _weight_of(self.p, self.q, self.bundle, self.conj)

    def signature(self):
        return (self.p, self.q, self.bundle, self.conj)

    def to_vertex(self):
        if self.rep == "vertex":
            return self
        a, b = self.weight
        vals = self.fiber.face_to_vertex(self.values, a, b)
        return FormField(self.fiber, self.p, self.q, self.bundle, vals,
                         rep="vertex", conj=self.conj)

    def to_face(self):
        if self.rep == "face":
            return self
        a, b = self.weight
        corner = self.fiber.vertex_to_face_values(self.values, a, b)
        return FormField(self.fiber, self.p, self.q, self.bundle,
                         corner.mean(axis=1), rep="face", conj=self.conj)

    def conjugate(self):
        out = FormField(self.fiber, self.p, self.q, self.bundle,
                        np.conj(self.values), rep=self.rep,
                        conj=not self.conj)
        return out

    def norm(self, metric):
        return math.sqrt(max(l2_inner(self, self, metric).real, 0.0))


def zero_field(fiber, p, q, bundle, rep="vertex"):
    n = fiber.n_vertices if rep == "vertex" else fiber.n_faces
    return FormField(fiber, p, q, bundle, np.zeros(n, dtype=complex), rep=rep)


def _weight_of(p, q, bundle, conj):
    if bundle == "scalar":
        a = p
    elif bundle in ("tangent", "lambda_t"):
        a = p - 1
    elif bundle == "omega_k":
        a = p + 1
    else:
        raise FieldMismatchError(bundle)
    b = q
    if conj:
        a, b = b, a
    return a, b


# ----------------------------------------------------------------------
def l2_inner(fa, fb, metric):
    """Hermitian L2 product <fa, fb> = integral fa conj(fb) g^{-(a+b)} g dV."""
    if fa.signature() != fb.signature():
        raise FieldMismatchError(
            "mismatched fields %r vs %r" % (fa.signature(), fb.signature()))
    if fa.rep != fb.rep:
        fb = fb.to_face() if fa.rep == "face" else fb.to_vertex()
    a, b = fa.weight
    if fa.rep == "vertex":
        m = metric.vertex_mass(a, b)
    else:
        m = metric.face_mass(a, b)
    return complex(np.sum(fa.values * np.conj(fb.values) * m))


def dbar(f):
    """dbar of a field; lands in bidegree (p, q+1) with face representation."""
    if f.conj:
        raise FieldMismatchError("dbar of a conjugated field is not defined")
    if f.q >= 1:
        # dbar o dbar = 0 and (p,2)-forms vanish for n = 1
        return zero_field(f.fiber, f.p, 2, f.bundle, rep="face")
    if f.rep != "vertex":
        f = f.to_vertex()
    a, b = f.weight
    vals = f.fiber.dbar_face_matrix(a, b) @ f.values
    out = FormField(f.fiber, f.p, f.q + 1, f.bundle, vals, rep="face",
                    conj=f.conj)
    return out


def dbar_star(f, metric):
    """Exact matrix adjoint of dbar under the discrete L2 products."""
    if f.conj:
        raise FieldMismatchError("dbar* of a conjugated field is not defined")
    if f.q == 0:
        return zero_field(f.fiber, f.p, 0, f.bundle)
    if f.q == 2:
        return zero_field(f.fiber, f.p, 1, f.bundle, rep="face")
    if f.rep != "face":
        f = f.to_face()
    a, b = f.weight
    D = f.fiber.dbar_face_matrix(a, b - 1)
    mf = metric.face_mass(a, b)
    mv = metric.vertex_mass(a, b - 1)
    vals = (D.conj().T @ (mf * f.values)) / mv
    return FormField(f.fiber, f.p, f.q - 1, f.bundle, vals, rep="vertex",
                     conj=f.conj)


# ----------------------------------------------------------------------
class BoxOperator:
    """Dolbeault Laplacian on a fixed (weight, degree) space.

    For q = 0 vertex fields:  box = dbar* dbar = M^{-1} S,  S = D^H M_f D.
    For q = 1 face fields:    box = dbar dbar* (the adjoint pair reversed).
    The pair (S, M) is Hermitian positive semi-definite, so all eigensolves
    and shifted solves run on the generalized symmetric form.
    """

    def __init__(self, fiber, metric, a, q, qbar_side=None):
        self.fiber = fiber
        self.metric = metric
        self.a = a
        self.q = q
        D = fiber.dbar_face_matrix(a, 0)
        mf = metric.face_mass(a, 1)
        mv = metric.vertex_mass(a, 0)
        if q == 0:
            self.M = mv
            self.S = (D.conj().T.multiply(mf) @ D).tocsr()
            self.size = fiber.n_vertices
        elif q == 1:
            self.M = mf
            Minv = sp.diags(1.0 / mv)
            self.S = (D @ Minv @ D.conj().T).tocsr()
            self.S = sp.diags(mf) @ self.S @ sp.diags(mf)
            self.size = fiber.n_faces
        else:
            raise FieldMismatchError("box only on q in {0, 1}")
        self._eig = None
        self._factors = {}

    def apply(self, x):
        return (self.S @ x) / self.M

    def matrix_dense(self):
        return self.S.toarray() / self.M[:, None]

    def solve_shifted(self, shift, rhs):
        """Solve (box + shift) x = rhs; shift = +1 is SPD, -1 is indefinite."""
        key = float(shift)
        if key not in self._factors:
            A = (self.S + shift * sp.diags(self.M)).tocsc()
            self._factors[key] = spla.splu(A)
        return self._factors[key].solve(self.M * rhs)

    def eig(self, k=None):
        """Lowest eigenpairs of (S, M); dense path for reproducibility.

        Returns M-orthonormal eigenvectors: U^H diag(M) U = I.
        """
        if self._eig is None:
            if self.size > DENSE_EIG_MAX:
                raise RuntimeError(
                    "dense eigensolve refused at size %d" % self.size)
            rootm = np.sqrt(self.M)
            S = self.S.toarray() / rootm[:, None] / rootm[None, :]
            S = 0.5 * (S + S.conj().T)
            w, Y = scipy.linalg.eigh(S)
            self._eig = (w, Y / rootm[:, None])
        if k is None:
            return self._eig
        w, U = self._eig
        return w[:k], U[:, :k]

    def lambda_max_estimate(self):
        d = np.abs(self.S.diagonal()) / self.M
        return float(2.0 * d.max())


def box_operator(metric, p, q, bundle, conj=False):
    a, b = _weight_of(p, q, bundle, conj)
    return BoxOperator(metric.fiber, metric, a, q)


def laplacian(fiber, metric, bidegree, bundle="scalar"):
    """Spec-facing constructor: self-adjoint box on the given space."""
    p, q = bidegree
    return box_operator(metric, p, q, bundle)


# ----------------------------------------------------------------------
# expected holomorphic section counts h^0(K^m) on a genus-g surface
def expected_h0(m, genus):
    if m < 0:
        return 0
    if m == 0:
        return 1
    if m == 1:
        return genus
    return (2 * m - 1) * (genus - 1)


def _canonicalize_columns(U):
    """Deterministic phase: largest-modulus entry of each column real positive."""
    U = np.array(U)
    for j in range(U.shape[1]):
        i = int(np.argmax(np.abs(U[:, j])))
        ph = U[i, j]
        if abs(ph) > 0:
            U[:, j] = U[:, j] * (np.conj(ph) / abs(ph))
    return U


def holomorphic_sections(metric, m, expected=None):
    """Near-kernel basis of box on weight-(m, 0) vertex fields.

    Returns (basis (V, k) M-orthonormal, eigenvalues, gap diagnostic).
    """
    fiber = metric.fiber
    box = BoxOperator(fiber, metric, m, 0)
    w, U = box.eig()
    if expected is None:
        expected = expected_h0(m, fiber.genus)
    cutoff = HARMONIC_CUTOFF_REL * box.lambda_max_estimate()
    k = int(np.sum(w < cutoff))
    if expected and k != expected:
        # rank detection by the spectral gap around the expected count
        k = expected
    basis = _canonicalize_columns(U[:, :k])
    lo = w[k - 1] if k > 0 else 0.0
    hi = w[k] if k < len(w) else np.inf
    return basis, w[:k], (lo, hi)


def harmonic_basis(metric, p, q, bundle, conj=False):
    """M-orthonormal harmonic basis of the given field space.

    q = 0: near-kernel of box (holomorphic sections of K^a).
    q = 1: conjugate-Serre construction conj(s) g^a for s in H^0(K^{1-a}),
           deflated against im(dbar) so that H(dbar x) = 0 exactly.
    Returned as a list of FormField in the natural representation.
    """
    fiber = metric.fiber
    a, b = _weight_of(p, q, bundle, conj)
    fields = []
    if q == 0:
        basis, _, _ = holomorphic_sections(metric, a)
        for j in range(basis.shape[1]):
            fields.append(FormField(fiber, p, q, bundle, basis[:, j],
                                    rep="vertex", conj=conj))
        return fields
    if q != 1:
        return fields
    partner, _, _ = holomorphic_sections(metric, 1 - a)
    if partner.shape[1] == 0:
        return fields
    gf = metric.g_face()
    D = fiber.dbar_face_matrix(a, 0)
    mf = metric.face_mass(a, 1)
    mv = metric.vertex_mass(a, 0)
    S = (D.conj().T.multiply(mf) @ D).tocsc()
    lu = spla.splu((S + 1e-14 * sp.diags(mv)).tocsc())
    raw = []
    for j in range(partner.shape[1]):
        s_face = fiber.vertex_to_face_values(partner[:, j], 1 - a, 0).mean(axis=1)
        cand = np.conj(s_face) * gf ** a
        # deflate the im(dbar) component:  cand -= dbar (S^+ D^H M cand)
        x = lu.solve(D.conj().T @ (mf * cand))
        raw.append(cand - D @ x)
    # M-orthonormalize (small Gram)
    raw = np.array(raw).T
    G = raw.conj().T @ (mf[:, None] * raw)
    L = scipy.linalg.cholesky(G, lower=True)
    ortho = scipy.linalg.solve_triangular(L, raw.conj().T, lower=True).conj().T
    ortho = _canonicalize_columns(ortho)
    for j in range(ortho.shape[1]):
        fields.append(FormField(fiber, p, q, bundle, ortho[:, j],
                                rep="face", conj=conj))
    return fields


def harmonic_project(f, metric):
    """L2-orthogonal projection onto the harmonic space of f's type."""
    basis = harmonic_basis(metric, f.p, f.q, f.bundle, f.conj)
    if not basis:
        return zero_field(f.fiber, f.p, f.q, f.bundle,
                          rep=f.rep)
    out = None
    for bfield in basis:
        c = l2_inner(f, bfield, metric)
        term = bfield.values * c
        out = term if out is None else out + term
    res = FormField(f.fiber, f.p, f.q, f.bundle, out, rep=basis[0].rep,
                    conj=f.conj)
    return res if f.rep == res.rep else (
        res.to_vertex() if f.rep == "vertex" else res.to_face())


def hodge_decompose(f, metric):
    """Split f = H(f) + dbar a + dbar* b with mutually orthogonal parts.

    The split is exact linear algebra: on q = 1 the coexact part vanishes,
    on q = 0 the exact part vanishes (n = 1).  Returns (h, ea, eb, a, b).
    """
    fiber = f.fiber
    aw, bw = f.weight
    if f.q == 1:
        ff = f.to_face()
        D = fiber.dbar_face_matrix(aw, bw - 1)
        mf = metric.face_mass(aw, bw)
        mv = metric.vertex_mass(aw, bw - 1)
        S = (D.conj().T.multiply(mf) @ D).tocsc()
        rhs = D.conj().T @ (mf * ff.values)
        x = spla.splu((S + 1e-13 * sp.diags(mv)).tocsc()).solve(rhs)
        ea = D @ x
        h = ff.values - ea
        hf = FormField(fiber, f.p, f.q, f.bundle, h, rep="face", conj=f.conj)
        eaf = FormField(fiber, f.p, f.q, f.bundle, ea, rep="face", conj=f.conj)
        ebf = zero_field(fiber, f.p, f.q, f.bundle, rep="face")
        pot = FormField(fiber, f.p, 0, f.bundle, x, rep="vertex", conj=f.conj)
        return hf, eaf, ebf, pot, None
    # q = 0: f = H + dbar* b, split through the cached eigendecomposition
    fv = f.to_vertex()
    box = BoxOperator(fiber, metric, aw, 0)
    w, U = box.eig()
    cutoff = HARMONIC_CUTOFF_REL * box.lambda_max_estimate()
    k = int(np.sum(w < cutoff))
    coeff = U.conj().T @ (box.M * fv.values)
    h = U[:, :k] @ coeff[:k] if k else np.zeros_like(fv.values)
    y = U[:, k:] @ (coeff[k:] / w[k:])
    bff = dbar(FormField(fiber, f.p, 0, f.bundle, y, rep="vertex",
                         conj=f.conj))
    eb = fv.values - h
    hf = FormField(fiber, f.p, 0, f.bundle, h, rep="vertex", conj=f.conj)
    ebf = FormField(fiber, f.p, 0, f.bundle, eb, rep="vertex", conj=f.conj)
    eaf = zero_field(fiber, f.p, 0, f.bundle)
    return hf, eaf, ebf, None, bff


# ----------------------------------------------------------------------
def ddbar_eval(metric_or_fiber, u):
    """Vertex values of d_z d_zbar u for a scalar function u (P1 evaluation)."""
    fiber = metric_or_fiber.fiber if isinstance(metric_or_fiber, HermitianMetric) \
        else metric_or_fiber
    D = fiber.dbar_face_matrix(0, 0)
    S = (D.conj().T.multiply(fiber.area_f) @ D)
    return -(S @ np.asarray(u, dtype=complex)) / fiber.area_v


def curvature_density(fiber, g):
    """Vertex values of the density of ddbar log g for a metric density g.

    The flat cone structure contributes -defect/2 at each vertex: the angle
    defect is the Gaussian curvature measure and ddbar log g picks it up
    with the factor -1/2 (for g = e^{2u}, ddbar log g = Delta u / 2 and
    Delta u carries -defect delta masses).  Discrete Gauss-Bonnet then reads
    sum(curvature_density * A_v) = -sum(defect)/2 = -pi chi, the volume of
    the Kahler-Einstein density.
    """
    base = ddbar_eval(fiber, np.log(np.asarray(g, dtype=float))).real
    return base - 0.5 * fiber.defect / fiber.area_v
