"""Fiberwise Kahler-Einstein solver via Newton iteration with -(box + 1).

Discrete Monge-Ampere setup (one fiber dimension):  the input is a positive
volume datum rho per vertex (the seed hermitian metric).  Its curvature
density w = density of ddbar log rho must be positive (canonical
polarization).  The Kahler-Einstein potential solves

    F(phi) = log((w + L phi) / rho) - phi = 0,

where L is the linear ddbar evaluator on functions.  The solution density
g = w + L phi then satisfies the discrete Einstein condition
ddbar log g = g exactly at F = 0, because log g = log rho + phi.

The Newton linearization of F at the current iterate is

    dF(delta) = (L delta) / g_phi - delta = -(box_{g_phi} + 1) delta,

assembled from the very same stiffness matrix as the surface_core Laplacian,
so the linearization/operator identity holds to machine precision.  Damping:
plain step halving whenever positivity of the updated density fails or the
residual does not decrease.

The discrete solution is seed independent: F(phi) = 0 forces g = L log g +
defect part, an equation in g alone.  An independently converged damped
fixed-point solver (frozen preconditioner) serves as the uniqueness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .surface import (
    HermitianMetric, TriangulatedFiber, BoxOperator, ddbar_eval,
    curvature_density,
)


class KESolveError(RuntimeError):
    """Newton failed; carries the residual history."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class KEMetric:
    """Result of a Kahler-Einstein solve."""

    fiber: TriangulatedFiber
    seed_rho: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    f_datum: np.ndarray            # log(w / rho), the log-ratio datum
    residual_history: list
    ricci_residual: float
    newton_check: float            # max relative deviation of dF from -(box+1)
    volume: float
    class_volume: float            # integral of the seed curvature density
    converged: bool = True

    def metric(self):
        return HermitianMetric(self.fiber, self.g)

    def convergence_order(self):
        """Estimated Newton order from the last three usable residuals."""
        r = [x for x in self.residual_history if x > 1e-14]
        if len(r) < 3:
            return float("nan")
        r3 = r[-3:]
        num = np.log(r3[2] / r3[1])
        den = np.log(r3[1] / r3[0])
        return float(num / den) if den < 0 else float("nan")


def _ddbar_matrix(fiber):
    """Sparse L with (L u)_v = ddbar_eval(u)_v (real symmetric stiffness)."""
    D = fiber.dbar_face_matrix(0, 0)
    S = (D.conj().T.multiply(fiber.area_f) @ D).real
    return -sp.diags(1.0 / fiber.area_v) @ S, S.tocsr()


def background_curvature(fiber, seed):
    """Curvature density w of the seed datum; must be positive."""
    rho = seed.g if isinstance(seed, HermitianMetric) else np.asarray(seed)
    w = curvature_density(fiber, rho)
    return w


def ricci_residual(metric, fiber=None):
    """sup |Ric(g) + 1| with Ric(g) = -curvature_density(g)/g."""
    if fiber is None:
        fiber = metric.fiber
    g = metric.g if isinstance(metric, HermitianMetric) else np.asarray(metric)
    ric = -curvature_density(fiber, g) / g
    return float(np.max(np.abs(ric + 1.0)))


def solve_ke(fiber, seed, tol=1e-8, max_iter=30, check_linearization=True):
    """Newton solve of the discrete Monge-Ampere equation.

    seed: HermitianMetric volume datum rho.  Returns a KEMetric whose
    density g satisfies sup|F| <= tol; raises KESolveError on failure.
    """
    rho = seed.g if isinstance(seed, HermitianMetric) else np.asarray(seed, float)
    if np.any(rho <= 0):
        raise ValueError("seed must be positive")
    w = background_curvature(fiber, rho)
    if np.any(w <= 0):
        raise KESolveError(
            "seed curvature density is not positive (not canonically "
            "polarizing); min = %g" % w.min())
    Lmat, S = _ddbar_matrix(fiber)
    area = fiber.area_v
    f_datum = np.log(w / rho)
    class_volume = float(np.sum(w * area))

    phi = np.zeros(fiber.n_vertices)
    g = w.copy()
    history = []
    newton_check = 0.0

    def F_of(phi_vec):
        gv = w + (Lmat @ phi_vec)
        if np.any(gv <= 0):
            return gv, None
        return gv, np.log(gv / rho) - phi_vec

    g, Fv = F_of(phi)
    res = float(np.max(np.abs(Fv)))
    history.append(res)

    for _ in range(max_iter):
        if res <= tol:
            break
        # Newton matrix: (box_{g} + 1) = M^{-1}(S + M), M = g * area
        M = g * area
        A = (S + sp.diags(M)).tocsc()
        delta = spla.splu(A).solve(M * Fv)
        if check_linearization:
            # dF(delta) = (L delta)/g - delta must equal -(box+1) delta
            lhs = (Lmat @ delta) / g - delta
            rhs = -((S @ delta) / M + delta)
            scale = np.max(np.abs(rhs)) + 1e-300
            newton_check = max(newton_check,
                               float(np.max(np.abs(lhs - rhs)) / scale))
        t = 1.0
        for _ in range(40):
            cand = phi + t * delta
            g_c, F_c = F_of(cand)
            if F_c is not None:
                r_c = float(np.max(np.abs(F_c)))
                if r_c < res or t < 1e-6:
                    phi, g, Fv, res = cand, g_c, F_c, r_c
                    break
            t *= 0.5
        else:
            raise KESolveError("positivity step-halving exhausted", history)
        history.append(res)

    if res > tol:
        raise KESolveError(
            "Newton did not reach tol=%g after %d iterations (last %g)"
            % (tol, max_iter, res), history)

    km = KEMetric(
        fiber=fiber, seed_rho=rho, phi=phi, g=g, f_datum=f_datum,
        residual_history=history,
        ricci_residual=ricci_residual(g, fiber),
        newton_check=newton_check,
        volume=float(np.sum(g * area)),
        class_volume=class_volume,
        converged=True)
    return km


def solve_ke_picard(fiber, seed, tol=1e-11, max_iter=4000, relax=1.0):
    """Damped fixed-point solver with a frozen preconditioner (oracle).

    Iterates phi <- phi + relax * (box_0 + 1)^{-1} F(phi) with box_0 frozen
    at the seed curvature metric.  Linearly convergent and independent of
    the Newton path; used for the uniqueness cross-check.
    """
    rho = seed.g if isinstance(seed, HermitianMetric) else np.asarray(seed, float)
    w = background_curvature(fiber, rho)
    if np.any(w <= 0):
        raise KESolveError("seed curvature density is not positive")
    Lmat, S = _ddbar_matrix(fiber)
    area = fiber.area_v
    M0 = w * area
    solver = spla.splu((S + sp.diags(M0)).tocsc())
    phi = np.zeros(fiber.n_vertices)
    history = []
    for _ in range(max_iter):
        g = w + (Lmat @ phi)
        if np.any(g <= 0):
            raise KESolveError("positivity lost in fixed-point iteration",
                               history)
        Fv = np.log(g / rho) - phi
        res = float(np.max(np.abs(Fv)))
        history.append(res)
        if res <= tol:
            break
        phi = phi + relax * solver.solve(M0 * Fv)
    else:
        raise KESolveError("fixed-point solver did not converge", history)
    return KEMetric(
        fiber=fiber, seed_rho=rho, phi=phi, g=w + (Lmat @ phi),
        f_datum=np.log(w / rho), residual_history=history,
        ricci_residual=ricci_residual(w + (Lmat @ phi), fiber),
        newton_check=0.0,
        volume=float(np.sum((w + Lmat @ phi) * area)),
        class_volume=float(np.sum(w * area)),
        converged=True)


_KE_CACHE = {}


def hyperbolic_ke_metric(fiber, tol=1e-10):
    """Canonical Kahler-Einstein metric of the fiber, solved from a flat seed.

    The unit density is an O(h^2) approximation of the hyperbolic structure
    carried by the edge lengths, so Newton converges in a few steps; the
    result is cached per fiber object.
    """
    key = id(fiber)
    if key not in _KE_CACHE or _KE_CACHE[key][0] is not fiber:
        seed = HermitianMetric(fiber, np.ones(fiber.n_vertices))
        km = solve_ke(fiber, seed, tol=tol, max_iter=40)
        _KE_CACHE[key] = (fiber, km)
    return _KE_CACHE[key][1]
