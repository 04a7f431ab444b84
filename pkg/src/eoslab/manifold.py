"""Geometry of the solution manifold M = {theta > 0 : prod(theta) = y}.

Nearest-point projection (KKT conditions solved by a bracketed search on
the multiplier), tubular-neighbourhood coordinates (theta_par, theta_perp), the
Riemannian gradient and Hessian of the sharpness lambda = |grad f|^2 along M,
and the closed-form geometric constants of the scalar factorisation problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .problem import (
    FactorisationProblem,
    as_point,
    c_coeff,
    check_on_manifold,
    grad_f,
    hess_f,
    normal,
    normal_quantities_batch,
    third_f,
)

MAX_BISECTION_ITERS = 200  # iterations of the bracketed root search
BISECTION_RTOL = 1e-15
#: Relative discriminant below which a projection is flagged as degenerate (focal set).
DEGENERACY_TOL = 1e-8


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    """Result of a batch KKT projection.

    Attributes
    ----------
    theta_par : ndarray, shape (N, p)
        Projected points.
    alpha : ndarray, shape (N,)
        KKT multipliers.
    mixed_branch : ndarray of bool
        Rows solved with the smallest coordinate on the minus branch and the
        others on the plus branch.
    degenerate : ndarray of bool
        Rows where the discriminant nearly vanishes at the solution, i.e. the
        input sits on (or next to) the focal set where the nearest point stops
        being unique to second order.
    iterations : int
        Root-search iterations used.
    """

    theta_par: np.ndarray
    alpha: np.ndarray
    mixed_branch: np.ndarray
    degenerate: np.ndarray
    iterations: int


def _branch(theta, alpha, signs, y):
    disc = np.maximum(theta * theta - 4.0 * alpha[:, None] * y, 0.0)
    return 0.5 * (theta + signs * np.sqrt(disc))


def kkt_project(prob: FactorisationProblem, theta) -> Projection:
    """Project the rows of ``theta`` onto M by solving the KKT conditions.

    Each coordinate of the nearest point solves t^2 - theta_i t + alpha y = 0,
    i.e. t = (theta_i +/- sqrt(theta_i^2 - 4 alpha y)) / 2.  At a nearest
    point at most one coordinate, the smallest, can take the minus sign.
    Below M every coordinate takes the plus sign.  Above M the plus branch is
    followed while alpha stays under the cap where the smallest coordinate's
    discriminant vanishes; if the product is still above y at the cap, the
    solution continues past that branch point with the smallest coordinate on
    the minus sign, where the product climbs from 0 (alpha = 0) back up to its
    value at the cap.  The root is bracketed on the branch used and found by
    Newton steps safeguarded by bisection (200 iterations at most).

    Raises
    ------
    DomainError
        If any coordinate is not strictly positive.
    NumericalError
        If the bracket does not straddle the target.
    """
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    if th.shape[1] != prob.depth:
        raise DomainError(f"expected points of length {prob.depth}, got shape {th.shape}")
    if not np.all(np.isfinite(th)) or np.any(th <= 0):
        raise DomainError("projection requires finite, strictly positive coordinates")
    p, y = prob.depth, prob.target
    rows = np.arange(th.shape[0])
    prod = np.prod(th, axis=1)
    below = prod < y
    signs = np.ones_like(th)

    # Bracket.  Below M the plus branch is decreasing in alpha and every
    # coordinate exceeds sqrt(|alpha| y), so alpha = -y^{2/p - 1} overshoots.
    # On or above M alpha ranges up to the largest value keeping every
    # discriminant nonnegative.
    b_pos = (th * th).min(axis=1) / (4.0 * y)
    lo = np.where(below, -(y ** (2.0 / p - 1.0)), 0.0)
    hi = np.where(below, 0.0, b_pos)

    def residual(a):
        return np.prod(_branch(th, a, signs, y), axis=1) - y

    mixed = ~below & (residual(hi) > 0)
    if np.any(mixed):
        signs[rows[mixed], np.argmin(th[mixed], axis=1)] = -1.0
    increasing = mixed
    r_lo, r_hi = residual(lo), residual(hi)
    ok = np.where(increasing, (r_lo <= 0) & (r_hi >= 0), (r_lo >= 0) & (r_hi <= 0))
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise NumericalError(
            "KKT bracket does not contain the root for point "
            f"{th[bad].tolist()} (product {prod[bad]:.6g}, target {y:.6g}, "
            f"bracket [{lo[bad]:.6g}, {hi[bad]:.6g}], residuals {r_lo[bad]:.3g}, {r_hi[bad]:.3g})"
        )

    # Safeguarded Newton iteration: Newton steps on the product from a
    # first-order estimate of alpha, replaced by a bisection step whenever they
    # would leave the current bracket.  The bracket shrinks at every iteration,
    # so the method inherits the unconditional convergence of bisection.
    inv_sq = (1.0 / (th * th)).sum(axis=1)
    a = (prod - y) / (prod * y * inv_sq)
    a = np.where((a > lo) & (a < hi), a, 0.5 * (lo + hi))
    r_tol = 2.0 * p * np.finfo(float).eps * y
    it = 0
    for it in range(1, MAX_BISECTION_ITERS + 1):
        disc = np.maximum(th * th - 4.0 * a[:, None] * y, 0.0)
        root = np.sqrt(disc)
        par = 0.5 * (th + signs * root)
        val = np.prod(par, axis=1)
        r = val - y
        go_up = np.where(increasing, r < 0, r > 0)
        lo = np.where(go_up, a, lo)
        hi = np.where(go_up, hi, a)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = val * (-signs * y / (root * par)).sum(axis=1)
            step = r / slope
        nxt = a - step
        fallback = ~np.isfinite(nxt) | (nxt <= lo) | (nxt >= hi)
        nxt = np.where(fallback, 0.5 * (lo + hi), nxt)
        width = hi - lo
        done = (np.abs(r) <= r_tol) | (width <= BISECTION_RTOL * (1.0 + np.abs(a))) \
            | (np.abs(nxt - a) <= BISECTION_RTOL * (1.0 + np.abs(a)))
        a = np.where(done, a, nxt)
        if np.all(done):
            break
    # keep whichever of lo, the iterate and hi has the smallest residual; near a
    # branch point of the square root an endpoint can be far more accurate
    cands = np.stack([lo, a, hi])
    res = np.abs(np.stack([residual(c) for c in cands]))
    alpha = cands[np.argmin(res, axis=0), rows]
    par = _branch(th, alpha, signs, y)
    rel_disc = (th * th - 4.0 * alpha[:, None] * y) / (th * th)
    # Near a branch point t depends on alpha like a square root, so the
    # coordinate with the smallest discriminant is the worst conditioned one;
    # recover it from the product constraint given the others.
    k = np.argmin(rel_disc, axis=1)
    others = par.copy()
    others[rows, k] = 1.0
    with np.errstate(divide="ignore", over="ignore"):
        # an underflowed partner yields inf here, which the on-manifold checks reject
        par[rows, k] = y / np.prod(others, axis=1)
    degenerate = rel_disc.min(axis=1) < DEGENERACY_TOL
    return Projection(par, alpha, mixed, degenerate, it)


def project_batch(prob: FactorisationProblem, theta) -> np.ndarray:
    """Nearest points on M for every row of ``theta``."""
    return kkt_project(prob, theta).theta_par


def project(prob: FactorisationProblem, theta) -> np.ndarray:
    """Nearest point on M to a single positive point ``theta``."""
    return kkt_project(prob, as_point(prob, theta)[None, :]).theta_par[0]


# ---------------------------------------------------------------------------
# tube coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TubeCoords:
    """A point near M written as theta_par + theta_perp * n(theta_par)."""

    theta_par: np.ndarray
    theta_perp: float

    def reconstruct(self, prob: FactorisationProblem) -> np.ndarray:
        return reconstruct(prob, self.theta_par, self.theta_perp)


def reconstruct(prob: FactorisationProblem, theta_par, theta_perp: float) -> np.ndarray:
    """theta_par + theta_perp * n(theta_par)."""
    return np.asarray(theta_par, dtype=float) + theta_perp * normal(prob, theta_par)


def tube_coords(prob: FactorisationProblem, theta) -> TubeCoords:
    """Tubular-neighbourhood coordinates of a single point."""
    theta = as_point(prob, theta)
    par = project(prob, theta)
    return TubeCoords(par, float((theta - par) @ normal(prob, par)))


def tube_coords_batch(prob: FactorisationProblem, theta) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised tube coordinates: returns ``(theta_par, theta_perp)`` for the rows of ``theta``."""
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    par = project_batch(prob, th)
    n = normal_quantities_batch(prob, par)["normal"]
    return par, np.einsum("ij,ij->i", th - par, n)


# ---------------------------------------------------------------------------
# Riemannian calculus of the sharpness
# ---------------------------------------------------------------------------

def tangent_projector(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Orthogonal projector I - n n^T onto the tangent space of M."""
    n = normal(prob, theta_par)
    return np.eye(prob.depth) - np.outer(n, n)


def tangent_basis(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Orthonormal basis of the tangent space as the columns of a p x (p-1) matrix."""
    n = normal(prob, theta_par)
    _, _, vt = np.linalg.svd(n[None, :])
    return vt[1:].T


def riem_grad_lambda(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Riemannian gradient of the sharpness: (I - n n^T) 2 Hess f grad f."""
    theta = check_on_manifold(prob, theta_par)
    g = grad_f(prob, theta)
    return tangent_projector(prob, theta) @ (2.0 * hess_f(prob, theta) @ g)


def riem_hess_lambda(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Riemannian Hessian of the sharpness, generic form.

    2 P (D^3f grad f + (Hess f)^2 - <n, Hess f n> Hess f) P with P = I - n n^T.
    """
    theta = check_on_manifold(prob, theta_par)
    g = grad_f(prob, theta)
    n = g / np.linalg.norm(g)
    h2 = hess_f(prob, theta)
    h3 = third_f(prob, theta)
    inner = h3 @ g + h2 @ h2 - float(n @ h2 @ n) * h2
    proj = np.eye(prob.depth) - np.outer(n, n)
    out = 2.0 * proj @ inner @ proj
    return 0.5 * (out + out.T)


def riem_hess_lambda_closed_form(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Riemannian Hessian of the sharpness from the scalar-factorisation closed form.

    With v = 1/theta, s1 = sum v^2 and s2 = sum v^4:

    * p > 2: 2 y^2 P (3 diag(v^4) - (s2/s1) diag(v^2)) P
    * p = 2: 2 y^2 P (diag(v^4) + (s1 - s2/s1) diag(v^2)) P
    """
    theta = check_on_manifold(prob, theta_par)
    y = prob.target
    v = 1.0 / theta
    v2, v4 = v**2, v**4
    s1, s2 = v2.sum(), v4.sum()
    if prob.depth > 2:
        diag = 3.0 * v4 - (s2 / s1) * v2
    else:
        diag = v4 + (s1 - s2 / s1) * v2
    n = v / np.linalg.norm(v)
    proj = np.eye(prob.depth) - np.outer(n, n)
    out = 2.0 * y * y * proj @ np.diag(diag) @ proj
    return 0.5 * (out + out.T)


def _sharpness_rows(prob, rows):
    return normal_quantities_batch(prob, rows)["sharpness"]


def riem_hess_lambda_fd(prob: FactorisationProblem, theta_par, step: float = 1e-3) -> np.ndarray:
    """Finite-difference Riemannian Hessian of the sharpness (verification oracle).

    Metric projection onto M is a second-order retraction R, so
    d^2/ds^2 lambda(R(theta + s u)) at s = 0 equals Hess lambda[u, u] for any
    tangent u.  Second differences (with one Richardson step) along u and
    polarisation over an orthonormal tangent basis give the full matrix, which
    is returned in ambient coordinates.
    """
    theta = check_on_manifold(prob, theta_par)
    basis = tangent_basis(prob, theta)
    k = basis.shape[1]
    dirs, keys = [], []
    for i in range(k):
        for j in range(i, k):
            if i == j:
                dirs.append(basis[:, i])
                keys.append((i, j, 0))
            else:
                dirs.append(basis[:, i] + basis[:, j])
                keys.append((i, j, 1))
                dirs.append(basis[:, i] - basis[:, j])
                keys.append((i, j, -1))
    dirs = np.array(dirs)
    scales = np.array([1.0, -1.0, 2.0, -2.0]) * step
    pts = (theta[None, None, :] + scales[None, :, None] * dirs[:, None, :]).reshape(-1, prob.depth)
    lam = _sharpness_rows(prob, project_batch(prob, pts)).reshape(len(dirs), 4)
    lam0 = float(_sharpness_rows(prob, theta[None, :])[0])
    d_h = (lam[:, 0] - 2.0 * lam0 + lam[:, 1]) / step**2
    d_2h = (lam[:, 2] - 2.0 * lam0 + lam[:, 3]) / (2.0 * step) ** 2
    quad = (4.0 * d_h - d_2h) / 3.0

    tang = np.zeros((k, k))
    acc = {}
    for (i, j, s), q in zip(keys, quad):
        if s == 0:
            tang[i, i] = q
        else:
            acc.setdefault((i, j), {})[s] = q
    for (i, j), q in acc.items():
        tang[i, j] = tang[j, i] = 0.25 * (q[1] - q[-1])
    return basis @ tang @ basis.T


def tangent_eigenvalues(prob: FactorisationProblem, theta_par, hessian=None) -> np.ndarray:
    """Eigenvalues (ascending) of a Riemannian Hessian restricted to the tangent space."""
    basis = tangent_basis(prob, theta_par)
    h = riem_hess_lambda(prob, theta_par) if hessian is None else hessian
    return np.linalg.eigvalsh(basis.T @ h @ basis)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryConstants:
    """Closed-form geometric constants of the problem.

    Attributes
    ----------
    lambda_star : float
        Minimal sharpness p y^{2-2/p}.
    nu : float
        Curvature of the sharpness at theta*, 4 y^{2-4/p}.
    mu : float
        Geodesic strong-convexity constant of the sharpness on the ball.
    ball_radius : float
        Radius of the ball around theta* on which ``mu`` is valid
        (``inf`` when ``ball_unbounded``).
    c_star : float
        c(2/lambda*, theta*).
    exact_radius : float
        Exact radius of the ball in which the proof's Euclidean ball sits
        (``inf`` for p = 2).
    ball_unbounded : bool
        True for p = 2, where convexity holds on the whole of M.
    """

    lambda_star: float
    nu: float
    mu: float
    ball_radius: float
    c_star: float
    exact_radius: float
    ball_unbounded: bool

    @property
    def additional_ratio(self) -> float:
        """nu / (c_star lambda_star); at most 1/2 for scalar factorisation."""
        return self.nu / (self.c_star * self.lambda_star)


def exact_convexity_radius(prob: FactorisationProblem) -> float:
    """y^{1/p} (4 pi + 1 - sqrt(16 pi + 1)) / (16 pi - 8); infinite for p = 2."""
    if prob.depth == 2:
        return math.inf
    pi = math.pi
    return prob.target ** (1.0 / prob.depth) * (4 * pi + 1 - math.sqrt(16 * pi + 1)) / (16 * pi - 8)


def geometry_constants(prob: FactorisationProblem) -> GeometryConstants:
    """Evaluate the closed-form constants of the problem."""
    p, y = prob.depth, prob.target
    lam_star = prob.lambda_star
    nu = 4.0 * y ** (2.0 - 4.0 / p)
    if p == 2:
        mu, radius, unbounded = 2.0, math.inf, True
    else:
        mu, radius, unbounded = 1.33 * y ** (2.0 - 4.0 / p), 0.15 * y ** (1.0 / p), False
    c_star = c_coeff(prob, 2.0 / lam_star, prob.theta_star)
    return GeometryConstants(lam_star, nu, mu, radius, c_star, exact_convexity_radius(prob), unbounded)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def points_at_distance(prob: FactorisationProblem, directions, distances, tol: float = 1e-14,
                       max_iter: int = 100) -> np.ndarray:
    """Points of M at prescribed Euclidean distances from theta*.

    Each point is project(theta* + s u) for the tangent direction u (a row of
    ``directions``, tangent at theta*), with s tuned by the fixed-point
    iteration s <- s * target / distance.
    """
    star = prob.theta_star
    u = np.atleast_2d(np.asarray(directions, dtype=float))
    u = u - u.mean(axis=1, keepdims=True)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    target = np.broadcast_to(np.asarray(distances, dtype=float), (u.shape[0],)).copy()
    if np.any(target < 0) or np.any(target >= star[0]):
        raise DomainError("distances must lie in [0, y^{1/p})")
    s = target.copy()
    out = np.repeat(star[None, :], u.shape[0], axis=0)
    active = target > 0
    if not np.any(active):
        return out
    for _ in range(max_iter):
        pts = project_batch(prob, star + s[active, None] * u[active])
        dist = np.linalg.norm(pts - star, axis=1)
        out[active] = pts
        err = np.abs(dist - target[active])
        if np.all(err <= tol * np.maximum(target[active], star[0])):
            return out
        s[active] *= target[active] / dist
    raise NumericalError("distance iteration did not converge while sampling M")


def sample_near(prob: FactorisationProblem, radius: float, count: int, seed=0, exact: bool = False) -> np.ndarray:
    """Random points of M within Euclidean distance ``radius`` of theta*.

    Directions are uniform on the unit sphere of the tangent space at theta*;
    distances are uniform in the (p-1)-ball of the given radius, or all equal
    to ``radius`` when ``exact`` is set.  Returns an array of shape (count, p);
    deterministic given ``seed``.
    """
    p = prob.depth
    if radius < 0 or radius >= prob.target ** (1.0 / p):
        raise DomainError("radius must lie in [0, y^{1/p})")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, p))
    if exact:
        dist = np.full(count, float(radius))
    else:
        # slight shrink keeps round-off from pushing a point past the radius
        dist = radius * rng.random(count) ** (1.0 / (p - 1)) * (1.0 - 1e-9)
    if radius == 0:
        return np.repeat(prob.theta_star[None, :], count, axis=0)
    return points_at_distance(prob, dirs, dist)


def curvature_range(prob: FactorisationProblem, points) -> tuple[float, float]:
    """Smallest and largest tangent eigenvalue of the Riemannian Hessian over ``points``."""
    lo, hi = math.inf, -math.inf
    for pt in np.atleast_2d(points):
        ev = tangent_eigenvalues(prob, pt)
        lo, hi = min(lo, float(ev[0])), max(hi, float(ev[-1]))
    return lo, hi
