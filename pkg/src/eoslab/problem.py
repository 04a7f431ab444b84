"""Deep scalar factorisation: the objective and its exact derivatives.

The instance is f(theta) = theta_1 * ... * theta_p fitted to a positive target y
by the least-squares loss l(theta) = (f(theta) - y)^2 / 2.  Its set of global
minima M = f^{-1}{y} (positive orthant branch) is a hypersurface, and every
quantity the normal-form analysis consumes (sharpness, unit normal, the
normal derivatives of l, the cubic coefficient c) is defined here.

Derivative tensors of f are built from distinct-index products, so they are
valid off M as well; the familiar on-M shortcuts (e.g. grad f = y / theta)
are only used as test assertions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateError, DomainError, InstanceError, UnsupportedOrderError

#: Relative deviation of the product from the target tolerated for on-M inputs.
ON_MANIFOLD_RTOL = 1e-10


@dataclass(frozen=True)
class FactorisationProblem:
    """A depth-``p`` scalar factorisation problem with target ``y``.

    Attributes
    ----------
    depth : int
        Number of factors p, at least 2.
    target : float
        Positive target value y.
    """

    depth: int
    target: float

    def __post_init__(self):
        if isinstance(self.depth, bool) or int(self.depth) != self.depth or self.depth < 2:
            raise InstanceError(f"depth must be an integer >= 2, got {self.depth!r}")
        if not (np.isfinite(self.target) and self.target > 0):
            raise InstanceError(f"target must be a positive finite real, got {self.target!r}")
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "target", float(self.target))

    @property
    def theta_star(self) -> np.ndarray:
        """Balanced point y^{1/p} 1_p, the sharpness minimiser on M."""
        return np.full(self.depth, self.target ** (1.0 / self.depth))

    @property
    def lambda_star(self) -> float:
        """Minimal sharpness on M, p y^{2-2/p}."""
        p, y = self.depth, self.target
        return p * y ** (2.0 - 2.0 / p)

    @property
    def eta_critical(self) -> float:
        """Step size 2 / lambda* at which the critical regime occurs."""
        return 2.0 / self.lambda_star


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def as_point(prob: FactorisationProblem, theta) -> np.ndarray:
    """Return ``theta`` as a float vector, checking its length against the problem."""
    arr = np.asarray(theta, dtype=float)
    if arr.ndim != 1 or arr.shape[0] != prob.depth:
        raise InstanceError(f"expected a point of length {prob.depth}, got shape {arr.shape}")
    return arr


def manifold_deviation(prob: FactorisationProblem, theta) -> float:
    """Relative deviation |f(theta) - y| / y."""
    return abs(f(prob, theta) - prob.target) / prob.target


def check_on_manifold(prob: FactorisationProblem, theta, rtol: float = ON_MANIFOLD_RTOL) -> np.ndarray:
    """Validate that ``theta`` lies on the positive branch of M and return it as an array."""
    arr = as_point(prob, theta)
    if np.any(arr <= 0):
        raise DomainError("on-manifold points must have strictly positive coordinates")
    dev = manifold_deviation(prob, arr)
    if dev > rtol:
        raise DomainError(f"point is off the solution manifold (relative product deviation {dev:.3e})")
    return arr


def _exclusive_product(values: Sequence[float], skip) -> float:
    # sequential product in index order; identical inputs give bitwise identical
    # outputs regardless of which slots are skipped
    out = 1.0
    for i, v in enumerate(values):
        if i not in skip:
            out *= v
    return out


# ---------------------------------------------------------------------------
# objective and derivatives of f
# ---------------------------------------------------------------------------

def f(prob: FactorisationProblem, theta) -> float:
    """Product of all coordinates."""
    arr = as_point(prob, theta)
    return _exclusive_product(arr.tolist(), ())


def grad_f(prob: FactorisationProblem, theta) -> np.ndarray:
    """Gradient of f: entry l is the product of all coordinates except the l-th."""
    vals = as_point(prob, theta).tolist()
    return np.array([_exclusive_product(vals, (l,)) for l in range(len(vals))])


def _sym_tensor(vals: list[float], order: int) -> np.ndarray:
    p = len(vals)
    out = np.zeros((p,) * order)
    for combo in itertools.combinations(range(p), order):
        value = _exclusive_product(vals, set(combo))
        for perm in itertools.permutations(combo):
            out[perm] = value
    return out


def hess_f(prob: FactorisationProblem, theta) -> np.ndarray:
    """Dense Hessian of f; entry (j, k) is the product over i not in {j, k}, zero on the diagonal."""
    return _sym_tensor(as_point(prob, theta).tolist(), 2)


def third_f(prob: FactorisationProblem, theta) -> np.ndarray:
    """Dense third derivative of f (distinct-index products, zero if any index repeats)."""
    return _sym_tensor(as_point(prob, theta).tolist(), 3)


def deriv_tensor_contract(prob: FactorisationProblem, theta, order: int, dirs=None):
    """Contract the ``order``-th derivative tensor of f with direction vectors.

    Parameters
    ----------
    order : int
        2 or 3.
    dirs : sequence of vectors, optional
        Either ``order`` directions (full contraction, returns a float), a single
        direction that is repeated ``order`` times, or ``None`` to get the full
        tensor back.
    """
    if order not in (2, 3):
        raise UnsupportedOrderError(f"order must be 2 or 3, got {order!r}")
    tensor = hess_f(prob, theta) if order == 2 else third_f(prob, theta)
    if dirs is None:
        return tensor
    dirs = [as_point(prob, d) for d in dirs]
    if len(dirs) == 1:
        dirs = dirs * order
    if len(dirs) != order:
        raise InstanceError(f"need 1 or {order} directions, got {len(dirs)}")
    out = tensor
    for d in reversed(dirs):
        out = out @ d
    return float(out)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss(prob: FactorisationProblem, theta) -> float:
    """Least-squares loss (f - y)^2 / 2."""
    r = f(prob, theta) - prob.target
    return 0.5 * r * r


def grad_loss(prob: FactorisationProblem, theta) -> np.ndarray:
    """(f - y) grad f."""
    return (f(prob, theta) - prob.target) * grad_f(prob, theta)


def hess_loss(prob: FactorisationProblem, theta) -> np.ndarray:
    """grad f grad f^T + (f - y) Hess f."""
    g = grad_f(prob, theta)
    return np.outer(g, g) + (f(prob, theta) - prob.target) * hess_f(prob, theta)


# ---------------------------------------------------------------------------
# on-manifold quantities
# ---------------------------------------------------------------------------

def sharpness(prob: FactorisationProblem, theta_par) -> float:
    """Sharpness lambda = |grad f|^2 at a point of M."""
    g = grad_f(prob, check_on_manifold(prob, theta_par))
    return float(g @ g)


def normal(prob: FactorisationProblem, theta_par) -> np.ndarray:
    """Unit normal grad f / |grad f| to M."""
    g = grad_f(prob, check_on_manifold(prob, theta_par))
    nrm = float(np.linalg.norm(g))
    if nrm == 0.0:
        raise DegenerateError("gradient of f vanishes; the normal is undefined")
    return g / nrm


def _normal_parts(prob, theta_par):
    theta = check_on_manifold(prob, theta_par)
    g = grad_f(prob, theta)
    nrm = float(np.linalg.norm(g))
    if nrm == 0.0:
        raise DegenerateError("gradient of f vanishes; the normal is undefined")
    return theta, g / nrm, nrm


def dl3_n(prob: FactorisationProblem, theta_par) -> float:
    """Third normal derivative of the loss on M: 3 D^2f[n,n] <Df, n>."""
    theta, n, df_n = _normal_parts(prob, theta_par)
    return 3.0 * deriv_tensor_contract(prob, theta, 2, [n]) * df_n


def dl4_n(prob: FactorisationProblem, theta_par) -> float:
    """Fourth normal derivative of the loss on M: 4 D^3f[n,n,n] <Df, n> + 3 (D^2f[n,n])^2."""
    theta, n, df_n = _normal_parts(prob, theta_par)
    d2 = deriv_tensor_contract(prob, theta, 2, [n])
    d3 = deriv_tensor_contract(prob, theta, 3, [n])
    return 4.0 * d3 * df_n + 3.0 * d2 * d2


def c_coeff(prob: FactorisationProblem, eta: float, theta_par) -> float:
    """Cubic normal-form coefficient c(eta, theta_par) = ((eta/2) D^3l)^2 - (eta/6) D^4l."""
    if not eta > 0:
        raise DomainError("eta must be positive")
    a = 0.5 * eta * dl3_n(prob, theta_par)
    return a * a - eta / 6.0 * dl4_n(prob, theta_par)


def c_star_closed_form(prob: FactorisationProblem) -> float:
    """c(2/lambda*, theta*) in closed form: (32/p^3 C(p,2)^2 - 8/p^2 C(p,3)) y^{-2/p}."""
    p, y = prob.depth, prob.target
    return (32.0 / p**3 * math.comb(p, 2) ** 2 - 8.0 / p**2 * math.comb(p, 3)) * y ** (-2.0 / p)


def normal_quantities_batch(prob: FactorisationProblem, theta_par: np.ndarray) -> dict:
    """Vectorised normal quantities for many points of M (rows of ``theta_par``).

    Uses D^2f[u,u] = 2 f e_2(u/theta) and D^3f[u,u,u] = 6 f e_3(u/theta), with
    e_k the elementary symmetric polynomials, which hold whenever all
    coordinates are nonzero.  Returns a dict with ``grad``, ``sharpness``,
    ``normal``, ``dl3`` and ``dl4`` arrays.
    """
    th = np.atleast_2d(np.asarray(theta_par, dtype=float))
    fval = np.prod(th, axis=1)
    g = fval[:, None] / th
    lam = np.einsum("ij,ij->i", g, g)
    df_n = np.sqrt(lam)
    n = g / df_n[:, None]
    w = n / th
    p1 = w.sum(axis=1)
    p2 = (w * w).sum(axis=1)
    p3 = (w * w * w).sum(axis=1)
    e2 = 0.5 * (p1 * p1 - p2)
    e3 = (p1**3 - 3.0 * p1 * p2 + 2.0 * p3) / 6.0
    d2 = 2.0 * fval * e2
    d3 = 6.0 * fval * e3
    return {
        "grad": g,
        "sharpness": lam,
        "normal": n,
        "dl3": 3.0 * d2 * df_n,
        "dl4": 4.0 * d3 * df_n + 3.0 * d2 * d2,
    }


def c_coeff_batch(prob: FactorisationProblem, eta: float, theta_par: np.ndarray) -> np.ndarray:
    """Vectorised :func:`c_coeff` over the rows of ``theta_par``."""
    q = normal_quantities_batch(prob, theta_par)
    a = 0.5 * eta * q["dl3"]
    return a * a - eta / 6.0 * q["dl4"]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

#: Default relative step per derivative order (central differences).
FD_STEPS = {1: 1e-4, 2: 1e-4, 3: 1e-3, 4: 5e-3}


def finite_diff_oracle(prob: FactorisationProblem, theta, order: int, dirs=None,
                       target: str = "f", step: float | None = None):
    """Central finite-difference directional derivative of ``f`` or ``loss``.

    Parameters
    ----------
    order : int
        Derivative order, 1 to 4.
    dirs : sequence of vectors, optional
        ``order`` directions or a single repeated direction.  For ``order == 1``
        and ``dirs is None`` the full gradient is returned.
    target : {"f", "loss"}
        Which function to differentiate.
    step : float, optional
        Step size; defaults to ``FD_STEPS[order] * max(1, |theta|)``.

    Notes
    -----
    Repeated directions use the standard 3-point (orders 1, 2) and 5-point
    (orders 3, 4) central stencils; the 5-point results get one Richardson
    extrapolation step (h and 2h) to remove the h^2 truncation term.  Mixed directions use the product-of-signs
    central formula, which is second order accurate.  This function is an
    independent oracle meant for verification only.
    """
    if order not in (1, 2, 3, 4):
        raise UnsupportedOrderError(f"order must be in 1..4, got {order!r}")
    theta = as_point(prob, theta)
    if target == "f":
        fun = lambda x: f(prob, x)  # noqa: E731
    elif target == "loss":
        fun = lambda x: loss(prob, x)  # noqa: E731
    else:
        raise ValueError(f"unknown target {target!r}")
    h = step if step is not None else FD_STEPS[order] * max(1.0, float(np.linalg.norm(theta)))

    if dirs is None:
        if order != 1:
            raise InstanceError("directions are required for order >= 2")
        eye = np.eye(prob.depth)
        return np.array([(fun(theta + h * e) - fun(theta - h * e)) / (2 * h) for e in eye])

    dirs = [as_point(prob, d) for d in dirs]
    if len(dirs) == 1:
        dirs = dirs * order
    if len(dirs) != order:
        raise InstanceError(f"need 1 or {order} directions, got {len(dirs)}")

    if all(np.array_equal(d, dirs[0]) for d in dirs):
        u = dirs[0]
        g = lambda s: fun(theta + s * h * u)  # noqa: E731
        if order == 1:
            return (g(1) - g(-1)) / (2 * h)
        if order == 2:
            return (g(1) - 2 * g(0) + g(-1)) / h**2
        if order == 3:
            d3 = lambda k: (g(2 * k) - 2 * g(k) + 2 * g(-k) - g(-2 * k)) / (2 * (k * h) ** 3)  # noqa: E731
            return (4.0 * d3(1) - d3(2)) / 3.0
        d4 = lambda k: (g(2 * k) - 4 * g(k) + 6 * g(0) - 4 * g(-k) + g(-2 * k)) / (k * h) ** 4  # noqa: E731
        return (4.0 * d4(1) - d4(2)) / 3.0

    total = 0.0
    for signs in itertools.product((1.0, -1.0), repeat=order):
        shift = sum(s * d for s, d in zip(signs, dirs))
        total += math.prod(signs) * fun(theta + h * shift)
    return total / (2 * h) ** order
