"""Gradient descent with tube diagnostics, normal-form reference maps and regime classification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numba
import numpy as np

from .errors import ConfigError, DegenerateError, DomainError
from .manifold import (
    TubeCoords,
    points_at_distance,
    project,
    project_batch,
    reconstruct,
    riem_grad_lambda,
    tube_coords,
)
from .problem import (
    FactorisationProblem,
    as_point,
    c_coeff,
    dl3_n,
    dl4_n,
    normal,
    normal_quantities_batch,
    sharpness,
)

#: A coordinate leaving (0, COORD_LIMIT) or the loss exceeding LOSS_LIMIT stops a run.
COORD_LIMIT = 1e6
LOSS_LIMIT = 1e12
#: Relative width of the band around 2/lambda* treated as exactly critical.
CRITICAL_RTOL = 1e-12
#: Distance of eta*lambda from 0 or 1 below which the rescaled coordinate is singular.
PHI_SINGULAR_TOL = 1e-9


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------

def _gd_kernel(theta: list, eta: float, y: float) -> list:
    # plain-float step; each exclusive product runs left to right over the
    # same slots, so permuted coordinates give permuted results bit for bit
    r = math.prod(theta) - y
    return [theta[l] - eta * (r * math.prod(theta[:l] + theta[l + 1:])) for l in range(len(theta))]


def gd_step(prob: FactorisationProblem, eta: float, theta) -> np.ndarray:
    """One step of gradient descent, theta - eta * grad_loss(theta)."""
    theta = as_point(prob, theta)
    return np.array(_gd_kernel(theta.tolist(), float(eta), prob.target))


def flip_step(x: float, eta_lambda: float) -> float:
    """Pure flip normal form x -> (1 - eta_lambda) x + x^3."""
    return (1.0 - eta_lambda) * x + x * x * x


def flip_orbit(x0: float, eta_lambda: float, steps: int) -> np.ndarray:
    """Iterates x_0, ..., x_steps of :func:`flip_step`."""
    out = np.empty(steps + 1)
    x, m = float(x0), 1.0 - eta_lambda
    out[0] = x
    for t in range(1, steps + 1):
        x = m * x + x * x * x
        out[t] = x
    return out


def _check_parabolic(a, b, c):
    if not (0 < a < c and b > 0):
        raise ConfigError(f"parabolic system needs 0 < a < c and b > 0, got a={a}, b={b}, c={c}")


def parabolic_step(x: float, y: float, a: float, b: float, c: float) -> tuple[float, float]:
    """One step of the clean parabolic system.

    T_x = (1 - a y^2) x and T_y = (1 + b x^2 - c y^2) y.
    """
    _check_parabolic(a, b, c)
    return (1.0 - a * y * y) * x, (1.0 + b * x * x - c * y * y) * y


def parabolic_orbit(x0: float, y0: float, a: float, b: float, c: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Iterates of :func:`parabolic_step` as two arrays of length steps + 1."""
    _check_parabolic(a, b, c)
    xs, ys = np.empty(steps + 1), np.empty(steps + 1)
    x, y = float(x0), float(y0)
    xs[0], ys[0] = x, y
    for t in range(1, steps + 1):
        x, y = (1.0 - a * y * y) * x, (1.0 + b * x * x - c * y * y) * y
        xs[t], ys[t] = x, y
    return xs, ys


def parabolic_kappa(a: float, b: float, c: float) -> float:
    """Limiting ratio y_t / x_t of the parabolic system, sqrt(b / (c - a))."""
    _check_parabolic(a, b, c)
    return math.sqrt(b / (c - a))


# ---------------------------------------------------------------------------
# normal form
# ---------------------------------------------------------------------------

def normal_form_perp_predict(prob: FactorisationProblem, eta: float, tube: TubeCoords) -> float:
    """Cubic-order prediction of the next orthogonal coordinate.

    (1 - eta lambda) t - (eta/2) D^3l[n^3] t^2 - (eta/6) D^4l[n^4] t^3 with t = theta_perp.
    """
    t = tube.theta_perp
    lam = sharpness(prob, tube.theta_par)
    return ((1.0 - eta * lam) * t
            - 0.5 * eta * dl3_n(prob, tube.theta_par) * t * t
            - eta / 6.0 * dl4_n(prob, tube.theta_par) * t ** 3)


def normal_form_par_predict(prob: FactorisationProblem, eta: float, tube: TubeCoords) -> np.ndarray:
    """Leading-order prediction of the next parallel coordinate.

    A Riemannian gradient step on the sharpness with step eta theta_perp^2 / 2,
    retracted to M by projection.
    """
    step = 0.5 * eta * tube.theta_perp ** 2
    moved = np.asarray(tube.theta_par) - step * riem_grad_lambda(prob, tube.theta_par)
    return project(prob, moved)


def _phi_parts(eta, lam, dl3, c):
    m = 1.0 - eta * lam
    delta = 0.5 * eta * dl3 / (m * m - m)
    return np.sqrt(c), delta


def phi_coordinate(prob: FactorisationProblem, eta: float, tube: TubeCoords) -> float:
    """Rescaled orthogonal coordinate in which the perpendicular map is a pure flip.

    phi = sqrt(c) (t + delta t^2) with t = theta_perp,
    delta = (eta/2) D^3l[n^3] / (m^2 - m) and m = 1 - eta lambda(theta_par).
    In this coordinate the perpendicular dynamics read m phi + phi^3 up to
    fourth-order terms.

    Raises
    ------
    DegenerateError
        If eta lambda is within 1e-9 of 0 or 1 (singular denominator) or c <= 0.
    """
    lam = sharpness(prob, tube.theta_par)
    el = eta * lam
    if abs(el) < PHI_SINGULAR_TOL or abs(el - 1.0) < PHI_SINGULAR_TOL:
        raise DegenerateError(f"eta*lambda = {el!r} makes the rescaling singular")
    c = c_coeff(prob, eta, tube.theta_par)
    if not c > 0:
        raise DegenerateError(f"c(eta, theta_par) = {c!r} is not positive")
    scale, delta = _phi_parts(eta, lam, dl3_n(prob, tube.theta_par), c)
    t = tube.theta_perp
    return float(scale * (t + delta * t * t))


def phi_batch(prob: FactorisationProblem, eta: float, theta_par: np.ndarray, theta_perp: np.ndarray) -> np.ndarray:
    """Vectorised :func:`phi_coordinate`; NaN where the rescaling is undefined."""
    q = normal_quantities_batch(prob, theta_par)
    lam = q["sharpness"]
    el = eta * lam
    a = 0.5 * eta * q["dl3"]
    c = a * a - eta / 6.0 * q["dl4"]
    bad = (np.abs(el) < PHI_SINGULAR_TOL) | (np.abs(el - 1.0) < PHI_SINGULAR_TOL) | ~(c > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale, delta = _phi_parts(eta, lam, q["dl3"], np.where(bad, np.nan, c))
        t = np.asarray(theta_perp, dtype=float)
        out = scale * (t + delta * t * t)
    return np.where(bad, np.nan, out)


class ResidualStudy(NamedTuple):
    """Residuals of the normal-form predictions against true GD steps."""

    perps: np.ndarray
    perp_residuals: np.ndarray
    par_residuals: np.ndarray
    phi_residuals: np.ndarray
    perp_slope: float
    par_slope: float
    phi_slope: float


def _loglog_slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or np.any(y <= 0) or np.any(x <= 0):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def residual_scaling(prob: FactorisationProblem, eta: float, theta_par, perps=(1e-2, 5e-3, 2.5e-3, 1.25e-3)) -> ResidualStudy:
    """Compare normal-form predictions with one true GD step for a ladder of theta_perp.

    For each theta_perp the point theta_par + theta_perp n is stepped by GD and
    re-expressed in tube coordinates; residuals are the prediction errors of
    the perpendicular map, the parallel map and the flip map in the rescaled
    coordinate.  Slopes are least-squares log-log slopes against theta_perp.
    """
    perps = np.asarray(perps, dtype=float)
    lam = sharpness(prob, theta_par)
    m = 1.0 - eta * lam
    rp, rq, rf = [], [], []
    for t in perps:
        tube = TubeCoords(np.asarray(theta_par, float), float(t))
        nxt = tube_coords(prob, gd_step(prob, eta, reconstruct(prob, theta_par, t)))
        rp.append(abs(normal_form_perp_predict(prob, eta, tube) - nxt.theta_perp))
        rq.append(float(np.linalg.norm(normal_form_par_predict(prob, eta, tube) - nxt.theta_par)))
        phi = phi_coordinate(prob, eta, tube)
        rf.append(abs(phi_coordinate(prob, eta, nxt) - (m * phi + phi ** 3)))
    rp, rq, rf = np.array(rp), np.array(rq), np.array(rf)
    return ResidualStudy(perps, rp, rq, rf, _loglog_slope(perps, rp), _loglog_slope(perps, rq), _loglog_slope(perps, rf))


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

class Regime(str, enum.Enum):
    STABLE = "Stable"
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "Supercritical"


@dataclass(frozen=True)
class RegimeSpec:
    """Regime of a run and its margins (eta - 2/lambda*, eta - 2/lambda(theta_par_0))."""

    tag: Regime
    eta: float
    margins: tuple[float, float]


def classify_margins(eta: float, lambda_star: float, lambda0: float) -> RegimeSpec:
    """Classify from the two sharpness values directly."""
    crit, init = 2.0 / lambda_star, 2.0 / lambda0
    margins = (eta - crit, eta - init)
    if abs(eta - crit) <= CRITICAL_RTOL * crit:
        tag = Regime.CRITICAL
    elif eta > crit:
        tag = Regime.SUPERCRITICAL
    elif eta > init:
        tag = Regime.SUBCRITICAL
    else:
        tag = Regime.STABLE
    return RegimeSpec(tag, float(eta), margins)


def classify(prob: FactorisationProblem, eta: float, theta0) -> RegimeSpec:
    """Regime of GD with step ``eta`` started at ``theta0``.

    Depends only on eta, lambda* and the sharpness at the projection of theta0.
    """
    lam0 = sharpness(prob, project(prob, theta0))
    return classify_margins(eta, prob.lambda_star, lam0)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def tube_point(prob: FactorisationProblem, par_offset: float, perp0: float, seed) -> np.ndarray:
    """theta_par_0 + perp0 n(theta_par_0) with theta_par_0 on M at Euclidean distance ``par_offset`` from theta*.

    The direction of theta_par_0 is drawn from ``np.random.default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(prob.depth)
    par = points_at_distance(prob, direction[None, :], par_offset)[0]
    return par + perp0 * normal(prob, par)


@dataclass(frozen=True)
class RunConfig:
    """Configuration of a single GD run.

    ``theta0`` may be omitted, in which case the start is drawn by
    :func:`tube_point` from ``par_offset``, ``perp0`` and ``seed``.
    """

    problem: FactorisationProblem
    eta: float
    theta0: Optional[np.ndarray] = None
    steps: int = 1000
    record_every: int = 1
    seed: int = 0
    par_offset: Optional[float] = None
    perp0: Optional[float] = None

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be positive, got {self.eta!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ConfigError(f"record_every must be a positive integer, got {self.record_every!r}")
        if self.theta0 is None and (self.par_offset is None or self.perp0 is None):
            raise ConfigError("give either theta0 or both par_offset and perp0")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", as_point(self.problem, self.theta0).copy())

    def initial_point(self) -> np.ndarray:
        if self.theta0 is not None:
            return self.theta0.copy()
        return tube_point(self.problem, self.par_offset, self.perp0, self.seed)


class Record(NamedTuple):
    t: int
    theta: np.ndarray
    loss: float
    tube: TubeCoords
    sharpness_par: float
    dist_par: float
    eta_lambda: float


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Trajectory:
    """Recorded GD iterates and per-record diagnostics (column arrays).

    ``phi`` holds the rescaled orthogonal coordinate (NaN where undefined).
    ``diverged`` is set when the divergence guard stopped the run; the
    offending iterate is not recorded.
    """

    problem: FactorisationProblem
    eta: float
    record_every: int
    t: np.ndarray
    theta: np.ndarray
    loss: np.ndarray
    theta_par: np.ndarray
    theta_perp: np.ndarray
    sharpness_par: np.ndarray
    dist_par: np.ndarray
    eta_lambda: np.ndarray
    phi: np.ndarray
    diverged: bool = False
    diverged_at: Optional[int] = None
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def records(self) -> list[Record]:
        return [
            Record(int(self.t[k]), self.theta[k], float(self.loss[k]),
                   TubeCoords(self.theta_par[k], float(self.theta_perp[k])),
                   float(self.sharpness_par[k]), float(self.dist_par[k]), float(self.eta_lambda[k]))
            for k in range(len(self.t))
        ]

    @classmethod
    def from_iterates(cls, problem: FactorisationProblem, eta: float, ts, thetas, record_every: int = 1,
                      diverged: bool = False, diverged_at=None, steps: int | None = None, meta=None) -> "Trajectory":
        """Build a trajectory (and all tube diagnostics) from recorded iterates."""
        ts = np.asarray(ts, dtype=np.int64)
        th = np.asarray(thetas, dtype=float).reshape(len(ts), problem.depth)
        if len(ts):
            par = project_batch(problem, th)
            q = normal_quantities_batch(problem, par)
            perp = np.einsum("ij,ij->i", th - par, q["normal"])
            lam = q["sharpness"]
            dist = np.linalg.norm(par - problem.theta_star, axis=1)
            res = np.prod(th, axis=1) - problem.target
            loss = 0.5 * res * res
            phi = phi_batch(problem, eta, par, perp)
        else:
            par = np.empty((0, problem.depth))
            perp = lam = dist = loss = phi = np.empty(0)
        return cls(problem, float(eta), int(record_every), _frozen(ts), _frozen(th), _frozen(loss), _frozen(par),
                   _frozen(perp), _frozen(lam), _frozen(dist), _frozen(eta * lam), _frozen(phi),
                   bool(diverged), diverged_at, int(steps if steps is not None else (ts[-1] if len(ts) else 0)),
                   dict(meta or {}))


@numba.njit(cache=True)
def _gd_loop(theta0, eta, y, steps, every, coord_limit, loss_limit):  # pragma: no cover - compiled
    # Same arithmetic, in the same order, as _gd_kernel; compiled without
    # fast-math so the iterates are bit-identical to repeated gd_step calls.
    p = theta0.shape[0]
    out = np.empty((steps // every + 1, p))
    th = theta0.copy()
    new = np.empty(p)
    k = 0
    diverged_at = -1
    for t in range(steps + 1):
        prod = 1.0
        for i in range(p):
            prod *= th[i]
        r = prod - y
        bad = not (0.5 * r * r <= loss_limit)
        for i in range(p):
            if not (0.0 < th[i] < coord_limit):
                bad = True
        if bad:
            diverged_at = t
            break
        if t % every == 0:
            out[k] = th
            k += 1
        if t < steps:
            for l in range(p):
                g = 1.0
                for i in range(p):
                    if i != l:
                        g *= th[i]
                new[l] = th[l] - eta * (r * g)
            th[:] = new
    return out[:k], diverged_at


@numba.njit(cache=True)
def _orbit_loop(theta0, eta, y, steps):  # pragma: no cover - compiled
    p = theta0.shape[0]
    out = np.empty((steps + 1, p))
    out[0] = theta0
    th = theta0.copy()
    new = np.empty(p)
    for t in range(1, steps + 1):
        prod = 1.0
        for i in range(p):
            prod *= th[i]
        r = prod - y
        finite = True
        for l in range(p):
            g = 1.0
            for i in range(p):
                if i != l:
                    g *= th[i]
            new[l] = th[l] - eta * (r * g)
            if not np.isfinite(new[l]):
                finite = False
        if not finite:
            return out[:t]
        th[:] = new
        out[t] = th
    return out


def gd_orbit(prob: FactorisationProblem, eta: float, theta0, steps: int) -> np.ndarray:
    """Raw GD iterates theta_0, ..., theta_steps without the divergence guard of :func:`run`.

    Iterates may leave the positive orthant.  The orbit is truncated before
    the first non-finite iterate.  Bit-identical to repeated :func:`gd_step`.
    """
    theta0 = as_point(prob, theta0)
    if int(steps) != steps or steps < 0:
        raise ConfigError(f"steps must be a non-negative integer, got {steps!r}")
    return _orbit_loop(theta0.astype(float), float(eta), prob.target, int(steps))


def run(config: RunConfig) -> Trajectory:
    """Run gradient descent and record tube diagnostics every ``record_every`` steps.

    Records are taken at t = 0, record_every, 2 record_every, ... up to
    ``steps``.  The run stops early, with ``diverged`` set, if a coordinate
    leaves (0, 1e6) or the loss exceeds 1e12; the offending iterate is not
    recorded.
    """
    prob = config.problem
    theta0 = config.initial_point()
    if np.any(theta0 <= 0):
        raise DomainError("theta0 must lie in the positive orthant")
    every = int(config.record_every)
    rows, div = _gd_loop(theta0.astype(float), float(config.eta), prob.target, int(config.steps), every,
                         COORD_LIMIT, LOSS_LIMIT)
    ts = np.arange(len(rows), dtype=np.int64) * every
    diverged_at = None if div < 0 else int(div)
    return Trajectory.from_iterates(prob, config.eta, ts, rows, every, diverged_at is not None, diverged_at,
                                    config.steps, {"theta0": theta0.tolist()})
