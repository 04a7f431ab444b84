"""Rate fitting and inequality checks on recorded trajectories."""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .dynamics import Regime, RegimeSpec, Trajectory, classify_margins
from .errors import DomainError
from .manifold import GeometryConstants, curvature_range, sample_near
from .problem import FactorisationProblem, c_coeff_batch

#: Values at or below this magnitude are treated as numerical zero when fitting rates.
NOISE_FLOOR = 1e-12
LOG_FLOOR = 1e-300
CYCLE_SPREAD_TOL = 1e-3
CHECK_TOL = 1e-9


class RateModel(str, enum.Enum):
    LINEAR = "Linear"
    POWER_LAW = "PowerLaw"


@dataclass(frozen=True)
class RateFit:
    """Least-squares rate fit.

    ``parameter`` is the per-step ratio beta = exp(slope) for Linear fits and
    the exponent for PowerLaw fits.
    """

    model: RateModel
    parameter: float
    r_squared: float
    window: tuple[int, int]
    n_points: int


@dataclass(frozen=True)
class TheoremCheck:
    """Outcome of checking an inequality along a trajectory (positive margin = satisfied)."""

    name: str
    holds: bool
    worst_margin: float
    first_violation_step: Optional[int] = None
    details: dict = field(default_factory=dict)

    @classmethod
    def not_applicable(cls, name: str, reason: str) -> "TheoremCheck":
        return cls(name, True, 0.0, None, {"applicable": False, "reason": reason})


@dataclass(frozen=True)
class RegimeReport:
    regime: RegimeSpec
    tau: Optional[int]
    rates: dict
    cycle_amplitude: Optional[float]
    suboptimality_gap: Optional[float]
    checks: list
    diverged: bool = False
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# series tools
# ---------------------------------------------------------------------------

def detect_tau(traj: Trajectory) -> Optional[int]:
    """First recorded step at which eta * lambda(theta_par_t) drops below 2.

    Exact only for trajectories recorded at every step.
    """
    below = np.flatnonzero(np.asarray(traj.eta_lambda) < 2.0)
    return int(traj.t[below[0]]) if below.size else None


def _as_series(series):
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError("series must be a sequence of (t, value) pairs")
    return arr[:, 0], arr[:, 1]


def fit_rate(series, model, window=None) -> RateFit:
    """Fit a linear (geometric) or power-law rate to positive values.

    Parameters
    ----------
    series : array-like of (t, value) pairs
    model : RateModel or its string value
    window : (t_start, t_end), optional
        Inclusive range of t.  Defaults to the last 40% of records for Linear
        fits and to [1000, last t] for PowerLaw fits.
    """
    model = RateModel(model)
    t, v = _as_series(series)
    if window is None:
        if model is RateModel.LINEAR:
            window = (t[int(0.6 * len(t))] if len(t) else 0, t[-1] if len(t) else 0)
        else:
            window = (1e3, t[-1] if len(t) else 0)
    lo, hi = window
    mask = (t >= lo) & (t <= hi)
    tw, vw = t[mask], v[mask]
    if len(tw) < 2:
        raise DomainError(f"window {window} holds fewer than two points")
    if np.any(~(vw > 0)):
        raise DomainError("values in the fit window must be positive (clip at 1e-300 first)")
    x = tw if model is RateModel.LINEAR else np.log(tw)
    if model is RateModel.POWER_LAW and np.any(tw <= 0):
        raise DomainError("power-law fits need t > 0")
    yv = np.log(vw)
    if np.ptp(yv) == 0:
        slope, r2 = 0.0, 1.0
    else:
        res = stats.linregress(x, yv)
        slope, r2 = float(res.slope), float(res.rvalue ** 2)
    param = math.exp(slope) if model is RateModel.LINEAR else slope
    return RateFit(model, param, min(max(r2, 0.0), 1.0), (int(tw[0]), int(tw[-1])), int(len(tw)))


def positive_prefix(t, values, floor: float = 0.0):
    """Cut a series at the first value whose magnitude is at or below ``floor``."""
    t, v = np.asarray(t), np.abs(np.asarray(values, dtype=float))
    bad = np.flatnonzero(~(v > floor))
    end = bad[0] if bad.size else len(v)
    return t[:end], v[:end]


def detect_cycle2(series, tail_fraction: float = 0.2, spread_tol: float = CYCLE_SPREAD_TOL,
                  floor: float = NOISE_FLOOR) -> Optional[float]:
    """Mean amplitude of a period-two tail, or None if the tail is not a 2-cycle.

    The tail must alternate strictly in sign, have mean amplitude above
    ``floor``, and each of its two phases (even and odd positions, i.e. the
    two points of the cycle) must have relative spread below ``spread_tol``.
    """
    if not 0 < tail_fraction <= 1:
        raise DomainError("tail_fraction must lie in (0, 1]")
    s = np.asarray(series, dtype=float)
    k = min(len(s), max(4, int(math.ceil(tail_fraction * len(s)))))
    tail = s[len(s) - k:]
    if k < 4 or not np.all(np.isfinite(tail)):
        return None
    sg = np.sign(tail)
    if np.any(sg == 0) or not np.all(sg[1:] == -sg[:-1]):
        return None
    mag = np.abs(tail)
    amp = float(mag.mean())
    if amp < floor:
        return None
    for phase in (mag[0::2], mag[1::2]):
        if np.ptp(phase) / phase.mean() >= spread_tol:
            return None
    return amp


# ---------------------------------------------------------------------------
# measured constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometrySample:
    """Points of M near theta* with the curvature range of the sharpness over them."""

    points: np.ndarray
    radius: float
    mu_measured: float
    lipschitz: float

    def c_range(self, prob: FactorisationProblem, eta: float) -> tuple[float, float]:
        c = c_coeff_batch(prob, eta, self.points)
        return float(c.min()), float(c.max())


@functools.lru_cache(maxsize=64)
def _geometry_sample_cached(depth, target, radius, count, seed):
    prob = FactorisationProblem(depth, target)
    pts = sample_near(prob, radius, count, seed)
    pts = np.vstack([prob.theta_star[None, :], pts])
    lo, hi = curvature_range(prob, pts)
    pts.setflags(write=False)
    return GeometrySample(pts, radius, lo, hi)


def geometry_sample(prob: FactorisationProblem, constants: GeometryConstants, count: int = 200,
                    seed: int = 0) -> GeometrySample:
    """Sample the convexity ball (0.15 y^{1/p}, also used for p = 2) and measure mu and L there."""
    radius = constants.ball_radius if math.isfinite(constants.ball_radius) else 0.15 * prob.target ** (1.0 / prob.depth)
    return _geometry_sample_cached(prob.depth, prob.target, float(radius), int(count), int(seed))


def tau_ceiling_log(phi0: float, eta: float, lambda0: float, lambda_star: float, mu: float, c_max: float) -> float:
    """Natural log of the stabilisation-time ceiling.

    ceil((1 / (6 phi0^2)) ((2/eta - lambda*) / (lambda0 - lambda*))^(-24 C / (mu eta))),
    evaluated in log space because it routinely exceeds the float range.
    """
    ratio = (2.0 / eta - lambda_star) / (lambda0 - lambda_star)
    return -math.log(6.0 * phi0 * phi0) - 24.0 * c_max / (mu * eta) * math.log(ratio)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def _first_violation(traj, margins, idx, tol):
    bad = np.flatnonzero(margins < -tol)
    return int(traj.t[idx[bad[0]]]) if bad.size else None


def check_descent(traj: Trajectory, constants: GeometryConstants, tol: float = CHECK_TOL) -> TheoremCheck:
    """Descent inequality for the sharpness along consecutive records.

    lambda_{t+1} - lambda* <= (1 - mu eta phi_t^2 / (4 c_t)) (lambda_t - lambda*), with
    phi the rescaled orthogonal coordinate and c_t = c(eta, theta_par_t).  For
    records spaced k steps apart the factor is raised to the power k.  Only
    pairs with both endpoints inside the convexity ball are checked.
    """
    name = "descent"
    if len(traj) < 2:
        return TheoremCheck.not_applicable(name, "fewer than two records")
    lam = np.asarray(traj.sharpness_par)
    inside = np.asarray(traj.dist_par) <= constants.ball_radius
    idx = np.flatnonzero(inside[:-1] & inside[1:] & np.isfinite(traj.phi[:-1]))
    if idx.size == 0:
        return TheoremCheck.not_applicable(name, "no consecutive records inside the convexity ball")
    c = c_coeff_batch(traj.problem, traj.eta, traj.theta_par[idx])
    phi = np.asarray(traj.phi)[idx]
    gap = lam - constants.lambda_star
    spacing = np.diff(np.asarray(traj.t))[idx]
    factor = (1.0 - constants.mu * traj.eta * phi * phi / (4.0 * c)) ** spacing
    margins = factor * gap[idx] - gap[idx + 1]
    worst = float(margins.min())
    return TheoremCheck(name, worst >= -tol, worst, _first_violation(traj, margins, idx, tol),
                        {"pairs_checked": int(idx.size), "coordinate": "phi"})


def check_perp_bounds(traj: Trajectory, tau: Optional[int] = None, tol: float = 1e-12) -> TheoremCheck:
    """Upper and lower bounds on the orthogonal coordinate while eta lambda >= 2.

    lower: |phi_0| / sqrt(1 + 6 phi_0^2 t); upper: 2 sqrt(eta lambda_0 - 2).
    The constant 6 is the one the supporting argument actually delivers (the
    headline statement uses 3).  Checked in the rescaled coordinate phi, whose
    cubic coefficient is one, on records with t < tau (all records if tau is None).
    """
    name = "perp_bounds"
    if len(traj) == 0:
        return TheoremCheck.not_applicable(name, "empty trajectory")
    el0 = float(traj.eta_lambda[0])
    if not el0 > 2.0:
        return TheoremCheck.not_applicable(name, "eta * lambda(theta_par_0) <= 2")
    phi = np.asarray(traj.phi)
    phi0 = abs(float(phi[0]))
    upper = 2.0 * math.sqrt(el0 - 2.0)
    if not math.isfinite(phi0) or phi0 == 0.0:
        return TheoremCheck.not_applicable(name, "initial point on M or rescaling undefined")
    if phi0 > upper:
        return TheoremCheck.not_applicable(name, "initial |phi| exceeds 2 sqrt(eta lambda_0 - 2)")
    t = np.asarray(traj.t)
    idx = np.flatnonzero((t < tau) if tau is not None else np.ones(len(t), bool))
    idx = idx[np.isfinite(phi[idx])]
    mag = np.abs(phi[idx])
    lower = phi0 / np.sqrt(1.0 + 6.0 * phi0 * phi0 * t[idx])
    m_lo = mag - lower
    m_up = upper - mag
    margins = np.minimum(m_lo, m_up)
    scale = tol * max(upper, phi0)
    worst = float(margins.min())
    return TheoremCheck(name, worst >= -scale, worst, _first_violation(traj, margins, idx, scale), {
        "coordinate": "phi", "lower_constant": 6, "statement_constant": 3,
        "worst_lower_margin": float(m_lo.min()), "worst_upper_margin": float(m_up.min()),
        "records_checked": int(idx.size),
    })


def check_suboptimality(traj: Trajectory, constants: GeometryConstants, tau: Optional[int],
                        lipschitz: float, c_min: float, converged_loss: float = 1e-20) -> TheoremCheck:
    """Positive limiting sharpness gap and its lower bound.

    gap >= exp(-(4 eta L^2 / (c mu)) phi_tau^2 / (1 - beta^2)) (lambda_tau - lambda*),
    with beta = eta lambda_tau - 1 and c the smallest sampled c(eta, .).
    """
    name = "suboptimality"
    if len(traj) == 0 or tau is None:
        return TheoremCheck.not_applicable(name, "no stabilisation time")
    if not float(traj.loss[-1]) < converged_loss:
        return TheoremCheck.not_applicable(name, f"final loss {float(traj.loss[-1]):.3e} not below {converged_loss:g}")
    if float(traj.theta_perp[0]) == 0.0:
        return TheoremCheck.not_applicable(name, "started on M; no dynamics")
    k = int(np.searchsorted(traj.t, tau))
    lam_tau = float(traj.sharpness_par[k])
    phi_tau = float(traj.phi[k])
    beta = traj.eta * lam_tau - 1.0
    gap = float(traj.sharpness_par[-1]) - constants.lambda_star
    exponent = -(4.0 * traj.eta * lipschitz ** 2 / (c_min * constants.mu)) * phi_tau ** 2 / (1.0 - beta * beta)
    bound = math.exp(exponent) * (lam_tau - constants.lambda_star)
    m_pos, m_bound = gap, gap - bound
    worst = min(m_pos, m_bound)
    return TheoremCheck(name, m_pos > 0 and m_bound >= -CHECK_TOL, worst, None if worst >= 0 else int(traj.t[-1]), {
        "gap": gap, "lower_bound": bound, "log_bound_factor": exponent, "beta": beta,
        "positive_margin": m_pos, "bound_margin": m_bound,
    })


def check_tau_bound(traj: Trajectory, constants: GeometryConstants, tau: Optional[int], c_max: float) -> TheoremCheck:
    """Stabilisation time against its ceiling (compared in log space)."""
    name = "tau_bound"
    if tau is None:
        return TheoremCheck.not_applicable(name, "no stabilisation time")
    phi0 = abs(float(traj.phi[0]))
    lam0 = float(traj.sharpness_par[0])
    if not (phi0 > 0 and lam0 > constants.lambda_star and traj.eta * constants.lambda_star < 2.0):
        return TheoremCheck.not_applicable(name, "ceiling undefined for this start")
    log_ceiling = tau_ceiling_log(phi0, traj.eta, lam0, constants.lambda_star, constants.mu, c_max)
    ceiling = math.ceil(math.exp(log_ceiling)) if log_ceiling < 700 else math.inf
    margin = math.log(max(ceiling, 1)) - math.log(max(tau, 1)) if math.isfinite(ceiling) else log_ceiling - math.log(max(tau, 1))
    return TheoremCheck(name, tau <= ceiling, margin, None if tau <= ceiling else tau, {
        "tau": tau, "log10_ceiling": log_ceiling / math.log(10.0), "margin_units": "natural log",
    })


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------

def _try_fit(t, v, model, window=None, floor=NOISE_FLOOR):
    tt, vv = positive_prefix(t, v, floor)
    if window is not None:
        lo, hi = window
        keep = (tt >= lo) & (tt <= hi)
        tt, vv = tt[keep], vv[keep]
        window = None if len(tt) < 3 else (tt[0], tt[-1])
    if len(tt) < 3:
        return None
    try:
        return fit_rate(np.column_stack([tt, vv]), model, window)
    except DomainError:
        return None


def summarize(traj: Trajectory, constants: GeometryConstants, sample: GeometrySample | None = None) -> RegimeReport:
    """Classify a trajectory and attach the fits and checks that apply to its regime."""
    if len(traj) == 0:
        raise DomainError("cannot summarise an empty trajectory")
    prob = traj.problem
    regime = classify_margins(traj.eta, constants.lambda_star, float(traj.sharpness_par[0]))
    if traj.diverged:
        return RegimeReport(regime, None, {}, None, None, [], True, {"diverged_at": traj.diverged_at})
    sample = sample or geometry_sample(prob, constants)
    c_min, c_max = sample.c_range(prob, traj.eta)
    t = np.asarray(traj.t)
    perp = np.abs(np.asarray(traj.theta_perp))
    dist = np.asarray(traj.dist_par)
    sgap = np.asarray(traj.sharpness_par) - constants.lambda_star
    rates: dict = {}
    checks: list = []
    diag: dict = {"c_range": [c_min, c_max], "mu_measured": sample.mu_measured, "lipschitz": sample.lipschitz}
    tau = cycle = subgap = None
    tag = regime.tag

    def put(key, fit):
        if fit is not None:
            rates[key] = fit

    if tag is Regime.SUBCRITICAL:
        tau = detect_tau(traj)
        if tau is not None:
            put("abs_theta_perp", _try_fit(t, perp, RateModel.LINEAR, (tau, t[-1])))
        subgap = float(sgap[-1])
        checks.append(check_tau_bound(traj, constants, tau, c_max))
        checks.append(check_descent(traj, constants))
        checks.append(check_perp_bounds(traj, tau))
        checks.append(check_suboptimality(traj, constants, tau, sample.lipschitz, c_min))
    elif tag is Regime.CRITICAL:
        put("abs_theta_perp", _try_fit(t, perp, RateModel.POWER_LAW))
        put("dist_par", _try_fit(t, dist, RateModel.POWER_LAW))
        put("sharpness_gap", _try_fit(t, sgap, RateModel.POWER_LAW))
        checks.append(check_descent(traj, constants))
        a = constants.nu / (constants.c_star * constants.lambda_star)
        b = constants.nu / constants.lambda_star
        diag["kappa"] = math.sqrt(b / (1.0 - a))
        if dist[-1] > 0 and math.isfinite(float(traj.phi[-1])):
            diag["phi_over_dist_final"] = float(abs(traj.phi[-1]) / dist[-1])
    elif tag is Regime.SUPERCRITICAL:
        cycle = detect_cycle2(traj.phi)
        diag["tube_cycle_amplitude"] = detect_cycle2(traj.theta_perp)
        diag["sqrt_alpha"] = math.sqrt(traj.eta * constants.lambda_star - 2.0)
        put("dist_par", _try_fit(t, dist, RateModel.LINEAR))
        put("sharpness_gap", _try_fit(t, sgap, RateModel.LINEAR))
        checks.append(check_perp_bounds(traj, None))
    else:
        put("abs_theta_perp", _try_fit(t, perp, RateModel.LINEAR))
        checks.append(check_descent(traj, constants))
    return RegimeReport(regime, tau, rates, cycle, subgap, checks, False, diag)


# ---------------------------------------------------------------------------
# serialisation helpers
# ---------------------------------------------------------------------------

def jsonable(obj):
    """Convert reports and their parts to JSON-ready values (non-finite floats become None)."""
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (RateFit, TheoremCheck, RegimeSpec, GeometryConstants)):
        return jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def report_to_dict(report: RegimeReport) -> dict:
    return {
        "regime": jsonable(report.regime),
        "tau": report.tau,
        "rates": jsonable(report.rates),
        "cycle_amplitude": jsonable(report.cycle_amplitude),
        "suboptimality_gap": jsonable(report.suboptimality_gap),
        "checks": jsonable(report.checks),
        "divergence_flag": report.diverged,
        "diagnostics": jsonable(report.diagnostics),
    }
