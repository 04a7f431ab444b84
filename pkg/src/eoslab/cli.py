"""Command-line experiment runner.

Runs the stable, subcritical, critical and supercritical presets (or an
explicit step size), writes one CSV per trajectory, one JSON summary per
experiment and a three-panel SVG figure, and prints verification tables with
``--check``.

Exit codes: 0 success, 2 configuration error, 3 numerical or I/O failure
(including a failed ``--check``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import analysis
from .dynamics import RunConfig, Trajectory, residual_scaling, run
from .errors import ConfigError, EoslabError
from .manifold import geometry_constants, points_at_distance, project
from .problem import (
    FactorisationProblem,
    c_star_closed_form,
    deriv_tensor_contract,
    dl3_n,
    dl4_n,
    finite_diff_oracle,
    grad_f,
    normal,
    normal_quantities_batch,
    sharpness,
)

CSV_COLUMNS = ("t", "loss", "sharpness_par", "dist_par", "theta_perp", "eta_lambda")
REGIMES = ("stable", "subcritical", "critical", "supercritical")
#: Minimum relative excess of lambda(theta_par_0) over lambda* for subcritical starts.
SUBCRITICAL_MIN_EXCESS = 0.005
MAX_REJECTIONS = 1000


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``None`` fields are filled from the regime preset by :meth:`resolved`.
    Offsets are absolute Euclidean distances on M; preset offsets scale with
    y^{1/p}.
    """

    depth: int = 5
    target: float = 1.0
    regime: Optional[str] = None
    eta: Optional[float] = None
    alpha: float = 1e-3
    perp0: Optional[float] = None
    par_offset: Optional[float] = None
    theta0: Optional[list] = None
    inits: int = 5
    seed: int = 0
    steps: Optional[int] = None
    record_every: Optional[int] = None
    out: str = "results"
    figures: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def validate(self):
        if self.regime is None and self.eta is None and self.theta0 is None:
            raise ConfigError("choose a --regime or give an explicit --eta")
        if self.regime is not None and self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.regime is not None and self.eta is not None:
            raise ConfigError("--regime and --eta are mutually exclusive")
        if self.regime is None and self.eta is None:
            raise ConfigError("an explicit theta0 needs an explicit eta")
        if self.eta is not None and not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError("eta must be positive")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError("alpha must be positive")
        if self.inits < 1:
            raise ConfigError("inits must be at least 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.record_every is not None and self.record_every < 1:
            raise ConfigError("record_every must be at least 1")
        if self.perp0 is not None and not math.isfinite(self.perp0):
            raise ConfigError("perp0 must be finite")
        if self.par_offset is not None and not (0 <= self.par_offset < self.target ** (1.0 / self.depth)):
            raise ConfigError("par_offset must lie in [0, y^{1/p})")
        if self.theta0 is not None and not all(math.isfinite(v) and v > 0 for v in self.theta0):
            raise ConfigError("theta0 must have finite, strictly positive entries")
        if self.theta0 is not None and len(self.theta0) != self.depth:
            raise ConfigError("theta0 must have one entry per factor")
        try:
            FactorisationProblem(self.depth, self.target)
        except EoslabError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> "ExperimentConfig":
        """Copy with every preset-dependent field filled in."""
        self.validate()
        scale = self.target ** (1.0 / self.depth)
        preset = {
            "stable": dict(par_offset=0.05 * scale, perp0=1e-2, steps=20000, record_every=1),
            "subcritical": dict(par_offset=0.15 * scale, perp0=1e-2, steps=100000, record_every=1),
            "critical": dict(par_offset=0.15 * scale, perp0=1e-2, steps=100000, record_every=10),
            "supercritical": dict(par_offset=0.05 * scale, perp0=0.5 * math.sqrt(self.alpha),
                                  steps=int(math.ceil(150.0 / self.alpha)), record_every=5),
            None: dict(par_offset=0.05 * scale, perp0=1e-2, steps=10000, record_every=1),
        }[self.regime]
        out = dataclasses.replace(self)
        for key, value in preset.items():
            if getattr(out, key) is None:
                setattr(out, key, value)
        if out.theta0 is not None:
            out.inits = 1
        return out


def parse_depths(text: str) -> list[int]:
    """'5' -> [5]; '2..8' -> [2, ..., 8]."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"bad depth specification {text!r}") from None


# ---------------------------------------------------------------------------
# experiment execution
# ---------------------------------------------------------------------------

def _init_rng(seed: int, k: int):
    return np.random.default_rng([seed, k])


def _initial_par(prob, cfg, k, min_lambda=None):
    rng = _init_rng(cfg.seed, k)
    for _ in range(MAX_REJECTIONS):
        direction = rng.standard_normal(prob.depth)
        par = points_at_distance(prob, direction[None, :], cfg.par_offset)[0]
        lam = float(normal_quantities_batch(prob, par)["sharpness"][0])
        if min_lambda is None or lam >= min_lambda:
            return par, lam
    raise ConfigError("could not sample a start with sharpness far enough above lambda*; increase --par-offset")


def preset_eta(cfg: ExperimentConfig, lambda0: float, lambda_star: float) -> float:
    """Step size of the regime preset for a start whose parallel part has sharpness ``lambda0``."""
    if cfg.regime == "stable":
        return 0.9 * 2.0 / lambda0
    if cfg.regime == "subcritical":
        return 0.5 * (2.0 / lambda0 + 2.0 / lambda_star)
    if cfg.regime == "critical":
        return 2.0 / lambda_star
    if cfg.regime == "supercritical":
        return (2.0 + cfg.alpha) / lambda_star
    return cfg.eta


def build_runs(cfg: ExperimentConfig) -> list[RunConfig]:
    """One RunConfig per initialisation for a resolved experiment config."""
    prob = FactorisationProblem(cfg.depth, cfg.target)
    lam_star = prob.lambda_star
    runs = []
    for k in range(cfg.inits):
        if cfg.theta0 is not None:
            theta0 = np.asarray(cfg.theta0, dtype=float)
            lam0 = sharpness(prob, project(prob, theta0))
        else:
            min_lam = lam_star * (1.0 + SUBCRITICAL_MIN_EXCESS) if cfg.regime == "subcritical" else None
            par, lam0 = _initial_par(prob, cfg, k, min_lam)
            theta0 = par + cfg.perp0 * normal(prob, par)
        runs.append(RunConfig(prob, preset_eta(cfg, lam0, lam_star), theta0, cfg.steps, cfg.record_every, cfg.seed))
    return runs


def experiment_name(cfg: ExperimentConfig) -> str:
    return cfg.regime if cfg.regime is not None else "custom"


def emit_csv(traj: Trajectory, path) -> None:
    """Write the per-record diagnostics with 17 significant digits and LF line endings."""
    line = "%d" + ",%.17g" * (len(CSV_COLUMNS) - 1) + "\n"
    cols = (traj.t.tolist(), traj.loss.tolist(), traj.sharpness_par.tolist(), traj.dist_par.tolist(),
            traj.theta_perp.tolist(), traj.eta_lambda.tolist())
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        fh.write("".join(line % row for row in zip(*cols)))


def summary_dict(cfg: ExperimentConfig, runs, trajs, reports, csv_names) -> dict:
    """Experiment summary with one list entry per run (None where a run left no records)."""
    per = [analysis.report_to_dict(r) if r is not None else None for r in reports]

    def each(key):
        return [p[key] if p is not None else None for p in per]

    regimes = each("regime")
    first = next((r for r in regimes if r is not None), None)
    return {
        "config": cfg.to_dict(),
        "regime": {
            "tag": first["tag"] if first else None,
            "eta": [rc.eta for rc in runs],
            "margins": [r["margins"] if r else None for r in regimes],
            "tags": [r["tag"] if r else None for r in regimes],
        },
        "tau": each("tau"),
        "rates": each("rates"),
        "cycle_amplitude": each("cycle_amplitude"),
        "suboptimality_gap": each("suboptimality_gap"),
        "checks": each("checks"),
        "divergence_flag": [p["divergence_flag"] if p is not None else bool(t.diverged) for p, t in zip(per, trajs)],
        "diagnostics": each("diagnostics"),
        "trajectories": csv_names,
        "initial_points": [[float(v) for v in rc.theta0] for rc in runs],
    }


def emit_summary(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(analysis.jsonable(summary), indent=2, allow_nan=False))
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Run a (resolved) experiment, write its files and return the summary dict."""
    cfg = cfg.resolved()
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    prob = FactorisationProblem(cfg.depth, cfg.target)
    constants = geometry_constants(prob)
    sample = analysis.geometry_sample(prob, constants)
    runs = build_runs(cfg)
    name = experiment_name(cfg)
    trajs, reports, csv_names = [], [], []
    for k, rc in enumerate(runs):
        traj = run(rc)
        trajs.append(traj)
        reports.append(analysis.summarize(traj, constants, sample) if len(traj) else None)
        fname = f"{name}_init{k}.csv"
        emit_csv(traj, os.path.join(out_dir, fname))
        csv_names.append(fname)
    summary = summary_dict(cfg, runs, trajs, reports, csv_names)
    emit_summary(summary, os.path.join(out_dir, f"{name}_summary.json"))
    if cfg.figures:
        from .plotting import emit_svg

        title = f"{name}: p={cfg.depth}, y={cfg.target:g}"
        emit_svg(trajs, os.path.join(out_dir, f"{name}.svg"), prob.lambda_star, title,
                 loglog=(cfg.regime == "critical"))
    return summary


# ---------------------------------------------------------------------------
# verification tables
# ---------------------------------------------------------------------------

def _print_rows(header, rows, stream=None):
    w = csv.writer(stream or sys.stdout, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


def check_constants(depths, targets, stream=None) -> bool:
    rows, ok_all = [], True
    for p in depths:
        for y in targets:
            prob = FactorisationProblem(p, y)
            gc = geometry_constants(prob)
            closed = c_star_closed_form(prob)
            ratio = gc.additional_ratio
            ok = abs(gc.c_star - closed) <= 1e-10 * abs(closed) and ratio <= 0.5 + 1e-15
            ok_all &= ok
            rows.append([p, y, gc.lambda_star, gc.nu, gc.c_star, closed, ratio, "ok" if ok else "FAIL"])
    _print_rows(["p", "y", "lambda_star", "nu", "c_star", "c_star_closed_form", "nu_over_c_lambda", "status"],
                rows, stream)
    return ok_all


def check_derivatives(depths, targets, points: int = 50, seed: int = 0, stream=None) -> bool:
    rows, ok_all = [], True
    for p in depths:
        for y in targets:
            prob = FactorisationProblem(p, y)
            rng = np.random.default_rng([seed, p])
            worst = np.zeros(4)
            for _ in range(points):
                x = np.exp(rng.uniform(-0.4, 0.4, p))
                th = x * (y / np.prod(x)) ** (1.0 / p)
                n = normal(prob, th)
                u = rng.standard_normal(p)
                g = grad_f(prob, th)
                errs = [
                    np.max(np.abs(finite_diff_oracle(prob, th, 1) - g)) / np.linalg.norm(g),
                    abs(deriv_tensor_contract(prob, th, 2, [u]) - finite_diff_oracle(prob, th, 2, [u]))
                    / (np.linalg.norm(deriv_tensor_contract(prob, th, 2), 2) * (u @ u)),
                    abs(dl3_n(prob, th) - finite_diff_oracle(prob, th, 3, [n], target="loss")) / abs(dl3_n(prob, th)),
                    abs(dl4_n(prob, th) - finite_diff_oracle(prob, th, 4, [n], target="loss")) / abs(dl4_n(prob, th)),
                ]
                worst = np.maximum(worst, errs)
            ok = bool(np.all(worst[:3] < 1e-5) and worst[3] < 1e-4)
            ok_all &= ok
            rows.append([p, y, *map(float, worst), "ok" if ok else "FAIL"])
    _print_rows(["p", "y", "grad_f", "d2f", "dl3_n", "dl4_n", "status"], rows, stream)
    return ok_all


def check_normalform(depths, targets, seed: int = 0, stream=None) -> bool:
    rows, ok_all = [], True
    for p in depths:
        for y in targets:
            prob = FactorisationProblem(p, y)
            direction = np.random.default_rng([seed, p]).standard_normal(p)
            par = points_at_distance(prob, direction[None, :], 0.05 * y ** (1.0 / p))[0]
            eta = prob.eta_critical
            study = residual_scaling(prob, eta, par)
            conj = residual_scaling(prob, eta, prob.theta_star)
            ok = abs(study.perp_slope - 4) <= 0.5 and abs(study.par_slope - 3) <= 0.5 and abs(conj.phi_slope - 4) <= 0.5
            ok_all &= ok
            rows.append([p, y, study.perp_slope, study.par_slope, conj.phi_slope, "ok" if ok else "FAIL"])
    _print_rows(["p", "y", "perp_slope", "par_slope", "phi_slope_at_balanced", "status"], rows, stream)
    return ok_all


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eoslab", description=__doc__.split("\n\n")[0])
    ap.add_argument("--depth", default=None, help="number of factors p (a range a..b for --check)")
    ap.add_argument("--target", type=float, default=None, help="target y > 0")
    ap.add_argument("--regime", choices=REGIMES, default=None)
    ap.add_argument("--eta", type=float, default=None, help="explicit step size (instead of --regime)")
    ap.add_argument("--alpha", type=float, default=None, help="supercritical excess eta*lambda* - 2")
    ap.add_argument("--perp0", type=float, default=None, help="initial orthogonal offset")
    ap.add_argument("--par-offset", type=float, default=None, help="distance of the initial parallel point from theta*")
    ap.add_argument("--inits", type=int, default=None)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--record-every", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--config", default=None, help="JSON experiment config (flags override it)")
    ap.add_argument("--check", choices=("constants", "derivatives", "normalform", "all"), default=None)
    ap.add_argument("--no-figures", action="store_true", help="skip the SVG figure")
    return ap


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = ExperimentConfig.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    else:
        cfg = ExperimentConfig()
    if args.depth is not None:
        depths = parse_depths(args.depth)
        if len(depths) != 1:
            raise ConfigError("experiments take a single depth")
        cfg.depth = depths[0]
    overrides = {
        "target": args.target, "regime": args.regime, "eta": args.eta, "alpha": args.alpha,
        "perp0": args.perp0, "par_offset": args.par_offset, "inits": args.inits, "steps": args.steps,
        "record_every": args.record_every, "seed": args.seed, "out": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.regime is not None and args.eta is None:
        cfg.eta = None
    if args.eta is not None and args.regime is None:
        cfg.regime = None
    if args.no_figures:
        cfg.figures = False
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        if args.check:
            depths = parse_depths(args.depth) if args.depth else None
            targets = [args.target] if args.target is not None else [0.5, 1.0, 2.0]
            ok = True
            if args.check in ("constants", "all"):
                ok &= check_constants(depths or list(range(2, 9)), targets)
            if args.check in ("derivatives", "all"):
                ok &= check_derivatives(depths or [2, 3, 5], targets, seed=args.seed or 0)
            if args.check in ("normalform", "all"):
                ok &= check_normalform(depths or [3, 5], targets, seed=args.seed or 0)
            return 0 if ok else 3
        cfg = _config_from_args(args)
        summary = run_experiment(cfg)
        out = summary["config"]["out"]
        print(f"wrote {len(summary['trajectories'])} trajectories and summary to {out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EoslabError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main_exit() -> None:
    """Console-script wrapper that turns the return code into the process exit status."""
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
