import datetime as dt
import hashlib
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import scipy

from core import export
from core.config import Config
from lab import bemetrics, chain, mest, spectral, theory
from lab.bemetrics import BECurve
from lab.errors import LabError

log = logging.getLogger("Pipeline")

COMMANDS = ("simulate", "drift", "theory", "spectral", "be-curve", "rate-fit", "audit")
LAMBDA0_TOL = 1e-8


@dataclass
class RunResult:
    command: str
    passed: bool
    artifacts: list[str] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)


def curve_verdict(
    curve: BECurve,
    *,
    slope_lo: float,
    slope_hi: float,
    log_band: float,
    stability_max: float,
    floor_level: float = bemetrics.FLOOR_LEVEL,
) -> dict:
    """Band check of one fitted curve against the Monte Carlo floor of its R.

    Only points whose D_n clears the floor_level Kolmogorov quantile carry rate information.
    With three or more of them the bands apply to the fit on those points (status "fit");
    log-corrected curves are judged by |slope| <= log_band. A curve that sinks into the floor
    by its largest n passes as status "floor". Anything else is "unresolved" and fails.
    """
    resolved = bemetrics.resolved_points(curve, floor_level)
    largest_resolved = bool(curve.points) and bool(resolved) and resolved[-1][0] == curve.points[-1][0]
    slope_resolved = math.nan
    ratio = curve.stability_ratio()
    if len(resolved) >= 3:
        status = "fit"
        sub = BECurve(resolved, curve.theta_scope, curve.estimator, curve.R, correction=curve.correction)
        try:
            slope_resolved, _ = bemetrics.rate_fit(sub)
        except LabError as e:
            log.warning("%s/%s: no fit on resolved points (%s)", curve.theta_scope, curve.estimator, e)
        ratio = sub.stability_ratio()
        if math.isnan(slope_resolved):
            passed = False
        elif curve.correction == "log":
            passed = abs(slope_resolved) <= log_band
        else:
            passed = slope_lo <= slope_resolved <= slope_hi and ratio <= stability_max
    elif curve.points and not largest_resolved:
        status, passed = "floor", True
    else:
        status, passed = "unresolved", False
    return {
        "scope": curve.theta_scope,
        "estimator": curve.estimator,
        "correction": curve.correction,
        "slope": curve.slope,
        "intercept": curve.intercept,
        "stability": ratio,
        "resolved": len(resolved),
        "slope_resolved": slope_resolved,
        "status": status,
        "pass": passed,
    }


def _versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


class Pipeline:
    """Runs one command end-to-end and records a manifest next to its artifacts."""

    def __init__(self, cfg: Config, *, threads: int | None = None, on_status: Callable[[str], None] | None = None):
        self.config = cfg
        self.threads = threads or os.cpu_count() or 1
        self.on_status = on_status
        self.out_dir = cfg.output_dir
        self._handlers = {
            "simulate": self._simulate,
            "drift": self._drift,
            "theory": self._theory,
            "spectral": self._spectral,
            "be-curve": self._be_curve,
            "rate-fit": self._rate_fit,
            "audit": self._audit,
        }

    def _signal_status(self, result: RunResult, message: str) -> None:
        msg = (message or "").strip()
        if not msg:
            return
        result.lines.append(msg)
        if self.on_status is not None:
            self.on_status(msg)

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def run(self, command: str) -> RunResult:
        handler = self._handlers.get(command)
        if handler is None:
            raise LabError(f"Unsupported command: {command!r} (expected one of {', '.join(COMMANDS)})")
        os.makedirs(self.out_dir, exist_ok=True)
        self.config.log_config()
        result = RunResult(command, True)
        handler(result)
        result.artifacts.append(self._write_manifest(result))
        log.info("%s finished: %s", command, "pass" if result.passed else "FAIL")
        return result

    # -----------------------------------------------------------------------
    # Commands
    # -----------------------------------------------------------------------
    def _simulate(self, result: RunResult) -> None:
        cfg = self.config
        theta = cfg.theta
        seed = chain.derive_stream_seed(cfg.master_seed, 0)
        traj = chain.simulate(theta, cfg.n, seed)
        result.artifacts.append(export.write_trajectory(traj, self._path("trajectory.csv")))

        rows = []
        rho = mest.rho_hat(traj)
        rows.append({**self._estimate_row(theta, traj, rho, "rho", mest.rho_m_prime(traj, rho)), "seed": seed})
        if "b" in cfg.estimators:
            fit = mest.b_hat(traj, rho, mest.tau_hat_sq(traj), cfg.b_domain,
                             grid_points=cfg.grid_points, tol=cfg.golden_tol)
            rows.append(fit.to_row(theta.theta_id, traj.n, seed, "b"))
        result.artifacts.append(export.write_estimations(rows, self._path("estimates.csv")))
        for row in rows:
            self._signal_status(result, f"{row['estimator']}_hat = {row['alpha_hat']:.10g}  ({theta.theta_id}, n={traj.n})")

    @staticmethod
    def _estimate_row(theta, traj, alpha, estimator, m_prime_value) -> dict:
        crit = mest.least_squares_criterion((-math.inf, math.inf))
        return {
            "theta_id": theta.theta_id,
            "n": traj.n,
            "estimator": estimator,
            "alpha_hat": alpha,
            "criterion_value": mest.criterion_value(crit, traj, alpha),
            "m_prime_at_hat": m_prime_value,
        }

    def _drift(self, result: RunResult) -> None:
        cfg = self.config
        report = chain.check_drift(cfg.box, cfg.drift_p, cfg.s_grid, tol=cfg.quad_tol)
        result.artifacts.append(export.write_json(report.to_dict(), self._path("drift.json")))
        result.passed = report.passed
        self._signal_status(
            result,
            f"drift: iota={report.iota:.6g} varrho={report.varrho:.6g} s={report.s} -> "
            f"{'pass' if report.passed else 'FAIL'}",
        )

    def _theory(self, result: RunResult) -> None:
        cfg = self.config
        payload = {}
        thetas = {t.theta_id: t for t in (*cfg.box.grid, cfg.theta)}
        for theta_id, theta in thetas.items():
            try:
                payload[theta_id] = theory.theory_report(theta).to_dict()
            except LabError as e:
                payload[theta_id] = {"error": str(e)}
                result.passed = False
                self._signal_status(result, f"{theta_id}: {e}")
        result.artifacts.append(export.write_json(payload, self._path("theory.json")))
        self._signal_status(result, f"theory: {len(payload)} parameter points")

    def _spectral(self, result: RunResult) -> None:
        cfg = self.config
        theta = cfg.theta
        xi = spectral.FUNCTIONALS[cfg.spectral_functional](theta)
        grid = spectral.GridSpec.for_theta(theta, cfg.spectral_N, cfg.spectral_L)
        report = spectral.spectral_report(
            theta, xi, grid, cfg.spectral_t_step, tol=cfg.power_tol, max_iter=cfg.power_max_iter
        )
        payload = {"theta_id": theta.theta_id, "functional": cfg.spectral_functional, **report.to_dict()}
        if cfg.spectral_functional == "Fprime":
            payload["sigma1_sq_theory"] = theory.sigma1_sq(theta)
        result.artifacts.append(export.write_json(payload, self._path("spectral.json")))
        result.passed = abs(report.lambda0 - 1.0) <= LAMBDA0_TOL and report.converged and report.sigma_sq >= 0.0
        self._signal_status(
            result,
            f"spectral: lambda(0)={report.lambda0.real:.12g} |lambda'(0)|={abs(report.lambda_prime0):.2e} "
            f"sigma^2={report.sigma_sq:.6g} converged={report.converged}",
        )

    def _bands(self) -> dict:
        cfg = self.config
        return {
            "slope_lo": cfg.slope_lo,
            "slope_hi": cfg.slope_hi,
            "log_band": cfg.log_band,
            "stability_max": cfg.stability_max,
            "floor_level": cfg.floor_level,
        }

    def _report_curves(self, result: RunResult, curves: list[BECurve]) -> list[dict]:
        verdicts = [curve_verdict(c, **self._bands()) for c in curves]
        for v in verdicts:
            self._signal_status(
                result,
                f"{v['scope']:<24} {v['estimator']:<16} slope={v['slope']:+.4f} "
                f"stability={v['stability']:.3f} resolved={v['resolved']} status={v['status']} "
                f"-> {'pass' if v['pass'] else 'FAIL'}",
            )
        result.passed = result.passed and all(v["pass"] for v in verdicts)
        return verdicts

    def _be_curve(self, result: RunResult) -> None:
        cfg = self.config
        samples = []
        curves = []
        for estimator in cfg.estimators:
            target = cfg.box if estimator == "rho" or cfg.b_target == "box" else cfg.theta
            curves += bemetrics.be_curve(
                target, cfg.n_ladder, cfg.R, cfg.master_seed, estimator,
                threads=self.threads, b_domain=cfg.b_domain, on_sample=samples.append,
            )
        for functional in cfg.functionals:
            curves += bemetrics.be_curve(
                cfg.theta, cfg.n_ladder, cfg.R, cfg.master_seed, functional,
                threads=self.threads, on_sample=samples.append,
            )
        result.artifacts.append(export.write_curves(curves, self._path("be_curve.csv")))
        if cfg.write_samples:
            result.artifacts.append(export.write_samples(samples, self._path("samples.csv")))
        hits = {e: sum(s.bound_hits for s in samples if s.kind == e) for e in cfg.estimators}
        result.details["bound_hits"] = hits
        for estimator, count in hits.items():
            if count:
                self._signal_status(result, f"{estimator}: {count} replications stopped at a bound of {cfg.b_domain}")
        self._report_curves(result, curves)

    def _rate_fit(self, result: RunResult) -> None:
        cfg = self.config
        curves = []
        for curve in export.read_curves(cfg.rate_fit_input):
            slope, intercept = bemetrics.rate_fit(curve)
            curves.append(BECurve(curve.points, curve.theta_scope, curve.estimator, curve.R,
                                  slope, intercept, curve.correction))
        verdicts = self._report_curves(result, curves)
        result.artifacts.append(export.write_json({"input": cfg.rate_fit_input, "curves": verdicts},
                                                  self._path("rate_fit.json")))

    def _audit(self, result: RunResult) -> None:
        cfg = self.config
        audit = bemetrics.audit_conditions(
            cfg.theta, cfg.audit_n, cfg.audit_R, cfg.master_seed, cfg.audit_estimator,
            cfg.audit_r_n, cfg.audit_d, b_domain=cfg.b_domain, threads=self.threads,
        )
        payload = {
            **audit.to_dict(),
            "v3_max": cfg.audit_v3_max,
            "v6_max": cfg.audit_v6_max,
            "pass": audit.v3_freq <= cfg.audit_v3_max and audit.v6_freq <= cfg.audit_v6_max,
        }
        result.artifacts.append(export.write_json(payload, self._path("audit.json")))
        result.passed = payload["pass"]
        self._signal_status(
            result,
            f"audit {audit.estimator} n={audit.n}: v3_freq={audit.v3_freq:.4f} (r_n={audit.r_n_used:.3g}) "
            f"v6_freq={audit.v6_freq:.4f} (d={audit.d_used:g}) -> {'pass' if payload['pass'] else 'FAIL'}",
        )

    # -----------------------------------------------------------------------
    # Manifest
    # -----------------------------------------------------------------------
    def _config_hash(self) -> str:
        cfg = self.config
        if cfg.config_path and os.path.exists(cfg.config_path):
            with open(cfg.config_path, "rb") as f:
                return hashlib.sha256(f.read()).hexdigest()
        blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def _write_manifest(self, result: RunResult) -> str:
        manifest = {
            "command": result.command,
            "config_path": self.config.config_path,
            "config_sha256": self._config_hash(),
            "master_seed": self.config.master_seed,
            "threads": self.threads,
            "versions": _versions(),
            "artifacts": [os.path.basename(a) for a in result.artifacts],
            "passed": result.passed,
            **result.details,
            "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        }
        return export.write_json(manifest, self._path("manifest.json"))
