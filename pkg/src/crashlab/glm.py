"""Negative binomial (NB2) regression with a log link.

Variance is ``mu + alpha * mu**2``.  The response need not be an integer: the
log-likelihood is written with log-gamma functions, so damage in thousands
of dollars can be modelled directly.

Fitting alternates IRLS sweeps for the coefficients at fixed ``alpha`` with a
one-dimensional Newton step for ``alpha`` (taken on ``log alpha``).  Standard
errors come from the inverse of the observed information of the joint
``(beta, alpha)`` likelihood.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import NotConverged, RankDeficient, SeparationSuspect, ZeroMean
from .inferential import format_p, normal_sf
from .ingest import CrashDataset

SCHEMA_VERSION = 1
ALPHA_FLOOR = 1e-10
Z95 = 1.959963984540054

PREDICTORS = ("dark", "adverse_weather", "cloudy", "wet", "alcohol", "speed")
PREDICTOR_LABELS = {
    "dark": "Dark Lighting",
    "adverse_weather": "Adverse Weather",
    "speed": "Speed (per mph)",
    "alcohol": "Alcohol/Drugs",
    "cloudy": "Cloudy Weather",
    "wet": "Wet Roads",
}


def overdispersion_ratio(response) -> float:
    """Sample variance (n-1) over the mean."""
    y = np.asarray(response, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two values")
    mean = y.mean()
    if mean <= 0:
        raise ZeroMean("mean must be positive")
    return float(y.var(ddof=1) / mean)


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be 2-D with one row per response")
        if len(set(self.columns)) != len(self.columns) or len(self.columns) != X.shape[1]:
            raise ValueError("column names must be unique and match X")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise ValueError("design has missing or non-finite cells")
        if np.any(y < 0):
            raise ValueError("response must be non-negative")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)


def build_design(ds: CrashDataset, predictors: Sequence[str] = PREDICTORS) -> DesignMatrix:
    """Damage design: intercept plus indicators vs Daylight/Clear/Dry/sober, and speed.

    Expects imputed damage.  Missing speeds take the global median.
    """
    recs = ds.records
    if any(r.damage_usd is None for r in recs):
        raise ValueError("impute damage_usd before building the design")
    speeds = [r.speed_max for r in recs if r.speed_max is not None]
    speed_fill = float(np.median(speeds)) if speeds else 0.0
    cols = {
        "dark": [r.light.value == "Dark" for r in recs],
        "adverse_weather": [r.weather.value in ("Rain", "Fog", "Other") for r in recs],
        "cloudy": [r.weather.value == "Cloudy" for r in recs],
        "wet": [r.road_surface.value == "Wet" for r in recs],
        "alcohol": [r.alcohol_drugs for r in recs],
        "speed": [r.speed_max if r.speed_max is not None else speed_fill for r in recs],
    }
    X = np.column_stack([np.ones(len(recs))] + [np.asarray(cols[p], dtype=float) for p in predictors])
    y = np.array([r.damage_usd for r in recs]) / 1000.0
    return DesignMatrix(X, y, ("intercept",) + tuple(predictors))


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

def nb_loglike(beta, alpha: float, X, y) -> float:
    mu = np.exp(X @ beta)
    r = 1.0 / alpha
    return float(np.sum(
        gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
        + r * np.log(r / (r + mu)) + y * np.log(mu / (r + mu))
    ))


def nb_score(beta, alpha: float, X, y) -> np.ndarray:
    """Gradient of :func:`nb_loglike` with respect to ``(beta, alpha)``."""
    mu = np.exp(X @ beta)
    r = 1.0 / alpha
    g_beta = X.T @ ((y - mu) / (1.0 + alpha * mu))
    d_r = np.sum(digamma(y + r) - digamma(r) + np.log(r) + 1.0 - np.log(r + mu) - (r + y) / (r + mu))
    return np.append(g_beta, -d_r / alpha ** 2)


def nb_hessian(beta, alpha: float, X, y) -> np.ndarray:
    """Observed Hessian of the log-likelihood in ``(beta, alpha)``."""
    mu = np.exp(X @ beta)
    r = 1.0 / alpha
    p = X.shape[1]
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = -(X * (r * mu * (r + y) / (r + mu) ** 2)[:, None]).T @ X
    d_r = np.sum(digamma(y + r) - digamma(r) + np.log(r) + 1.0 - np.log(r + mu) - (r + y) / (r + mu))
    d_rr = np.sum(polygamma(1, y + r) - polygamma(1, r) + 1.0 / r - 2.0 / (r + mu) + (r + y) / (r + mu) ** 2)
    d_beta_r = X.T @ (mu * (y - mu) / (r + mu) ** 2)
    H[:p, p] = H[p, :p] = -d_beta_r / alpha ** 2
    H[p, p] = d_rr / alpha ** 4 + 2.0 * d_r / alpha ** 3
    return H


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    columns: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    alpha: float
    alpha_se: float
    loglike: float
    converged: bool
    iterations: int
    n: int
    trace: tuple[tuple[int, float, float], ...] = ()

    @property
    def irr(self) -> np.ndarray:
        return np.exp(self.coef)

    @property
    def ci(self) -> np.ndarray:
        return np.column_stack([np.exp(self.coef - Z95 * self.se), np.exp(self.coef + Z95 * self.se)])

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p_values(self) -> np.ndarray:
        return np.array([min(1.0, 2.0 * normal_sf(abs(z))) for z in self.z])

    def param(self, name: str) -> float:
        return float(self.coef[self.columns.index(name)])

    def to_json_obj(self) -> dict:
        ci = self.ci
        return {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "alpha": self.alpha,
            "alpha_se": self.alpha_se,
            "loglike": self.loglike,
            "converged": self.converged,
            "iterations": self.iterations,
            "coefficients": [
                {
                    "name": name,
                    "beta": float(self.coef[i]),
                    "se": float(self.se[i]),
                    "irr": float(self.irr[i]),
                    "ci95": [float(ci[i, 0]), float(ci[i, 1])],
                    "p_value": float(self.p_values[i]),
                }
                for i, name in enumerate(self.columns)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2)


def _collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str]:
    bad = []
    kept: list[int] = []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) < len(trial):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def _irls_beta(beta, alpha, X, y, tol, max_iter=100):
    ll = nb_loglike(beta, alpha, X, y)
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        w = mu / (1.0 + alpha * mu)
        z = eta + (y - mu) / mu
        XtW = X.T * w
        target = np.linalg.solve(XtW @ X, XtW @ z)
        step = target - beta
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c = nb_loglike(cand, alpha, X, y)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        delta = np.max(np.abs(cand - beta))
        beta, ll = cand, ll_c
        if delta < tol:
            break
    return beta, ll


def _newton_alpha(beta, alpha, X, y, ll):
    """One safeguarded Newton step for ``alpha`` on the log scale."""
    g_alpha = nb_score(beta, alpha, X, y)[-1]
    h_alpha = nb_hessian(beta, alpha, X, y)[-1, -1]
    g = alpha * g_alpha
    h = alpha * alpha * h_alpha + alpha * g_alpha
    step = -g / h if h < 0 else np.sign(g) * 1.0
    step = float(np.clip(step, -5.0, 5.0))
    t = 1.0
    while True:
        cand = max(ALPHA_FLOOR, alpha * math.exp(t * step))
        ll_c = nb_loglike(beta, cand, X, y)
        if ll_c >= ll or t < 1e-8:
            break
        t *= 0.5
    if ll_c < ll:
        return alpha, ll
    return cand, ll_c


def fit_negative_binomial(
    design: DesignMatrix, *, tol: float = 1e-8, max_iter: int = 200, alpha0: float = 1.0
) -> FitResult:
    X, y = design.X, design.y
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more rows ({n}) than columns ({p})")
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficient(_collinear_columns(X, design.columns))
    if y.mean() <= 0:
        raise ZeroMean("response mean must be positive")

    beta = np.linalg.lstsq(X, np.log(y + 1.0), rcond=None)[0]
    alpha = alpha0
    ll = nb_loglike(beta, alpha, X, y)
    trace = [(0, ll, alpha)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_beta, ll = _irls_beta(beta, alpha, X, y, tol)
        new_alpha, ll = _newton_alpha(new_beta, alpha, X, y, ll)
        d_beta = float(np.max(np.abs(new_beta - beta)))
        d_alpha = abs(new_alpha - alpha)
        beta, alpha = new_beta, new_alpha
        trace.append((it, ll, alpha))
        if d_beta < tol and d_alpha < tol:
            converged = True
            break
    if not converged:
        raise NotConverged(f"no convergence in {max_iter} outer iterations", trace)
    if np.any(np.abs(beta) > 20):
        raise SeparationSuspect(
            "coefficient magnitude above 20: "
            + ", ".join(c for c, b in zip(design.columns, beta) if abs(b) > 20)
        )

    H = nb_hessian(beta, alpha, X, y)
    if alpha <= 10 * ALPHA_FLOOR:
        # boundary: alpha is not identified, use the beta block only
        cov = np.linalg.inv(-H[:p, :p])
        se = np.sqrt(np.diag(cov))
        alpha_se = float("nan")
    else:
        cov = np.linalg.inv(-H)
        se = np.sqrt(np.diag(cov)[:p])
        alpha_se = float(math.sqrt(cov[p, p])) if cov[p, p] > 0 else float("nan")
    return FitResult(design.columns, beta, se, float(alpha), alpha_se, float(ll),
                     converged, it, n, tuple(trace))


# --------------------------------------------------------------------------
# presentation
# --------------------------------------------------------------------------

def format_risk(irr: float) -> str:
    """Percent change in the expected response, e.g. ``-44%`` or ``+0.5%``."""
    pct = (irr - 1.0) * 100.0
    if abs(pct) < 1.0:
        pct = round(pct, 1)
        text = f"{abs(pct):.1f}".rstrip("0").rstrip(".")
    else:
        pct = round(pct)
        text = f"{abs(pct):.0f}"
    if pct == 0:
        return "0%"
    return f"{'+' if pct > 0 else '-'}{text}%"


def _fmt_irr(v: float) -> str:
    return f"{v:.3f}" if abs(v - 1.0) < 0.01 else f"{v:.2f}"


@dataclass(frozen=True)
class IrrRow:
    predictor: str
    irr: float
    ci_low: float
    ci_high: float
    p_value: float
    risk: str


def irr_table(fit: FitResult, labels: dict[str, str] | None = None) -> list[IrrRow]:
    """Non-intercept IRRs with 95% CIs, two-sided Wald p and percent risk, ranked by p."""
    if not fit.converged:
        raise NotConverged("fit did not converge")
    labels = labels or PREDICTOR_LABELS
    ci = fit.ci
    rows = []
    for i, name in enumerate(fit.columns):
        if name == "intercept":
            continue
        irr = float(fit.irr[i])
        rows.append(IrrRow(labels.get(name, name), irr, float(ci[i, 0]), float(ci[i, 1]),
                           float(fit.p_values[i]), format_risk(irr)))
    rows.sort(key=lambda r: r.p_value)
    return rows


def irr_markdown(rows: Sequence[IrrRow], n: int | None = None) -> str:
    out = ["| Predictor | IRR | 95% CI | p-value | Risk |", "|---|---|---|---|---|"]
    for r in rows:
        out.append(
            f"| {r.predictor} | {_fmt_irr(r.irr)} | [{_fmt_irr(r.ci_low)}, {_fmt_irr(r.ci_high)}] "
            f"| {format_p(r.p_value)} | {r.risk} |"
        )
    if n is not None:
        out.append("")
        out.append(f"IRR = Incidence Rate Ratio; CI = Confidence Interval; n = {n}")
    return "\n".join(out) + "\n"
