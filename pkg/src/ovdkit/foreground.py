"""Exponentiated-Weibull foreground estimation on reconstruction errors.

The density with shape parameters ``a`` and ``c`` (unit scale) is::

    D(eta | a, c) = a c [1 - exp(-eta^c)]^(a-1) exp(-eta^c) eta^(c-1)

One density is fitted to foreground errors and one to background errors;
the foreground likelihood of a region is the normalized ratio of the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

MIN_SAMPLES = 30


@dataclass(frozen=True)
class WeibullParams:
    a: float
    c: float

    def __post_init__(self):
        for name in ("a", "c"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"shape parameter {name} must be finite and > 0, got {value}")

    def to_dict(self) -> dict:
        return {"a": self.a, "c": self.c}


class FitError(RuntimeError):
    """Raised when the likelihood maximization does not converge."""

    def __init__(self, message: str, best: WeibullParams):
        super().__init__(message)
        self.best = best


def _check_support(eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(~(eta > 0.0)):
        raise ValueError("support violation: reconstruction errors must be > 0")
    return eta


def _logpdf(eta: np.ndarray, a: float, c: float) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore"):
        ec = eta**c
        return math.log(a * c) + (a - 1.0) * np.log(-np.expm1(-ec)) - ec + (c - 1.0) * np.log(eta)


def logpdf(eta, p: WeibullParams):
    out = _logpdf(_check_support(eta), p.a, p.c)
    return float(out) if out.ndim == 0 else out


def pdf(eta, p: WeibullParams):
    out = np.exp(_logpdf(_check_support(eta), p.a, p.c))
    return float(out) if out.ndim == 0 else out


def cdf(eta, p: WeibullParams):
    eta = np.asarray(eta, dtype=float)
    out = (-np.expm1(-np.clip(eta, 0.0, None) ** p.c)) ** p.a
    return float(out) if out.ndim == 0 else out


def sample(p: WeibullParams, size: int, seed=None) -> np.ndarray:
    """Inverse-CDF draws from the exponentiated Weibull law."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.uniform(size=size)
    return (-np.log1p(-(u ** (1.0 / p.a)))) ** (1.0 / p.c)


def log_likelihood(samples, p: WeibullParams) -> float:
    return float(np.sum(_logpdf(_check_support(samples), p.a, p.c)))


def fit(samples, max_iter: int = 500, tol: float = 1e-9) -> WeibullParams:
    """Maximum-likelihood shape parameters.

    Nelder-Mead on the negative log-likelihood over ``(log a, log c)``,
    started at ``a = c = 1``.  Stops once the simplex's log-likelihood
    spread falls below ``tol``; raises :class:`FitError` carrying the best
    point found if that does not happen within ``max_iter`` iterations.
    """
    x = _check_support(np.ravel(samples))
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    log_x = np.log(x)

    def nll(theta):
        a, c = np.exp(theta)
        xc = np.exp(c * log_x)
        val = -(x.size * math.log(a * c) + np.sum((a - 1.0) * np.log(-np.expm1(-xc)) - xc + (c - 1.0) * log_x))
        return val if np.isfinite(val) else np.inf

    res = minimize(
        nll,
        x0=np.zeros(2),
        method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": 1e-8, "fatol": tol},
    )
    a, c = np.exp(res.x)
    best = WeibullParams(float(a), float(c))
    if not res.success:
        raise FitError(f"Weibull fit did not converge: {res.message}", best)
    return best


@dataclass(frozen=True)
class ForegroundEstimator:
    fg: WeibullParams
    bg: WeibullParams
    gamma: float = 0.5

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def fit(cls, fg_errors, bg_errors, gamma: float = 0.5) -> "ForegroundEstimator":
        return cls(fit(fg_errors), fit(bg_errors), gamma)

    def likelihood(self, eta):
        return foreground_likelihood(eta, self)

    def score(self, eta):
        """Foreground likelihood after ``gamma`` scaling."""
        return scale_scores(foreground_likelihood(eta, self), self.gamma)

    def to_dict(self) -> dict:
        return {"fg": self.fg.to_dict(), "bg": self.bg.to_dict(), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d) -> "ForegroundEstimator":
        return cls(
            WeibullParams(float(d["fg"]["a"]), float(d["fg"]["c"])),
            WeibullParams(float(d["bg"]["a"]), float(d["bg"]["c"])),
            float(d.get("gamma", 0.5)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ForegroundEstimator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def foreground_likelihood(eta, fe: ForegroundEstimator):
    """``D_fg / (D_fg + D_bg)`` evaluated stably in log space.

    Where both densities underflow to zero the result is 0.5.
    """
    eta = _check_support(eta)
    lf = _logpdf(eta, fe.fg.a, fe.fg.c)
    lb = _logpdf(eta, fe.bg.a, fe.bg.c)
    with np.errstate(invalid="ignore"):
        out = 1.0 / (1.0 + np.exp(lb - lf))
    both_zero = np.isneginf(lf) & np.isneginf(lb)
    out = np.where(both_zero, 0.5, out)
    return float(out) if out.ndim == 0 else out


def scale_scores(w, gamma: float):
    """Elementwise ``w ** gamma``; ``gamma = 0`` maps every score to 1."""
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    arr = np.asarray(w, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)):
        raise ValueError("scores must lie in [0, 1]")
    out = np.ones_like(arr) if gamma == 0.0 else arr**gamma
    return float(out) if out.ndim == 0 else out
