"""Autoregressive models for the correlated residuals of a base forecaster.

Candidates AR(p), p <= max_p, on the raw or once-differenced series, fit by
conditional least squares on a shared conditioning window so their AIC values
are comparable. Selection takes the most parsimonious candidate whose AIC is
within a small margin of the minimum; with the margin at zero this is the
plain AIC argmin. Non-stationary candidates (companion spectral radius >= 1)
are discarded.

The same fitter doubles as a standalone benchmark by running it directly on
the per-instant load series instead of residuals.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientLags, NonStationaryFit, TooShort
from .validation import as_float_array


@dataclass
class ArModel:
    p: int
    d: int
    coef: np.ndarray       # phi_1 .. phi_p
    intercept: float
    sigma2: float
    aic: float
    nobs: int = 0

    def __post_init__(self):
        self.coef = as_float_array(self.coef, "coef", ndim=1)

    def spectral_radius(self):
        if self.p == 0:
            return 0.0
        companion = np.zeros((self.p, self.p))
        companion[0, :] = self.coef
        if self.p > 1:
            companion[np.arange(1, self.p), np.arange(self.p - 1)] = 1.0
        return float(np.abs(np.linalg.eigvals(companion)).max())

    def is_stationary(self):
        return self.spectral_radius() < 1.0

    def forecast(self, recent, horizon):
        """Iterated h-step-ahead forecasts given the most recent observations."""
        recent = as_float_array(recent, "recent", ndim=1)
        if recent.size < self.p + self.d:
            raise InsufficientLags(
                f"need at least {self.p + self.d} recent values for AR({self.p}), d={self.d}")
        if self.d == 0:
            hist = list(recent[len(recent) - self.p:]) if self.p else []
            out = np.empty(horizon)
            for h in range(horizon):
                nxt = self.intercept + sum(c * v for c, v in zip(self.coef, hist[::-1]))
                out[h] = nxt
                if self.p:
                    hist.append(nxt)
                    hist.pop(0)
            return out
        diffs = np.diff(recent)
        inner = ArModel(self.p, 0, self.coef, self.intercept, self.sigma2, self.aic)
        steps = inner.forecast(diffs, horizon) if self.p else np.full(horizon, self.intercept)
        return recent[-1] + np.cumsum(steps)

    def to_dict(self):
        return {"p": int(self.p), "d": int(self.d), "coef": self.coef.tolist(),
                "intercept": float(self.intercept), "sigma2": float(self.sigma2),
                "aic": float(self.aic), "nobs": int(self.nobs)}

    @classmethod
    def from_dict(cls, payload):
        return cls(p=payload["p"], d=payload["d"], coef=np.asarray(payload["coef"], dtype=float),
                   intercept=payload["intercept"], sigma2=payload["sigma2"],
                   aic=payload["aic"], nobs=payload.get("nobs", 0))


def _cls_candidate(x, p, d, offset):
    """Conditional-least-squares AR(p) on the d-times differenced series.

    One-step errors are evaluated on x[offset:] so every candidate scores the
    same targets. Returns None when the candidate is non-stationary.
    """
    w = np.diff(x, n=d) if d else x
    shift = offset - d  # target positions within w
    targets = w[shift:]
    n_eff = targets.size
    cols = [np.ones(n_eff)]
    for lag in range(1, p + 1):
        cols.append(w[shift - lag:w.size - lag])
    X = np.column_stack(cols)
    beta, *_ = np.linalg.lstsq(X, targets, rcond=None)
    resid = targets - X @ beta
    sigma2 = float(np.mean(resid**2))
    aic = n_eff * np.log(max(sigma2, 1e-300)) + 2.0 * (p + 1)
    model = ArModel(p=p, d=d, coef=beta[1:], intercept=float(beta[0]),
                    sigma2=sigma2, aic=float(aic), nobs=n_eff)
    if p and not model.is_stationary():
        return None
    return model


def fit_ar(x, max_p=10, max_d=1, aic_margin=4.0):
    """AIC-selected AR model over p in 0..max_p and d in 0..max_d.

    aic_margin implements the usual parsimony rule: among candidates whose
    AIC is within the margin of the minimum, the one with the fewest
    parameters wins (d breaking ties after p). Set aic_margin=0.0 for the
    strict argmin.
    """
    x = as_float_array(x, "x", ndim=1)
    if x.size < 5 * max_p:
        raise TooShort(f"need at least {5 * max_p} observations, got {x.size}")
    offset = max_p + max_d
    candidates = []
    for d in range(max_d + 1):
        for p in range(max_p + 1):
            model = _cls_candidate(x, p, d, offset)
            if model is not None:
                candidates.append(model)
    if not candidates:
        raise NonStationaryFit("every AR candidate was non-stationary")
    best_aic = min(m.aic for m in candidates)
    admissible = [m for m in candidates if m.aic <= best_aic + aic_margin]
    admissible.sort(key=lambda m: (m.p, m.d))
    return admissible[0]


def correct_forecast(base, model, recent_residuals, horizon=None):
    """Base forecasts plus the h-step AR forecast of the residual process."""
    base = np.atleast_1d(np.asarray(base, dtype=float))
    horizon = base.size if horizon is None else horizon
    if horizon != base.size:
        raise ValueError(f"base has {base.size} steps but horizon is {horizon}")
    if model.p == 0 and model.d == 0 and model.intercept == 0.0:
        return base.copy()
    return base + model.forecast(recent_residuals, horizon)
