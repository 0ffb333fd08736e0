"""Fine-tuning of full coefficient vectors and cross-series delta transfer.

finetune() is the literal algorithm: K full-batch gradient steps on the
squared-error loss over the accumulated target rows, step size alpha*/5
derived from the extreme eigenvalues of the design Gram matrix, optionally
with frozen coordinates.

The model-level pipeline (finetune_model, delta transfer) runs the same
gradient descent in per-column standardized coordinates (columns divided by
their training standard deviation, coefficients mapped accordingly). That
preconditions the descent so all blocks move at comparable rates, and it
makes a transferred delta scale correctly between series whose levels differ
by a ratio rho: the adjusted coefficients are invariant to rescaling the
source series and dividing rho by the same constant.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    UnmappedRequiredTerm,
    ZeroDenominator,
    ZeroGram,
)
from .validation import as_float_array


@dataclass
class FinetuneConfig:
    """K gradient iterations with step alpha (None: alpha*/5 from the design)."""

    K: int = 75
    alpha: float = None
    frozen_coordinates: tuple = ()
    # recompute alpha when the target window has grown by this fraction
    alpha_refresh_growth: float = 0.10

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")


def compute_step_size(design):
    """alpha = alpha*/5 with alpha* = 2 / (lmax + lmin) of design' design."""
    X = as_float_array(design, "design", ndim=2)
    if X.size == 0:
        raise ZeroGram("empty design")
    gram = X.T @ X
    eigvals = np.linalg.eigvalsh(gram)
    lmin, lmax = float(eigvals[0]), float(eigvals[-1])
    if lmax <= 0.0:
        raise ZeroGram("design Gram matrix is zero")
    return (2.0 / (lmax + lmin)) / 5.0


def loss_and_gradient(beta, X, y):
    """Squared-error loss sum (y - X beta)^2 and its gradient."""
    resid = X @ beta - y
    return float(resid @ resid), 2.0 * (X.T @ resid)


def finetune(beta_source, X, y, config):
    """K full-batch gradient steps from beta_source; frozen coordinates pinned.

    With no rows the gradient is zero and beta_source is returned unchanged.
    """
    beta = as_float_array(beta_source, "beta_source", ndim=1).copy()
    X = as_float_array(X, "X", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    if X.shape[1] != beta.size:
        raise DimensionMismatch(f"design has {X.shape[1]} columns, beta has {beta.size}")
    if X.shape[0] != y.size:
        raise DimensionMismatch(f"design has {X.shape[0]} rows, y has {y.size}")
    if config.K == 0 or X.shape[0] == 0:
        return beta
    alpha = config.alpha if config.alpha is not None else compute_step_size(X)
    frozen = np.asarray(config.frozen_coordinates, dtype=int)
    for _ in range(config.K):
        _, grad = loss_and_gradient(beta, X, y)
        if frozen.size:
            grad[frozen] = 0.0
        beta -= alpha * grad
    return beta


def estimate_rho(y_target, y_source):
    """Scale between two aligned series: sum(y_target) / sum(y_source)."""
    y_target = as_float_array(y_target, "y_target", ndim=1)
    y_source = as_float_array(y_source, "y_source", ndim=1)
    if y_target.size != y_source.size:
        raise DimensionMismatch("rho estimation needs aligned windows of equal length")
    denom = float(np.sum(y_source))
    if denom <= 0.0:
        raise ZeroDenominator("source series sums to a non-positive value")
    return float(np.sum(y_target)) / denom


# --------------------------------------------------------------------------
# model-level pipeline
# --------------------------------------------------------------------------

def _standardized(model, rows):
    X = model.design_matrix(rows)
    return X / model.column_scales_


def finetune_model(model, rows, y, config, beta_start=None):
    """Gradient fine-tuning of a fitted model on new rows.

    Runs in standardized design coordinates and returns the adjusted
    coefficient vector in the model's raw coordinate system. beta_start
    defaults to the model's fitted coefficients.
    """
    scales = model.column_scales_
    beta0 = model.coef_ if beta_start is None else np.asarray(beta_start, dtype=float)
    Xs = _standardized(model, rows)
    y = as_float_array(y, "y", ndim=1)
    beta_std = finetune(beta0 * scales, Xs, y, config)
    return beta_std / scales


def predict_with(model, beta, rows):
    return model.design_matrix(rows) @ np.asarray(beta, dtype=float)


@dataclass
class TransferLink:
    """Coordinate correspondence between a source and a target model.

    Pairs are (source index, target index) in the models' raw coefficient
    vectors; unmapped target coordinates receive no delta. scale_ratio[j] =
    source column scale / target column scale for pair j, so deltas learned in
    the source's standardized space land correctly in the target's.
    """

    rho: float
    pairs: list
    scale_ratio: np.ndarray
    excluded_terms: tuple = ()
    delta: np.ndarray = None

    @classmethod
    def between(cls, source_model, target_model, rho, exclude=()):
        """Match coefficients of shared term names (basis index by basis index).

        Terms named in `exclude` and terms present in only one model are left
        unmapped. A shared name whose blocks disagree in width has no
        coordinate-by-coordinate meaning and raises UnmappedRequiredTerm.
        """
        src = {t.name: sl for t, sl in zip(source_model.terms_, source_model.slices_)}
        tgt = {t.name: sl for t, sl in zip(target_model.terms_, target_model.slices_)}
        pairs = []
        for name, s_sl in src.items():
            if name in exclude or name not in tgt:
                continue
            t_sl = tgt[name]
            ns = s_sl.stop - s_sl.start
            nt = t_sl.stop - t_sl.start
            if ns != nt:
                raise UnmappedRequiredTerm(
                    f"term {name!r} has {ns} source and {nt} target coefficients; "
                    "exclude it or align the specs")
            pairs.extend(zip(range(s_sl.start, s_sl.stop), range(t_sl.start, t_sl.stop)))
        ratio = np.array([
            source_model.column_scales_[i] / target_model.column_scales_[j]
            for i, j in pairs
        ])
        return cls(rho=float(rho), pairs=pairs, scale_ratio=ratio, excluded_terms=tuple(exclude))

    def apply(self, beta_target, delta_source):
        """beta_target + rho * (mapped, scale-adjusted) delta_source."""
        out = np.asarray(beta_target, dtype=float).copy()
        for (i, j), ratio in zip(self.pairs, self.scale_ratio):
            out[j] += self.rho * delta_source[i] * ratio
        return out

    def to_dict(self):
        return {
            "rho": self.rho,
            "pairs": [list(p) for p in self.pairs],
            "scale_ratio": self.scale_ratio.tolist(),
            "excluded_terms": list(self.excluded_terms),
            "delta": None if self.delta is None else self.delta.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(rho=d["rho"], pairs=[tuple(p) for p in d["pairs"]],
                   scale_ratio=np.asarray(d["scale_ratio"], dtype=float),
                   excluded_terms=tuple(d["excluded_terms"]),
                   delta=None if d.get("delta") is None else np.asarray(d["delta"], dtype=float))


def delta_coefficients(source_model, source_rows, source_y, config):
    """Fine-tuned coefficient shift of the source model on its own new rows."""
    beta_new = finetune_model(source_model, source_rows, source_y, config)
    return beta_new - source_model.coef_


def gam_delta_coefficients(target_model, source_model, source_rows, source_y, link, config):
    """Target coefficients shifted by the source's fine-tuned delta."""
    delta = delta_coefficients(source_model, source_rows, source_y, config)
    link.delta = delta
    return link.apply(target_model.coef_, delta)


def gam_delta_forecast(target_model, source_model, source_rows, source_y, link, rows, config):
    """Forecast target rows with coefficients beta_target + rho * delta."""
    beta = gam_delta_coefficients(target_model, source_model, source_rows, source_y, link, config)
    return predict_with(target_model, beta, rows)


def gam_delta_finetuned(target_model, source_model, source_rows, source_y, link,
                        target_rows, target_y, rows, config):
    """Delta transfer followed by fine-tuning on the target's own new rows."""
    beta = gam_delta_coefficients(target_model, source_model, source_rows, source_y, link, config)
    if len(target_y) > 0:
        beta = finetune_model(target_model, target_rows, target_y, config, beta_start=beta)
    return predict_with(target_model, beta, rows)
