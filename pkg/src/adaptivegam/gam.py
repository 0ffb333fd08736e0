"""Penalized spline additive model, one fit per instant of day.

The model is a sum of parametric blocks (categorical intercepts, per-category
and plain slopes) and centered spline smooths, estimated by penalized least
squares with a curvature penalty per smooth. Fitted models expose, besides
predictions, the frozen normalized effect vector (1, f_1, ..., f_d) that the
online adaptation layer estimates multiplicative corrections over.
"""

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import (
    DegenerateEffect,
    DimensionMismatch,
    MissingColumn,
    NoUsableRows,
    RankDeficientDesign,
)
from .splines import SplineBasis, build_basis, tensor_penalty
from .timetable import TimeTable

FORMAT_VERSION = 1
DEGENERATE_SD = 1e-10


# --------------------------------------------------------------------------
# term descriptors (what to fit)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InterceptTerm:
    name: str = "intercept"


@dataclass(frozen=True)
class CategoricalTerm:
    name: str
    column: str
    levels: tuple = None  # None: infer from training data


@dataclass(frozen=True)
class InteractionTerm:
    """Full cross of two categorical columns, one indicator per observed pair."""
    name: str
    columns: tuple
    levels: tuple = None


@dataclass(frozen=True)
class LinearTerm:
    name: str
    column: str


@dataclass(frozen=True)
class LinearByTerm:
    """One slope on `column` per level of the categorical `by` column."""
    name: str
    column: str
    by: str
    levels: tuple = None


@dataclass(frozen=True)
class SmoothTerm:
    name: str
    column: str
    m: int = 10


@dataclass(frozen=True)
class TensorSmoothTerm:
    name: str
    columns: tuple
    m: tuple = (5, 5)


@dataclass(frozen=True)
class GamSpec:
    terms: tuple
    penalty_order: int = 2


def default_load_spec():
    """The per-instant load model: calendar intercepts, lag slopes, six smooths."""
    return GamSpec(terms=(
        InteractionTerm("daytype_dls", ("day_type", "dls")),
        LinearByTerm("load1d_by_daytype", "load1d", "day_type"),
        LinearTerm("load1w", "load1w"),
        SmoothTerm("trend", "trend"),
        SmoothTerm("toy", "toy"),
        TensorSmoothTerm("trend_temp", ("trend", "temp_c")),
        SmoothTerm("temp95", "temp95"),
        SmoothTerm("temp99", "temp99"),
        TensorSmoothTerm("tempminmax", ("tempmin99", "tempmax99")),
    ))


def compact_load_spec():
    """Load model without long-term trend terms, for histories of a few years.

    With short training ranges a trend smooth is confounded with the annual
    cycle and extrapolates poorly past the training edge; this variant drops
    f(trend) and the (trend, temp) interaction and keeps a plain temperature
    smooth instead.
    """
    return GamSpec(terms=(
        InteractionTerm("daytype_dls", ("day_type", "dls")),
        LinearByTerm("load1d_by_daytype", "load1d", "day_type"),
        LinearTerm("load1w", "load1w"),
        SmoothTerm("toy", "toy"),
        SmoothTerm("temp", "temp_c"),
        SmoothTerm("temp95", "temp95"),
        SmoothTerm("temp99", "temp99"),
        TensorSmoothTerm("tempminmax", ("tempmin99", "tempmax99")),
    ))


def required_columns(spec):
    cols = []
    for term in spec.terms:
        if isinstance(term, InterceptTerm):
            continue
        if isinstance(term, (CategoricalTerm, LinearTerm, SmoothTerm)):
            cols.append(term.column)
        elif isinstance(term, LinearByTerm):
            cols.extend([term.column, term.by])
        elif isinstance(term, (InteractionTerm, TensorSmoothTerm)):
            cols.extend(term.columns)
        else:
            raise TypeError(f"unknown term type {type(term).__name__}")
    return list(dict.fromkeys(cols))


# --------------------------------------------------------------------------
# fitted terms (what predict needs)
# --------------------------------------------------------------------------

def _column(df, name):
    if name not in df.columns:
        raise MissingColumn(f"column {name!r} required by the model is missing")
    return df[name].to_numpy(dtype=float)


def _nullspace_of_means(block):
    """Orthonormal basis of {beta : mean-of-rows(block @ beta) = 0}."""
    c = block.mean(axis=0)
    _, _, vh = np.linalg.svd(c.reshape(1, -1))
    return np.ascontiguousarray(vh[1:].T)


def _nullspace_of_ones(m):
    """Orthonormal basis of {beta : sum(beta) = 0}.

    A B-spline function is constant exactly when its coefficients are all
    equal, so restricting coefficients to this subspace removes the constant
    function from the span.
    """
    _, _, vh = np.linalg.svd(np.ones((1, m)))
    return np.ascontiguousarray(vh[1:].T)


class _FittedIntercept:
    kind = "intercept"

    def __init__(self, name):
        self.name = name
        self.ncols = 1

    def build(self, df):
        return np.ones((len(df), 1))

    def penalty(self):
        return None

    def descriptor(self):
        return InterceptTerm(self.name)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"])


class _FittedCategorical:
    kind = "categorical"

    def __init__(self, name, column, levels):
        self.name = name
        self.column = column
        self.levels = [float(v) for v in levels]
        self.ncols = len(self.levels)

    def build(self, df):
        x = _column(df, self.column)
        return np.column_stack([(x == lvl).astype(float) for lvl in self.levels])

    def penalty(self):
        return None

    def descriptor(self):
        return CategoricalTerm(self.name, self.column, tuple(self.levels))

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "column": self.column, "levels": self.levels}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["column"], d["levels"])


class _FittedInteraction:
    kind = "interaction"

    def __init__(self, name, columns, pairs):
        self.name = name
        self.columns = list(columns)
        self.pairs = [(float(a), float(b)) for a, b in pairs]
        self.ncols = len(self.pairs)

    def build(self, df):
        xa = _column(df, self.columns[0])
        xb = _column(df, self.columns[1])
        return np.column_stack([((xa == a) & (xb == b)).astype(float) for a, b in self.pairs])

    def penalty(self):
        return None

    def descriptor(self):
        return InteractionTerm(self.name, tuple(self.columns), tuple(self.pairs))

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "columns": self.columns,
                "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["columns"], d["pairs"])


class _FittedLinear:
    kind = "linear"

    def __init__(self, name, column):
        self.name = name
        self.column = column
        self.ncols = 1

    def build(self, df):
        return _column(df, self.column).reshape(-1, 1)

    def penalty(self):
        return None

    def descriptor(self):
        return LinearTerm(self.name, self.column)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "column": self.column}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["column"])


class _FittedLinearBy:
    kind = "linear_by"

    def __init__(self, name, column, by, levels):
        self.name = name
        self.column = column
        self.by = by
        self.levels = [float(v) for v in levels]
        self.ncols = len(self.levels)

    def build(self, df):
        x = _column(df, self.column)
        g = _column(df, self.by)
        return np.column_stack([np.where(g == lvl, x, 0.0) for lvl in self.levels])

    def penalty(self):
        return None

    def descriptor(self):
        return LinearByTerm(self.name, self.column, self.by, tuple(self.levels))

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "column": self.column,
                "by": self.by, "levels": self.levels}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["column"], d["by"], d["levels"])


class _FittedSmooth:
    """Centered univariate spline block: columns are B(x) @ Z."""

    kind = "smooth"

    def __init__(self, name, column, knots, Z):
        self.name = name
        self.column = column
        self.basis = SplineBasis(np.asarray(knots, dtype=float))
        self.Z = np.asarray(Z, dtype=float)
        self.ncols = self.Z.shape[1]

    def build(self, df):
        return self.basis.design(_column(df, self.column)) @ self.Z

    def penalty(self):
        return self.Z.T @ self.basis.penalty() @ self.Z

    def descriptor(self):
        return SmoothTerm(self.name, self.column, m=self.basis.nbasis)

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "column": self.column,
                "knots": self.basis.knots.tolist(), "Z": self.Z.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["column"], d["knots"], d["Z"])


class _FittedTensorSmooth:
    """Interaction-only tensor block.

    Both marginal bases are restricted to their non-constant subspaces before
    taking products, so the block contains no function of a single covariate;
    main-effect smooths of the same covariates stay identifiable next to it.
    """

    kind = "tensor"

    def __init__(self, name, columns, knots_a, knots_b):
        self.name = name
        self.columns = list(columns)
        self.basis_a = SplineBasis(np.asarray(knots_a, dtype=float))
        self.basis_b = SplineBasis(np.asarray(knots_b, dtype=float))
        self.Za = _nullspace_of_ones(self.basis_a.nbasis)
        self.Zb = _nullspace_of_ones(self.basis_b.nbasis)
        self.ncols = self.Za.shape[1] * self.Zb.shape[1]

    def build(self, df):
        if len(df) == 0:
            return np.empty((0, self.ncols))
        Ba = self.basis_a.design(_column(df, self.columns[0])) @ self.Za
        Bb = self.basis_b.design(_column(df, self.columns[1])) @ self.Zb
        return (Ba[:, :, None] * Bb[:, None, :]).reshape(len(df), -1)

    def penalty(self):
        Sa = self.Za.T @ self.basis_a.penalty() @ self.Za
        Sb = self.Zb.T @ self.basis_b.penalty() @ self.Zb
        return tensor_penalty(Sa, Sb)

    def descriptor(self):
        return TensorSmoothTerm(self.name, tuple(self.columns),
                                m=(self.basis_a.nbasis, self.basis_b.nbasis))

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "columns": self.columns,
                "knots_a": self.basis_a.knots.tolist(), "knots_b": self.basis_b.knots.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["columns"], d["knots_a"], d["knots_b"])


_TERM_CLASSES = {c.kind: c for c in (
    _FittedIntercept, _FittedCategorical, _FittedInteraction, _FittedLinear,
    _FittedLinearBy, _FittedSmooth, _FittedTensorSmooth)}


def _fit_term(term, df):
    if isinstance(term, InterceptTerm):
        return _FittedIntercept(term.name)
    if isinstance(term, CategoricalTerm):
        levels = term.levels
        if levels is None:
            levels = np.unique(_column(df, term.column))
        return _FittedCategorical(term.name, term.column, levels)
    if isinstance(term, InteractionTerm):
        pairs = term.levels
        if pairs is None:
            xa = _column(df, term.columns[0])
            xb = _column(df, term.columns[1])
            pairs = sorted({(float(a), float(b)) for a, b in zip(xa, xb)})
        return _FittedInteraction(term.name, term.columns, pairs)
    if isinstance(term, LinearTerm):
        return _FittedLinear(term.name, term.column)
    if isinstance(term, LinearByTerm):
        levels = term.levels
        if levels is None:
            levels = np.unique(_column(df, term.by))
        return _FittedLinearBy(term.name, term.column, term.by, levels)
    if isinstance(term, SmoothTerm):
        basis = build_basis(_column(df, term.column), term.m)
        block = basis.design(_column(df, term.column))
        return _FittedSmooth(term.name, term.column, basis.knots, _nullspace_of_means(block))
    if isinstance(term, TensorSmoothTerm):
        xa = _column(df, term.columns[0])
        xb = _column(df, term.columns[1])
        basis_a = build_basis(xa, term.m[0])
        basis_b = build_basis(xb, term.m[1])
        return _FittedTensorSmooth(term.name, term.columns, basis_a.knots, basis_b.knots)
    raise TypeError(f"unknown term type {type(term).__name__}")


def _as_frame(X):
    if isinstance(X, TimeTable):
        return X.frame
    if isinstance(X, pd.DataFrame):
        return X
    raise TypeError("expected a TimeTable or a pandas DataFrame of named covariates")


# --------------------------------------------------------------------------
# the estimator
# --------------------------------------------------------------------------

class SplineGamRegressor(BaseEstimator, RegressorMixin):
    """Additive model fit by penalized least squares.

    Parameters
    ----------
    spec : GamSpec or None
        Term structure; None means the default per-instant load model.
    lam : "auto", float or sequence
        Curvature penalty weight per smooth term. "auto" selects each weight
        by generalized cross-validation over `gcv_grid`.
    gcv_grid : sequence or None
        Candidate penalty weights; default is 10**-4 .. 10**4 by decades.
    gcv_passes : int
        Coordinate-descent sweeps over the smooth terms during GCV.
    target : str
        Column to use as the response when fit() is called without y.
    store_design : bool
        Keep the training design and response on the fitted object (needed by
        the fine-tuning layer).
    """

    def __init__(self, spec=None, lam="auto", gcv_grid=None, gcv_passes=2,
                 target="load_mw", store_design=True):
        self.spec = spec
        self.lam = lam
        self.gcv_grid = gcv_grid
        self.gcv_passes = gcv_passes
        self.target = target
        self.store_design = store_design

    # -------------------------------------------------- fitting

    def fit(self, X, y=None):
        df = _as_frame(X)
        spec = self.spec if self.spec is not None else default_load_spec()
        if y is None:
            if self.target not in df.columns:
                raise MissingColumn(f"target column {self.target!r} not in data")
            y = df[self.target].to_numpy(dtype=float)
        else:
            y = np.asarray(y, dtype=float)
            if len(y) != len(df):
                raise DimensionMismatch("y length does not match the number of rows")

        mask = np.isfinite(y)
        if "lag_ok" in df.columns:
            mask &= df["lag_ok"].to_numpy() > 0
        for col in required_columns(spec):
            mask &= np.isfinite(_column(df, col))
        if not mask.any():
            raise NoUsableRows("no rows with finite response and covariates (check lag warm-up)")
        dfu = df.loc[mask]
        yu = y[mask]

        terms = [_fit_term(t, dfu) for t in spec.terms]
        blocks = [t.build(dfu) for t in terms]
        design = np.hstack(blocks)
        n, p = design.shape

        slices = []
        start = 0
        for t in terms:
            slices.append(slice(start, start + t.ncols))
            start += t.ncols

        sv = np.linalg.svd(design, compute_uv=False)
        if sv[-1] <= sv[0] * max(n, p) * np.finfo(float).eps:
            raise RankDeficientDesign(
                "design matrix is rank deficient; check for empty categorical levels "
                "or collinear terms")

        penalties = [(sl, t.penalty()) for sl, t in zip(slices, terms) if t.penalty() is not None]
        G = design.T @ design
        Xty = design.T @ yu
        yty = float(yu @ yu)

        lam_vec = self._resolve_lambda(G, Xty, yty, n, penalties)
        coef = _penalized_solve(G, Xty, penalties, lam_vec)

        self.terms_ = terms
        self.slices_ = slices
        self.coef_ = coef
        self.lambda_ = list(lam_vec)
        self.n_features_in_ = p
        self.nobs_ = n

        contributions = [b @ coef[sl] for b, sl in zip(blocks, slices)]
        self.effect_norms_ = [
            {"name": t.name, "mean": float(c.mean()), "sd": float(c.std())}
            for t, c in zip(terms, contributions)
        ]
        scales = design.std(axis=0)
        scales[scales == 0.0] = 1.0
        self.column_scales_ = scales
        self.y_fit_mean_ = float(sum(e["mean"] for e in self.effect_norms_))

        if self.store_design:
            self.design_ = design
            self.y_ = yu
            self.fitted_values_ = design @ coef
            self.train_index_ = dfu.index
        return self

    def _resolve_lambda(self, G, Xty, yty, n, penalties):
        k = len(penalties)
        if k == 0:
            return []
        if isinstance(self.lam, str):
            if self.lam != "auto":
                raise ValueError(f"lam must be 'auto', a number or a sequence, got {self.lam!r}")
            grid = np.asarray(self.gcv_grid if self.gcv_grid is not None else np.logspace(-4, 4, 9),
                              dtype=float)
            lam_vec = np.full(k, 1.0)
            for _ in range(max(1, self.gcv_passes)):
                for j in range(k):
                    scores = []
                    for cand in grid:
                        trial = lam_vec.copy()
                        trial[j] = cand
                        scores.append(_gcv_score(G, Xty, yty, n, penalties, trial))
                    lam_vec[j] = grid[int(np.argmin(scores))]
            return lam_vec
        if np.isscalar(self.lam):
            return np.full(k, float(self.lam))
        lam_vec = np.asarray(self.lam, dtype=float)
        if lam_vec.shape != (k,):
            raise DimensionMismatch(f"expected {k} penalty weights, got {lam_vec.shape}")
        return lam_vec

    # -------------------------------------------------- prediction

    def predict(self, X):
        df = _as_frame(X)
        return self.design_matrix(df) @ self.coef_

    def design_matrix(self, X):
        df = _as_frame(X)
        return np.hstack([t.build(df) for t in self.terms_])

    def effect_contributions(self, X):
        """Raw per-term contributions, keyed by term name."""
        df = _as_frame(X)
        return {
            t.name: t.build(df) @ self.coef_[sl]
            for t, sl in zip(self.terms_, self.slices_)
        }

    def _effect_terms(self):
        """Terms entering the adaptive map: every term except explicit constants."""
        return [(t, sl, norm) for t, sl, norm in zip(self.terms_, self.slices_, self.effect_norms_)
                if t.kind != "intercept"]

    def effect_values(self, X):
        """Frozen normalized effect map: rows (1, f_1(x), ..., f_d(x))."""
        df = _as_frame(X)
        effects = self._effect_terms()
        out = np.empty((len(df), 1 + len(effects)))
        out[:, 0] = 1.0
        for j, (t, sl, norm) in enumerate(effects):
            if norm["sd"] < DEGENERATE_SD:
                raise DegenerateEffect(
                    f"effect {t.name!r} has train standard deviation {norm['sd']:.2e}")
            contrib = t.build(df) @ self.coef_[sl]
            out[:, 1 + j] = (contrib - norm["mean"]) / norm["sd"]
        return out

    @property
    def effect_names(self):
        return ["intercept"] + [t.name for t, _, _ in self._effect_terms()]

    def frozen_theta(self):
        """Correction vector that reproduces the frozen model through the effect map."""
        sds = [norm["sd"] for _, _, norm in self._effect_terms()]
        return np.concatenate([[self.y_fit_mean_], sds])

    # -------------------------------------------------- serialization

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "target": self.target,
            "lambda": [float(v) for v in self.lambda_],
            "terms": [t.to_dict() for t in self.terms_],
            "coef": [float(v) for v in self.coef_],
            "effect_norms": self.effect_norms_,
            "column_scales": [float(v) for v in self.column_scales_],
            "y_fit_mean": self.y_fit_mean_,
            "nobs": int(self.nobs_),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, payload):
        if payload.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {payload.get('format_version')!r}")
        terms = [_TERM_CLASSES[d["kind"]].from_dict(d) for d in payload["terms"]]
        model = cls(spec=GamSpec(terms=tuple(t.descriptor() for t in terms)),
                    lam=payload["lambda"] if payload["lambda"] else "auto",
                    target=payload["target"])
        model.terms_ = terms
        slices = []
        start = 0
        for t in terms:
            slices.append(slice(start, start + t.ncols))
            start += t.ncols
        model.slices_ = slices
        model.coef_ = np.asarray(payload["coef"], dtype=float)
        model.lambda_ = list(payload["lambda"])
        model.effect_norms_ = payload["effect_norms"]
        model.column_scales_ = np.asarray(payload["column_scales"], dtype=float)
        model.y_fit_mean_ = payload["y_fit_mean"]
        model.nobs_ = payload["nobs"]
        model.n_features_in_ = start
        return model

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if "\n" not in text and text.strip().endswith(".json"):
            with open(text_or_path) as fh:
                text = fh.read()
        elif not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _penalized_solve(G, Xty, penalties, lam_vec):
    A = G.copy()
    for (sl, P), lam in zip(penalties, lam_vec):
        A[sl, sl] += lam * P
    cf = cho_factor(A)
    return cho_solve(cf, Xty)


def _gcv_score(G, Xty, yty, n, penalties, lam_vec):
    A = G.copy()
    for (sl, P), lam in zip(penalties, lam_vec):
        A[sl, sl] += lam * P
    cf = cho_factor(A)
    beta = cho_solve(cf, Xty)
    edof = float(np.trace(cho_solve(cf, G)))
    rss = max(yty - 2.0 * beta @ Xty + beta @ G @ beta, 0.0)
    denom = max(n - edof, 1e-8)
    return n * rss / denom**2
