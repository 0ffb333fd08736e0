"""Metrics, backtest plans and the one-step-ahead expert comparison harness.

The backtest runs a roster of experts per instant of day with a strict
information protocol: any forecast for step t may use observations through
t-1 only (covariates at t, including lagged loads, are known at t). Train-set
hyperparameters (state-noise diagonal, forgetting factor, scale ratio) are
resolved once, so the leakage audit can perturb future observations and
re-run the experts under identical hyperparameters: forecasts at earlier
steps must not move by a single bit.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .adapt import (
    ExpLsEstimator,
    KalmanConfig,
    KalmanFilterAdapter,
    greedy_search_q,
    solve_theta1,
    tune_forgetting,
)
from .aggregate import MlPolyAggregator, saturday_expert
from .errors import LeakageGuardTripped, MissingColumn, MissingExpert
from .features import build_features, split_by_instant
from .gam import SplineGamRegressor, compact_load_spec, default_load_spec
from .residual import correct_forecast, fit_ar
from .timetable import TimeTable, as_utc_timestamp
from .transfer import (
    FinetuneConfig,
    TransferLink,
    compute_step_size,
    estimate_rho,
    finetune,
)

BASE_EXPERTS = ("ar", "gam", "gam_ar", "expls", "kalman_static", "kalman_dynamic")
BREAK_EXPERTS = ("kalman_static_break", "kalman_dynamic_break", "finetune",
                 "gam_delta", "gam_delta_finetune", "gam_saturday")
TRANSFER_EXPERTS = ("gam_delta", "gam_delta_finetune")
DEFAULT_EXPERTS = BASE_EXPERTS + BREAK_EXPERTS + ("mixture",)


class Metrics(NamedTuple):
    rmse: float
    mape: float
    n: int
    n_mape_excluded: int


def metrics(y, yhat):
    """RMSE (level units) and MAPE (%); zero actuals are excluded from MAPE
    and reported through n_mape_excluded."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    err = y - yhat
    rmse = float(np.sqrt(np.mean(err**2)))
    nonzero = y != 0.0
    excluded = int((~nonzero).sum())
    if nonzero.any():
        mape = float(100.0 * np.mean(np.abs(err[nonzero] / y[nonzero])))
    else:
        mape = float("nan")
    return Metrics(rmse=rmse, mape=mape, n=int(y.size), n_mape_excluded=excluded)


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass
class BacktestPlan:
    train_start: object
    train_end: object
    periods: dict
    break_time: object
    experts: tuple = DEFAULT_EXPERTS
    instants: tuple = None
    source_break_time: object = None
    tz: str = "Europe/Paris"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_start = as_utc_timestamp(self.train_start)
        self.train_end = as_utc_timestamp(self.train_end)
        self.periods = {name: (as_utc_timestamp(a), as_utc_timestamp(b))
                        for name, (a, b) in self.periods.items()}
        self.break_time = as_utc_timestamp(self.break_time)
        if self.source_break_time is not None:
            self.source_break_time = as_utc_timestamp(self.source_break_time)
        self.validate()

    def validate(self):
        if self.train_start >= self.train_end:
            raise ValueError("empty training range")
        spans = [(self.train_start, self.train_end)] + sorted(self.periods.values())
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 >= b1:
                raise ValueError("empty test period")
            if a1 <= b0:
                raise ValueError("train/test ranges must be disjoint and chronological")
        if not any(a <= self.break_time <= b for a, b in self.periods.values()):
            raise ValueError("break_time must fall inside a test period")
        unknown = set(self.experts) - set(DEFAULT_EXPERTS)
        if unknown:
            raise MissingExpert(f"unknown experts {sorted(unknown)}")

    @property
    def test_start(self):
        return min(a for a, _ in self.periods.values())

    @property
    def test_end(self):
        return max(b for _, b in self.periods.values())

    def period_of(self, ts):
        for name, (a, b) in self.periods.items():
            if a <= ts <= b:
                return name
        return None


def preset_plan_2020(**overrides):
    """Evaluation windows around the early-2020 regime break, for real data."""
    base = dict(
        train_start="2012-01-01", train_end="2019-08-31 23:59",
        periods={
            "pre_break": (pd.Timestamp("2019-09-01"), pd.Timestamp("2020-03-15 23:59")),
            "break_1": (pd.Timestamp("2020-03-16"), pd.Timestamp("2020-04-15 23:59")),
            "break_2": (pd.Timestamp("2020-04-16"), pd.Timestamp("2020-06-07 23:59")),
        },
        break_time="2020-03-16",
        source_break_time="2020-03-09",
    )
    base.update(overrides)
    return BacktestPlan(**base)


def synthetic_preset():
    """Scenario + plan pair used by the end-to-end synthetic demo."""
    from .gam import compact_load_spec
    from .synth import Scenario

    scenario = Scenario(rho=1.6)
    src_break, tgt_break = scenario.break_timestamps()
    start = pd.Timestamp(scenario.start).tz_localize(scenario.tz).tz_convert("UTC")
    train_end = tgt_break - pd.Timedelta(days=100)
    step = pd.Timedelta(minutes=scenario.period_minutes)
    plan = BacktestPlan(
        train_start=start,
        train_end=train_end - step,
        periods={
            "pre_break": (train_end, tgt_break - step),
            "break_1": (tgt_break, tgt_break + pd.Timedelta(days=30) - step),
            "break_2": (tgt_break + pd.Timedelta(days=30),
                        tgt_break + pd.Timedelta(days=60) - step),
        },
        break_time=tgt_break,
        source_break_time=src_break,
        instants=(19,),
        tz=scenario.tz,
        config={"spec": compact_load_spec()},
    )
    return scenario, plan


# --------------------------------------------------------------------------
# scorecards
# --------------------------------------------------------------------------

@dataclass
class ScoreCard:
    frame: pd.DataFrame

    def to_csv(self, path):
        self.frame.to_csv(path, index=False)

    def lookup(self, expert, period, column="rmse"):
        rows = self.frame[(self.frame["expert"] == expert) & (self.frame["period"] == period)]
        return float(rows[column].iloc[0])


def score_archive(archive, period_order=None):
    rows = []
    for (expert, period), group in archive.groupby(["expert", "period"], sort=True):
        m = metrics(group["y"].to_numpy(), group["forecast"].to_numpy())
        rows.append({"expert": expert, "period": period, "rmse": m.rmse, "mape": m.mape,
                     "n": m.n, "n_mape_excluded": m.n_mape_excluded})
    frame = pd.DataFrame(rows)
    if period_order:
        frame["period"] = pd.Categorical(frame["period"], categories=list(period_order))
        frame = frame.sort_values(["expert", "period"]).reset_index(drop=True)
        frame["period"] = frame["period"].astype(str)
    return ScoreCard(frame)


# --------------------------------------------------------------------------
# per-instant expert runs
# --------------------------------------------------------------------------

def _cfg(plan, key, default):
    return plan.config.get(key, default)


@dataclass
class _InstantContext:
    instant: int
    model: SplineGamRegressor
    source_model: object
    ar_load: object
    ar_resid: object
    q_diag: np.ndarray
    theta1_dynamic: np.ndarray
    mu: float
    link: object


def _resolve_spec(plan):
    spec = _cfg(plan, "spec", None)
    if isinstance(spec, str):
        return {"default": default_load_spec, "compact": compact_load_spec}[spec]()
    return spec or default_load_spec()


def _fit_instant_context(plan, inst_df, source_df, rho):
    usable = inst_df["lag_ok"] > 0
    train_mask = (inst_df.index >= plan.train_start) & (inst_df.index <= plan.train_end)
    train_df = inst_df[usable & train_mask]
    lam = _cfg(plan, "lam", "auto")
    spec = _resolve_spec(plan)
    model = SplineGamRegressor(spec=spec, lam=lam).fit(train_df)

    F_train = model.effect_values(train_df)
    y_train = train_df["load_mw"].to_numpy(dtype=float)

    experts = set(plan.experts)
    q_diag = _cfg(plan, "q_diag", None)
    theta1_dynamic = None
    if experts & {"kalman_dynamic", "kalman_dynamic_break"}:
        if q_diag is None:
            result = greedy_search_q(F_train, y_train)
            q_diag = result.q_diag
            theta1_dynamic = result.theta1
        else:
            q_diag = np.asarray(q_diag, dtype=float)
            theta1_dynamic = solve_theta1(np.diag(q_diag), F_train, y_train)

    mu = _cfg(plan, "mu", None)
    if mu is None and "expls" in experts:
        span_days = (plan.train_end - plan.train_start).days
        if span_days >= 730:
            val_start = plan.train_end - pd.Timedelta(days=365)
            n_val = int((train_df.index > val_start).sum())
        else:
            n_val = max(1, len(train_df) // 4)
        mu, _ = tune_forgetting(F_train, y_train, n_val)

    ar_load = None
    if "ar" in experts:
        ar_load = fit_ar(y_train, max_p=_cfg(plan, "ar_max_p", 10))
    ar_resid = None
    if "gam_ar" in experts:
        resid_train = y_train - model.predict(train_df)
        ar_resid = fit_ar(resid_train, max_p=_cfg(plan, "ar_max_p", 10))

    source_model = None
    link = None
    if source_df is not None and experts & set(TRANSFER_EXPERTS):
        source_train = source_df[(source_df["lag_ok"] > 0)
                                 & (source_df.index >= plan.train_start)
                                 & (source_df.index <= plan.train_end)]
        source_model = SplineGamRegressor(spec=spec, lam=lam).fit(source_train)
        link = TransferLink.between(source_model, model, rho,
                                    exclude=tuple(_cfg(plan, "transfer_exclude", ("toy",))))

    return _InstantContext(instant=int(inst_df["instant"].iloc[0]), model=model,
                           source_model=source_model, ar_load=ar_load, ar_resid=ar_resid,
                           q_diag=q_diag, theta1_dynamic=theta1_dynamic, mu=mu, link=link)


class _AlphaCache:
    """Step size for a growing fine-tuning window, refreshed on 10% growth."""

    def __init__(self, growth=0.10):
        self.growth = growth
        self.size = -1
        self.alpha = None

    def get(self, X):
        n = X.shape[0]
        if self.alpha is None or n >= self.size * (1.0 + self.growth) or n < self.size:
            self.alpha = compute_step_size(X)
            self.size = n
        return self.alpha


def _finetuned_beta_std(beta0_std, Xs_window, y_window, K, alpha_cache):
    if Xs_window.shape[0] == 0:
        return beta0_std.copy()
    alpha = alpha_cache.get(Xs_window)
    return finetune(beta0_std, Xs_window, y_window, FinetuneConfig(K=K, alpha=alpha))


def _run_instant_experts(plan, ctx, inst_df, source_df):
    """Forecast frame (rows: test steps, columns: experts) for one instant."""
    usable = inst_df["lag_ok"] > 0
    stream = inst_df[usable & (inst_df.index <= plan.test_end)]
    y_stream = stream["load_mw"].to_numpy(dtype=float)
    test_mask = np.asarray(stream.index >= plan.test_start)
    test_idx = stream.index[test_mask]
    test_pos = np.nonzero(test_mask)[0]
    post_break = np.asarray(stream.index >= plan.break_time)
    break_pos = int(np.nonzero(post_break)[0][0]) if post_break.any() else None

    model = ctx.model
    out = pd.DataFrame(index=test_idx)
    out["y"] = y_stream[test_pos]

    needed = set(plan.experts) - {"mixture"}
    if "mixture" in plan.experts:
        needed |= {e for e in plan.experts if e != "mixture"}

    design_stream = model.design_matrix(stream)
    fitted_stream = design_stream @ model.coef_
    base_gam = fitted_stream[test_pos]
    if "gam" in needed:
        out["gam"] = base_gam
    if "gam_saturday" in needed:
        out["gam_saturday"] = saturday_expert(model, stream.loc[test_idx])

    if "ar" in needed:
        preds = np.empty(len(test_pos))
        for i, pos in enumerate(test_pos):
            preds[i] = ctx.ar_load.forecast(y_stream[:pos], 1)[0]
        out["ar"] = preds

    if "gam_ar" in needed:
        resid = y_stream - fitted_stream
        preds = np.empty(len(test_pos))
        for i, pos in enumerate(test_pos):
            preds[i] = correct_forecast(np.array([base_gam[i]]), ctx.ar_resid, resid[:pos])[0]
        out["gam_ar"] = preds

    kalman_names = {"kalman_static", "kalman_dynamic", "kalman_static_break",
                    "kalman_dynamic_break"}
    if needed & (kalman_names | {"expls"}):
        F_stream = model.effect_values(stream)
        dim = F_stream.shape[1]
        if "expls" in needed:
            est = ExpLsEstimator(dim, ctx.mu, epsilon=_cfg(plan, "expls_epsilon", 1e-8))
            out_expls = est.run(F_stream, y_stream)
            out["expls"] = out_expls.forecasts[test_pos]
        for name in ("kalman_static", "kalman_dynamic", "kalman_static_break",
                     "kalman_dynamic_break"):
            if name not in needed:
                continue
            if "dynamic" in name:
                config = KalmanConfig.dynamic(ctx.q_diag, theta1=ctx.theta1_dynamic)
            else:
                config = KalmanConfig.static(dim)
            if name.endswith("_break") and break_pos is not None:
                config = config.with_break(break_pos)
            run = KalmanFilterAdapter(config).run(F_stream, y_stream)
            out[name] = run.forecasts[test_pos]

    K = _cfg(plan, "finetune_K", 75)
    scales = model.column_scales_
    design_std = design_stream / scales
    beta_model_std = model.coef_ * scales

    if "finetune" in needed:
        cache = _AlphaCache()
        preds = np.empty(len(test_pos))
        for i, pos in enumerate(test_pos):
            if not post_break[pos]:
                preds[i] = base_gam[i]
            else:
                beta_std = _finetuned_beta_std(beta_model_std, design_std[break_pos:pos],
                                               y_stream[break_pos:pos], K, cache)
                preds[i] = float(design_std[pos] @ beta_std)
        out["finetune"] = preds

    if needed & set(TRANSFER_EXPERTS):
        src_model = ctx.source_model
        src_stream = source_df[(source_df["lag_ok"] > 0) & (source_df.index <= plan.test_end)]
        src_post = np.asarray(src_stream.index >= plan.source_break_time)
        src_design_std = src_model.design_matrix(src_stream) / src_model.column_scales_
        src_y = src_stream["load_mw"].to_numpy(dtype=float)
        src_beta_std = src_model.coef_ * src_model.column_scales_
        src_first = int(np.nonzero(src_post)[0][0]) if src_post.any() else None
        src_index = src_stream.index

        src_cache = _AlphaCache()
        tgt_cache = _AlphaCache()
        delta_pred = np.empty(len(test_pos))
        delta_ft_pred = np.empty(len(test_pos))
        for i, pos in enumerate(test_pos):
            ts = stream.index[pos]
            if not post_break[pos]:
                delta_pred[i] = base_gam[i]
                delta_ft_pred[i] = base_gam[i]
                continue
            src_stop = int(np.searchsorted(src_index, ts))
            if src_first is None or src_stop <= src_first:
                beta_tilde = model.coef_.copy()
            else:
                beta_src_std = _finetuned_beta_std(
                    src_beta_std, src_design_std[src_first:src_stop],
                    src_y[src_first:src_stop], K, src_cache)
                delta = beta_src_std / src_model.column_scales_ - src_model.coef_
                ctx.link.delta = delta
                beta_tilde = ctx.link.apply(model.coef_, delta)
            delta_pred[i] = float(design_stream[pos] @ beta_tilde)
            beta_ft_std = _finetuned_beta_std(beta_tilde * scales,
                                              design_std[break_pos:pos],
                                              y_stream[break_pos:pos], K, tgt_cache)
            delta_ft_pred[i] = float(design_std[pos] @ beta_ft_std)
        if "gam_delta" in needed:
            out["gam_delta"] = delta_pred
        if "gam_delta_finetune" in needed:
            out["gam_delta_finetune"] = delta_ft_pred

    weights = None
    if "mixture" in plan.experts:
        initial = [e for e in BASE_EXPERTS if e in plan.experts]
        admitted = [e for e in BREAK_EXPERTS if e in plan.experts]
        agg = MlPolyAggregator(initial, loss_range=1.2 * float(np.max(y_stream)))
        preds = np.empty(len(test_pos))
        admitted_done = False
        y_test = out["y"].to_numpy()
        for i, pos in enumerate(test_pos):
            ts = stream.index[pos]
            if not admitted_done and post_break[pos] and admitted:
                agg.admit(admitted)
                admitted_done = True
            forecasts = {e: float(out[e].iloc[i]) for e in agg.state.names}
            preds[i] = agg.update(forecasts, float(y_test[i]), timestamp=ts)
        out["mixture"] = preds
        weights = agg.weight_frame()

    return out, weights


# --------------------------------------------------------------------------
# the backtest
# --------------------------------------------------------------------------

@dataclass
class BacktestResult:
    scorecard: ScoreCard
    archive: pd.DataFrame
    weights: pd.DataFrame
    rho: float
    contexts: dict
    audit_draws: int = 0
    audit_passed: bool = True


def _ensure_features(data, tz):
    table = data if isinstance(data, TimeTable) else TimeTable(data, 60)
    if "instant" not in table.columns:
        table = build_features(table, tz)
    return table


def _split_instants(features, instants):
    frames = {int(df["instant"].iloc[0]): df for df in split_by_instant(features)}
    if instants is None:
        return frames
    missing = [i for i in instants if i not in frames]
    if missing:
        raise MissingColumn(f"instants {missing} not present in the data")
    return {i: frames[i] for i in instants}


def _resolve_rho(plan, features, source_features):
    rho = _cfg(plan, "rho", None)
    if rho is not None or source_features is None:
        return rho or 1.0
    window_start = plan.train_end - pd.Timedelta(days=365)
    tgt = features.frame
    src = source_features.frame
    tm = (tgt.index > window_start) & (tgt.index <= plan.train_end)
    sm = (src.index > window_start) & (src.index <= plan.train_end)
    return estimate_rho(tgt.loc[tm, "load_mw"].to_numpy(), src.loc[sm, "load_mw"].to_numpy())


def backtest(plan, data, source_data=None, audit_draws=20, audit_seed=0, raise_on_leak=True):
    """Run the expert roster under the plan; returns scores, forecasts, weights.

    The leakage audit perturbs a random future observation and re-runs the
    experts (same train-resolved hyperparameters): forecasts strictly before
    the perturbed step must be identical. LeakageGuardTripped is raised (or
    reported on the result when raise_on_leak=False) if any forecast moves.
    """
    needs_source = any(e in plan.experts for e in TRANSFER_EXPERTS)
    if needs_source and source_data is None:
        raise MissingExpert("transfer experts require source_data")
    features = _ensure_features(data, plan.tz)
    source_features = _ensure_features(source_data, plan.tz) if source_data is not None else None
    if needs_source and plan.source_break_time is None:
        raise ValueError("plan.source_break_time is required for transfer experts")

    rho = _resolve_rho(plan, features, source_features)
    frames = _split_instants(features, plan.instants)
    source_frames = _split_instants(source_features, plan.instants) if source_features else {}

    contexts = {}
    for instant, inst_df in frames.items():
        contexts[instant] = _fit_instant_context(plan, inst_df,
                                                 source_frames.get(instant), rho)

    archive, weights = _run_all(plan, contexts, frames, source_frames)
    scorecard = score_archive(archive, period_order=list(plan.periods))

    audit_passed = True
    if audit_draws > 0:
        audit_passed = _leakage_audit(plan, contexts, features, source_features,
                                      archive, audit_draws, audit_seed)
        if not audit_passed and raise_on_leak:
            raise LeakageGuardTripped("a forecast changed when a future observation was perturbed")
    return BacktestResult(scorecard=scorecard, archive=archive, weights=weights, rho=rho,
                          contexts=contexts, audit_draws=audit_draws, audit_passed=audit_passed)


def _run_all(plan, contexts, frames, source_frames):
    pieces = []
    weight_frames = []
    for instant, inst_df in frames.items():
        ctx = contexts[instant]
        out, weights = _run_instant_experts(plan, ctx, inst_df, source_frames.get(instant))
        long = out.reset_index(names="timestamp").melt(
            id_vars=["timestamp", "y"], var_name="expert", value_name="forecast")
        long["instant"] = instant
        pieces.append(long)
        if weights is not None:
            weights["instant"] = instant
            weight_frames.append(weights)
    archive = pd.concat(pieces, ignore_index=True)
    archive["period"] = [plan.period_of(ts) for ts in archive["timestamp"]]
    archive = archive[archive["period"].notna()]
    archive = archive.sort_values(["expert", "instant", "timestamp"]).reset_index(drop=True)
    weights = pd.concat(weight_frames, ignore_index=True) if weight_frames else pd.DataFrame()
    return archive, weights


def _leakage_audit(plan, contexts, features, source_features, archive, draws, seed):
    rng = np.random.default_rng(seed)
    frame = features.frame
    in_window = (frame.index >= plan.test_start) & (frame.index <= plan.test_end)
    if plan.instants is not None:
        in_window &= frame["instant"].isin(plan.instants).to_numpy()
    test_positions = np.nonzero(in_window)[0]
    if len(test_positions) < 2:
        return True
    source_frames = _split_instants(source_features, plan.instants) if source_features else {}
    for _ in range(draws):
        s_pos = int(rng.choice(test_positions[1:]))
        loads = frame["load_mw"].to_numpy().copy()
        loads[s_pos] = loads[s_pos] * 1.1 + 1.0
        perturbed = _rebuild_lags(features, loads)
        frames_p = _split_instants(perturbed, plan.instants)
        archive_p, _ = _run_all(plan, contexts, frames_p, source_frames)
        cutoff = frame.index[s_pos]
        before = archive[archive["timestamp"] < cutoff]
        before_p = archive_p[archive_p["timestamp"] < cutoff]
        merged = before.merge(before_p, on=["expert", "instant", "timestamp"],
                              suffixes=("", "_p"))
        if len(merged) != len(before):
            return False
        if not np.array_equal(merged["forecast"].to_numpy(), merged["forecast_p"].to_numpy()):
            return False
    return True


def _rebuild_lags(features, loads):
    """Recompute load-derived columns after a load perturbation."""
    from .features import lag_features

    frame = features.frame.copy()
    frame["load_mw"] = loads
    load1d, load1w, lag_ok = lag_features(loads, features.instant_count)
    frame["load1d"] = load1d
    frame["load1w"] = load1w
    frame["lag_ok"] = lag_ok.astype(int)
    return TimeTable(frame, features.period_minutes, validate=False)
