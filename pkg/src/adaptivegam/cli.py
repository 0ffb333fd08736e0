"""Command-line entry points.

Every subcommand reads/writes CSV or JSON files so the pieces chain together:
`synth` makes data, `features` derives covariates, `fit` trains a per-instant
model, `adapt`/`finetune`/`transfer` produce one-step-ahead forecast streams,
`aggregate` mixes expert streams, `score` computes metrics and `backtest`
runs the whole comparison (exit code 0 only when the leakage audit passes).
"""

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from .adapt import (
    ExpLsConfig,
    KalmanConfig,
    greedy_search_q,
    run_adaptive,
    tune_forgetting,
)
from .aggregate import MlPolyAggregator
from .evaluate import BacktestPlan, backtest, metrics, synthetic_preset
from .features import build_features
from .gam import SplineGamRegressor, compact_load_spec, default_load_spec
from .synth import Scenario, gen_synthetic
from .timetable import TimeTable, as_utc_timestamp, parse_load_csv
from .transfer import (
    FinetuneConfig,
    TransferLink,
    estimate_rho,
    finetune_model,
    predict_with,
)

SPECS = {"default": default_load_spec, "compact": compact_load_spec}


def _load_config(path):
    text = Path(path).read_text()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ImportError:  # python < 3.11
            try:
                import tomli as tomllib
            except ImportError:
                raise click.ClickException(
                    "TOML config needs Python >= 3.11 (tomllib); use JSON instead")
        return tomllib.loads(text)
    return json.loads(text)


def _read_features(path, period):
    return TimeTable.read_csv(path, period)


def _instant_frame(table, instant):
    frame = table.frame
    out = frame[frame["instant"] == instant]
    if len(out) == 0:
        raise click.ClickException(f"no rows at instant {instant}")
    return out


@click.group()
def main():
    """Adaptive spline additive models for load-style series."""


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--tz", default="Europe/Paris", show_default=True)
@click.option("--period", default=60, show_default=True, help="grid period in minutes")
@click.option("--timestamp-column", default="timestamp")
@click.option("--load-column", default="load_mw")
@click.option("--temp-column", default="temp_c")
def features(input_path, output, tz, period, timestamp_column, load_column, temp_column):
    """Parse a raw load/temperature CSV and derive all model covariates."""
    schema = {"timestamp": timestamp_column, "load_mw": load_column, "temp_c": temp_column}
    raw = parse_load_csv(input_path, schema=schema, period_minutes=period)
    table = build_features(raw, tz)
    table.to_csv(output)
    click.echo(f"wrote {len(table)} rows x {len(table.columns)} columns to {output}")


@main.command()
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--period", default=60, show_default=True)
@click.option("--instant", required=True, type=int)
@click.option("--spec", "spec_name", type=click.Choice(sorted(SPECS)), default="compact",
              show_default=True)
@click.option("--lam", default="auto", show_default=True)
@click.option("--train-end", default=None, help="fit on rows up to this timestamp")
@click.option("--output", required=True, type=click.Path())
def fit(features_path, period, instant, spec_name, lam, train_end, output):
    """Fit the per-instant additive model and save it as JSON."""
    table = _read_features(features_path, period)
    df = _instant_frame(table, instant)
    if train_end is not None:
        df = df[df.index <= as_utc_timestamp(train_end)]
    df = df[df["lag_ok"] > 0]
    lam_value = lam if lam == "auto" else float(lam)
    model = SplineGamRegressor(spec=SPECS[spec_name](), lam=lam_value).fit(df)
    model.to_json(output)
    click.echo(f"fitted on {model.nobs_} rows, {len(model.coef_)} coefficients -> {output}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--period", default=60, show_default=True)
@click.option("--instant", required=True, type=int)
@click.option("--mode", type=click.Choice(["static", "dynamic", "expls"]), default="static",
              show_default=True)
@click.option("--train-end", default=None,
              help="hyperparameters estimated on rows up to this timestamp")
@click.option("--break-time", default=None, help="inject the break covariance at this timestamp")
@click.option("--mu", default=None, type=float, help="forgetting factor (expls mode)")
@click.option("--output", required=True, type=click.Path())
@click.option("--state-output", default=None, type=click.Path(),
              help="also export the state trajectory CSV")
def adapt(model_path, features_path, period, instant, mode, train_end, break_time, mu,
          output, state_output):
    """One-step-ahead adaptive forecasts over the frozen effect map."""
    model = SplineGamRegressor.from_json(model_path)
    table = _read_features(features_path, period)
    df = _instant_frame(table, instant)
    df = df[df["lag_ok"] > 0]
    F = model.effect_values(df)
    y = df["load_mw"].to_numpy(dtype=float)
    dim = F.shape[1]

    if train_end is not None:
        n_train = int((df.index <= as_utc_timestamp(train_end)).sum())
    else:
        n_train = len(df)

    if mode == "expls":
        if mu is None:
            mu, _ = tune_forgetting(F[:n_train], y[:n_train], max(1, n_train // 4))
            click.echo(f"tuned mu = {mu}")
        config = ExpLsConfig(mu=mu)
    elif mode == "static":
        config = KalmanConfig.static(dim)
    else:
        result = greedy_search_q(F[:n_train], y[:n_train])
        click.echo(f"greedy Q* diag (log2): "
                   f"{[None if v == 0 else float(np.log2(v)) for v in result.q_diag]} "
                   f"({result.n_evaluations} evaluations)")
        config = KalmanConfig.dynamic(result.q_diag, theta1=result.theta1)
    if break_time is not None and mode != "expls":
        pos = int(np.searchsorted(df.index, as_utc_timestamp(break_time)))
        config = config.with_break(pos)

    run = run_adaptive(model, df, config)
    out = pd.DataFrame({"timestamp": df.index.strftime("%Y-%m-%dT%H:%M:%SZ"),
                        "y": y, "forecast": run.forecasts})
    out.to_csv(output, index=False)
    if state_output:
        run.to_frame().to_csv(state_output)
    click.echo(f"wrote {len(out)} forecasts to {output}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--period", default=60, show_default=True)
@click.option("--instant", required=True, type=int)
@click.option("--break-time", required=True, help="fine-tuning window starts here")
@click.option("--k", default=75, show_default=True, help="gradient iterations per step")
@click.option("--output", required=True, type=click.Path())
def finetune(model_path, features_path, period, instant, break_time, k, output):
    """Per-step gradient fine-tuning forecasts on the post-break window."""
    model = SplineGamRegressor.from_json(model_path)
    table = _read_features(features_path, period)
    df = _instant_frame(table, instant)
    df = df[df["lag_ok"] > 0]
    start = as_utc_timestamp(break_time)
    post = df[df.index >= start]
    rows = []
    for ts in post.index:
        window = post[post.index < ts]
        beta = finetune_model(model, window, window["load_mw"].to_numpy(),
                              FinetuneConfig(K=k))
        rows.append({"timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
                     "y": float(post.loc[ts, "load_mw"]),
                     "forecast": float(predict_with(model, beta, post.loc[[ts]])[0])})
    pd.DataFrame(rows).to_csv(output, index=False)
    click.echo(f"wrote {len(rows)} fine-tuned forecasts to {output}")


@main.command()
@click.option("--source-model", required=True, type=click.Path(exists=True))
@click.option("--target-model", required=True, type=click.Path(exists=True))
@click.option("--source-features", required=True, type=click.Path(exists=True))
@click.option("--target-features", required=True, type=click.Path(exists=True))
@click.option("--period", default=60, show_default=True)
@click.option("--instant", required=True, type=int)
@click.option("--source-break", required=True)
@click.option("--target-break", required=True)
@click.option("--rho", default=None, type=float,
              help="scale ratio; estimated from the final pre-break year when omitted")
@click.option("--k", default=75, show_default=True)
@click.option("--finetune-target/--no-finetune-target", default=False,
              help="additionally fine-tune on the target's own post-break rows")
@click.option("--output", required=True, type=click.Path())
@click.option("--link-output", default=None, type=click.Path())
def transfer(source_model, target_model, source_features, target_features, period, instant,
             source_break, target_break, rho, k, finetune_target, output, link_output):
    """Delta-transfer forecasts from a source series onto the target."""
    m_src = SplineGamRegressor.from_json(source_model)
    m_tgt = SplineGamRegressor.from_json(target_model)
    tbl_src = _read_features(source_features, period)
    tbl_tgt = _read_features(target_features, period)
    src_break_ts = as_utc_timestamp(source_break)
    tgt_break_ts = as_utc_timestamp(target_break)

    if rho is None:
        w0 = src_break_ts - pd.Timedelta(days=365)
        ys = tbl_src.frame.loc[(tbl_src.frame.index >= w0)
                               & (tbl_src.frame.index < src_break_ts), "load_mw"]
        yt = tbl_tgt.frame.loc[(tbl_tgt.frame.index >= w0)
                               & (tbl_tgt.frame.index < src_break_ts), "load_mw"]
        rho = estimate_rho(yt.to_numpy(), ys.to_numpy())
        click.echo(f"estimated rho = {rho:.4f}")

    link = TransferLink.between(m_src, m_tgt, rho, exclude=("toy",))
    df_src = _instant_frame(tbl_src, instant)
    df_src = df_src[df_src["lag_ok"] > 0]
    df_tgt = _instant_frame(tbl_tgt, instant)
    df_tgt = df_tgt[df_tgt["lag_ok"] > 0]
    post = df_tgt[df_tgt.index >= tgt_break_ts]
    config = FinetuneConfig(K=k)
    rows = []
    for ts in post.index:
        src_window = df_src[(df_src.index >= src_break_ts) & (df_src.index < ts)]
        beta_src = finetune_model(m_src, src_window, src_window["load_mw"].to_numpy(), config)
        link.delta = beta_src - m_src.coef_
        beta = link.apply(m_tgt.coef_, link.delta)
        if finetune_target:
            tgt_window = post[post.index < ts]
            beta = finetune_model(m_tgt, tgt_window, tgt_window["load_mw"].to_numpy(),
                                  config, beta_start=beta)
        rows.append({"timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
                     "y": float(post.loc[ts, "load_mw"]),
                     "forecast": float(predict_with(m_tgt, beta, post.loc[[ts]])[0])})
    pd.DataFrame(rows).to_csv(output, index=False)
    if link_output:
        Path(link_output).write_text(json.dumps(link.to_dict(), sort_keys=True))
    click.echo(f"wrote {len(rows)} transfer forecasts to {output}")


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="wide CSV: timestamp, y, one column per expert")
@click.option("--admit-at", default=None, help="timestamp at which late experts join")
@click.option("--admit", default="", help="comma-separated expert names joining at --admit-at")
@click.option("--output", required=True, type=click.Path())
@click.option("--weights-output", default=None, type=click.Path())
def aggregate(input_path, admit_at, admit, output, weights_output):
    """Mix expert forecast streams online with adaptive regret weights."""
    frame = pd.read_csv(input_path)
    ts = pd.to_datetime(frame.pop("timestamp"), utc=True, format="ISO8601")
    y = frame.pop("y").to_numpy(dtype=float)
    late = [name.strip() for name in admit.split(",") if name.strip()]
    initial = [c for c in frame.columns if c not in late]
    admit_ts = as_utc_timestamp(admit_at) if admit_at is not None else None
    agg = MlPolyAggregator(initial)
    admitted = False
    preds = np.empty(len(frame))
    for i in range(len(frame)):
        if not admitted and late and admit_ts is not None and ts.iloc[i] >= admit_ts:
            agg.admit(late)
            admitted = True
        forecasts = {name: float(frame[name].iloc[i]) for name in agg.state.names}
        preds[i] = agg.update(forecasts, float(y[i]), timestamp=str(ts.iloc[i]))
    out = pd.DataFrame({"timestamp": ts.dt.strftime("%Y-%m-%dT%H:%M:%SZ"),
                        "y": y, "forecast": preds})
    out.to_csv(output, index=False)
    if weights_output:
        agg.weight_frame().to_csv(weights_output, index=False)
    m = metrics(y, preds)
    click.echo(f"mixture rmse {m.rmse:.2f}, mape {m.mape:.2f}% -> {output}")


@main.command()
@click.option("--actuals", required=True, type=click.Path(exists=True),
              help="CSV with timestamp,y (any extra columns ignored)")
@click.option("--forecasts", required=True, type=click.Path(exists=True),
              help="CSV with timestamp,forecast")
def score(actuals, forecasts):
    """RMSE/MAPE of a forecast stream against actuals (joined on timestamp)."""
    a = pd.read_csv(actuals)[["timestamp", "y"]]
    f = pd.read_csv(forecasts)[["timestamp", "forecast"]]
    merged = a.merge(f, on="timestamp")
    if len(merged) == 0:
        raise click.ClickException("no overlapping timestamps")
    m = metrics(merged["y"].to_numpy(), merged["forecast"].to_numpy())
    click.echo(json.dumps({"rmse": m.rmse, "mape": m.mape, "n": m.n,
                           "n_mape_excluded": m.n_mape_excluded}, indent=2))


@main.command()
@click.option("--seed", default=0, show_default=True)
@click.option("--output-dir", required=True, type=click.Path())
@click.option("--rho", default=1.6, show_default=True)
@click.option("--break-depth", default=0.15, show_default=True)
@click.option("--pre-days", default=730, show_default=True)
@click.option("--post-days", default=60, show_default=True)
@click.option("--offset-days", default=7, show_default=True)
def synth(seed, output_dir, rho, break_depth, pre_days, post_days, offset_days):
    """Generate a synthetic twin-series dataset (source.csv, target.csv)."""
    scenario = Scenario(rho=rho, break_depth=break_depth, pre_break_days=pre_days,
                        post_break_days=post_days, break_offset_days=offset_days)
    src, tgt = gen_synthetic(scenario, seed=seed)
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    src.to_csv(outdir / "source.csv")
    tgt.to_csv(outdir / "target.csv")
    src_break, tgt_break = scenario.break_timestamps()
    meta = dataclasses.asdict(scenario)
    meta["source_break"] = str(src_break)
    meta["target_break"] = str(tgt_break)
    meta["seed"] = seed
    (outdir / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    click.echo(f"wrote {len(src)} rows per country to {outdir}")


def _plan_from_config(cfg):
    plan_cfg = dict(cfg["plan"])
    periods = {name: tuple(rng) for name, rng in plan_cfg.pop("periods").items()}
    experts = tuple(plan_cfg.pop("experts", list(BacktestPlan.__dataclass_fields__["experts"].default)))
    instants = plan_cfg.pop("instants", None)
    return BacktestPlan(periods=periods, experts=experts,
                        instants=tuple(instants) if instants else None, **plan_cfg)


@main.command(name="backtest")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True),
              help="JSON/TOML config; omit to run the synthetic preset")
@click.option("--seed", default=0, show_default=True, help="seed for the synthetic preset")
@click.option("--output-dir", required=True, type=click.Path())
@click.option("--audit-draws", default=20, show_default=True)
def backtest_cmd(config_path, seed, output_dir, audit_draws):
    """Run the full expert comparison; exit 0 only if the leakage audit passes."""
    if config_path is None:
        scenario, plan = synthetic_preset()
        source, target = gen_synthetic(scenario, seed=seed)
    else:
        cfg = _load_config(config_path)
        if cfg.get("synthetic"):
            scenario, plan = synthetic_preset()
            source, target = gen_synthetic(scenario, seed=cfg.get("seed", seed))
        else:
            plan = _plan_from_config(cfg)
            period = int(cfg.get("period_minutes", 60))
            target = TimeTable.read_csv(cfg["data"], period)
            source = (TimeTable.read_csv(cfg["source_data"], period)
                      if cfg.get("source_data") else None)

    result = backtest(plan, target, source_data=source, audit_draws=audit_draws,
                      raise_on_leak=False)
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    result.scorecard.to_csv(outdir / "scorecard.csv")
    result.archive.to_csv(outdir / "archive.csv", index=False)
    if len(result.weights):
        result.weights.to_csv(outdir / "weights.csv", index=False)
    summary = {"rho": result.rho, "audit_draws": result.audit_draws,
               "audit_passed": bool(result.audit_passed)}
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    click.echo(result.scorecard.frame.to_string(index=False))
    if not result.audit_passed:
        click.echo("LEAKAGE AUDIT FAILED", err=True)
        sys.exit(1)
    click.echo("leakage audit passed")


if __name__ == "__main__":
    main()
