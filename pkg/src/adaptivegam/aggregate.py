"""Online aggregation of expert forecasts with the ML-Poly weighting rule.

Weights follow the polynomially weighted average with multiple learning
rates: an expert's weight is proportional to the positive part of its
cumulative regret times an adaptive per-expert learning rate, regrets being
measured through the gradient of the squared loss at the mixture forecast.
No tuning parameter is needed. Experts can join mid-stream: each entrant
receives a uniform 1/N share of the mass and incumbents keep the rest in
proportion to their current weights.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DuplicateExpert, MissingExpert, NoActiveExpert


@dataclass
class MixtureState:
    names: list
    weights: np.ndarray
    regrets: np.ndarray
    sq_regrets: np.ndarray
    active: np.ndarray
    t: int = 0
    loss_range: float = None  # diagnostic scale B; never used for clipping

    def copy(self):
        return MixtureState(list(self.names), self.weights.copy(), self.regrets.copy(),
                            self.sq_regrets.copy(), self.active.copy(), self.t, self.loss_range)

    def weight_of(self, name):
        return float(self.weights[self.names.index(name)])


def initial_state(names, active=None, loss_range=None):
    names = list(names)
    if len(set(names)) != len(names):
        raise DuplicateExpert(f"duplicate expert names in {names}")
    n = len(names)
    active_mask = np.ones(n, dtype=bool)
    if active is not None:
        active_mask = np.array([name in set(active) for name in names])
    if not active_mask.any():
        raise NoActiveExpert("at least one expert must start active")
    weights = np.where(active_mask, 1.0 / active_mask.sum(), 0.0)
    return MixtureState(names=names, weights=weights,
                        regrets=np.zeros(n), sq_regrets=np.zeros(n),
                        active=active_mask, loss_range=loss_range)


def _forecast_vector(state, expert_forecasts):
    if isinstance(expert_forecasts, dict):
        vec = np.zeros(len(state.names))
        for i, name in enumerate(state.names):
            if state.active[i]:
                if name not in expert_forecasts:
                    raise MissingExpert(f"active expert {name!r} supplied no forecast")
                vec[i] = expert_forecasts[name]
        return vec
    vec = np.asarray(expert_forecasts, dtype=float)
    if vec.size != len(state.names):
        raise MissingExpert(f"expected {len(state.names)} forecasts, got {vec.size}")
    return vec


def mlpoly_update(state, expert_forecasts, y):
    """One aggregation round: mixture forecast, then regret/weight update.

    The forecast uses the weights computed from information through t-1. The
    gradient losses are l_j = 2 (yhat - y) * yhat_j, the mixture term replaces
    yhat_j by yhat, learning rates are 1 / (1 + sum of squared instantaneous
    regrets), and next weights are proportional to rate * positive-part
    regret, falling back to uniform over active experts when every positive
    part is zero.
    """
    if not state.active.any():
        raise NoActiveExpert("no active experts")
    preds = _forecast_vector(state, expert_forecasts)
    if not np.all(np.isfinite(preds[state.active])):
        raise NoActiveExpert("active experts must supply finite forecasts")
    forecast = float(state.weights @ preds)

    grad = 2.0 * (forecast - y)
    inst_regret = np.where(state.active, grad * (forecast - preds), 0.0)
    regrets = state.regrets + inst_regret
    sq_regrets = state.sq_regrets + inst_regret**2
    rates = 1.0 / (1.0 + sq_regrets)
    raw = np.where(state.active, rates * np.maximum(regrets, 0.0), 0.0)
    total = raw.sum()
    if total > 0.0:
        weights = raw / total
    else:
        weights = np.where(state.active, 1.0 / state.active.sum(), 0.0)
    new_state = MixtureState(names=list(state.names), weights=weights, regrets=regrets,
                             sq_regrets=sq_regrets, active=state.active.copy(),
                             t=state.t + 1, loss_range=state.loss_range)
    return forecast, new_state


def admit_experts(state, new_names, uniform_share=None):
    """Admit experts mid-stream with the uniform-share entry rule.

    Each entrant receives uniform_share (default 1/N_total after admission)
    and the incumbents share the remaining mass proportionally to their
    current weights. Entrants start with zero regret and a fresh learning
    rate. Total mass is conserved exactly.
    """
    new_names = list(new_names)
    if len(set(new_names)) != len(new_names):
        raise DuplicateExpert(f"duplicate names in admission batch {new_names}")
    if not new_names:
        return state.copy()
    for name in new_names:
        if name in state.names and state.active[state.names.index(name)]:
            raise DuplicateExpert(f"expert {name!r} is already active")
    appended = [n for n in new_names if n not in state.names]

    names = list(state.names) + appended
    n_active_after = int(state.active.sum()) + len(new_names)
    share = uniform_share if uniform_share is not None else 1.0 / n_active_after

    weights = np.concatenate([state.weights, np.zeros(len(appended))])
    regrets = np.concatenate([state.regrets, np.zeros(len(appended))])
    sq_regrets = np.concatenate([state.sq_regrets, np.zeros(len(appended))])
    active = np.concatenate([state.active, np.ones(len(appended), dtype=bool)])

    old_mass = weights.sum()
    remaining = 1.0 - share * len(new_names)
    if old_mass > 0:
        weights = weights * (remaining / old_mass)
    for name in new_names:
        i = names.index(name)
        weights[i] = share
        regrets[i] = 0.0
        sq_regrets[i] = 0.0
        active[i] = True
    weights = weights / weights.sum()
    return MixtureState(names=names, weights=weights, regrets=regrets,
                        sq_regrets=sq_regrets, active=active, t=state.t,
                        loss_range=state.loss_range)


class MlPolyAggregator:
    """Stateful convenience wrapper recording the weight trajectory."""

    def __init__(self, names, active=None, loss_range=None):
        self.state = initial_state(names, active=active, loss_range=loss_range)
        self.history = []

    def update(self, expert_forecasts, y, timestamp=None):
        forecast, self.state = mlpoly_update(self.state, expert_forecasts, y)
        self.history.append((timestamp if timestamp is not None else self.state.t - 1,
                             dict(zip(self.state.names, self.state.weights))))
        return forecast

    def admit(self, new_names, uniform_share=None):
        self.state = admit_experts(self.state, new_names, uniform_share=uniform_share)

    def weight_frame(self):
        rows = []
        for t, weights in self.history:
            for name, w in weights.items():
                rows.append({"t": t, "expert": name, "weight": w})
        return pd.DataFrame(rows)


def saturday_expert(model, rows, day_type_column="day_type", saturday=6):
    """Forecasts of the fitted model with every day treated as a Saturday.

    Forcing the day-type column rewires both the calendar intercept block and
    any per-day-type slope; all other covariates are untouched.
    """
    df = rows.frame if hasattr(rows, "frame") else rows
    forced = df.copy()
    forced[day_type_column] = saturday
    return model.predict(forced)
