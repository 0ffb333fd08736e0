"""Online estimation of the multiplicative correction over a frozen effect map.

Two engines estimate theta_t in E[y_t] = theta_t' f(x_t):

* exponential-forgetting least squares, one forgetting factor mu;
* a Kalman filter on the random-walk state model, parameterized in scaled
  units (P* = P/sigma^2, Q* = Q/sigma^2) so only the starred quantities and
  the initial mean matter.

The filter comes in static (Q*=0, ridge-equivalent), dynamic (Q*>0) and
break variants (a one-off covariance injected at a known step). Hyperparameters
are set by maximum likelihood: theta_1 has a closed-form generalized
least-squares solution because every one-step prediction mean is affine in it,
and the diagonal of Q* is found by a greedy coordinate search over powers of
two, profiling the observation variance out of the Gaussian likelihood.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import (
    NonFiniteInput,
    NonFiniteLikelihood,
    NoUsableRows,
    SingularGram,
    SingularSystem,
)
from .validation import as_float_array, check_finite, check_square, symmetrize

# Relative improvement a greedy candidate must show to displace the incumbent.
_GREEDY_TOL = 1e-9
# Floor on the profiled variance so noiseless data keeps likelihoods finite
# and comparable (differences then reduce to the log-variance-scale term).
_VARIANCE_FLOOR_REL = 1e-18


# --------------------------------------------------------------------------
# Kalman filter
# --------------------------------------------------------------------------

@dataclass
class KalmanState:
    theta: np.ndarray
    P: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.theta = as_float_array(self.theta, "theta", ndim=1)
        self.P = check_square(self.P, dim=self.theta.size, name="P")


@dataclass
class KalmanConfig:
    """Hyperparameters of the scaled filter.

    break_time is a 0-based step index within the stream the filter runs on;
    at that step the state-noise covariance is replaced by break_Q_star
    (identity when None), letting the state jump without any prior on the
    direction of the jump.
    """

    theta1: np.ndarray
    P1_star: np.ndarray
    Q_star: np.ndarray
    break_time: int = None
    break_Q_star: np.ndarray = None

    def __post_init__(self):
        self.theta1 = as_float_array(self.theta1, "theta1", ndim=1)
        k = self.theta1.size
        self.P1_star = check_square(self.P1_star, dim=k, name="P1_star")
        self.Q_star = check_square(self.Q_star, dim=k, name="Q_star")
        if self.break_Q_star is not None:
            self.break_Q_star = check_square(self.break_Q_star, dim=k, name="break_Q_star")

    @property
    def dim(self):
        return self.theta1.size

    @classmethod
    def static(cls, dim, theta1=None):
        """Q*=0 with unit prior covariance: the ridge-equivalent setting."""
        theta1 = np.zeros(dim) if theta1 is None else as_float_array(theta1, ndim=1)
        return cls(theta1=theta1, P1_star=np.eye(dim), Q_star=np.zeros((dim, dim)))

    @classmethod
    def dynamic(cls, q_diag, theta1=None):
        q_diag = as_float_array(q_diag, "q_diag", ndim=1)
        dim = q_diag.size
        theta1 = np.zeros(dim) if theta1 is None else as_float_array(theta1, ndim=1)
        return cls(theta1=theta1, P1_star=np.eye(dim), Q_star=np.diag(q_diag))

    def with_break(self, break_time, break_Q_star=None):
        return replace(self, break_time=break_time, break_Q_star=break_Q_star)

    def q_at(self, t):
        if self.break_time is not None and t == self.break_time:
            if self.break_Q_star is None:
                return np.eye(self.dim)
            return self.break_Q_star
        return self.Q_star

    # JSON wire format: the Q* diagonal travels as log2 exponents.
    def to_dict(self):
        d = {
            "theta1": self.theta1.tolist(),
            "P1_star": self.P1_star.tolist(),
            "break_time": None if self.break_time is None else int(self.break_time),
            "break_Q_star": None if self.break_Q_star is None else self.break_Q_star.tolist(),
        }
        diag = np.diag(self.Q_star)
        if np.allclose(self.Q_star, np.diag(diag), atol=0.0):
            d["q_diag_log2"] = [None if v == 0.0 else float(np.log2(v)) for v in diag]
        else:
            d["Q_star"] = self.Q_star.tolist()
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        theta1 = np.asarray(d["theta1"], dtype=float)
        if "q_diag_log2" in d:
            Q = np.diag([0.0 if e is None else 2.0 ** e for e in d["q_diag_log2"]])
        else:
            Q = np.asarray(d["Q_star"], dtype=float)
        breakq = d.get("break_Q_star")
        return cls(theta1=theta1,
                   P1_star=np.asarray(d["P1_star"], dtype=float),
                   Q_star=Q,
                   break_time=d.get("break_time"),
                   break_Q_star=None if breakq is None else np.asarray(breakq, dtype=float))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def kalman_step(state, f, y, Q_star=None, sigma2=1.0):
    """One predict/update cycle.

    Returns (prediction mean, prediction variance, new state). With the
    default sigma2=1 the filter runs in scaled units and the returned variance
    is the scale factor v* = 1 + f' P* f. The covariance update uses the
    Joseph form so P stays positive semidefinite under round-off; Q_star is
    added after the measurement update.
    """
    f = check_finite(as_float_array(f, "f", ndim=1), "f")
    if not np.isfinite(y):
        raise NonFiniteInput("observation y is not finite")
    theta, P = state.theta, state.P
    Pf = P @ f
    gain_denom = float(f @ Pf) + sigma2
    mean = float(theta @ f)
    variance = sigma2 + float(f @ Pf)
    K = Pf / gain_denom
    theta_new = theta + K * (y - mean)
    IKf = np.eye(f.size) - np.outer(K, f)
    P_new = IKf @ P @ IKf.T + sigma2 * np.outer(K, K)
    P_new = symmetrize(P_new)
    if Q_star is not None:
        P_new = P_new + Q_star
    return mean, variance, KalmanState(theta_new, P_new, state.t + 1)


@dataclass
class AdaptiveRun:
    """One-step-ahead forecasts plus the state trajectory that produced them."""

    forecasts: np.ndarray
    variance_scales: np.ndarray
    thetas: np.ndarray       # theta used at each step (before that step's update)
    P_diags: np.ndarray
    index: pd.Index = None

    def to_frame(self):
        k = self.thetas.shape[1]
        data = {"forecast": self.forecasts, "variance_scale": self.variance_scales}
        for j in range(k):
            data[f"theta_{j}"] = self.thetas[:, j]
        for j in range(k):
            data[f"P_diag_{j}"] = self.P_diags[:, j]
        idx = self.index if self.index is not None else pd.RangeIndex(len(self.forecasts))
        frame = pd.DataFrame(data, index=idx)
        frame.index.name = "t"
        return frame


class KalmanFilterAdapter:
    """Sequential wrapper around kalman_step driven by a KalmanConfig."""

    def __init__(self, config):
        self.config = config
        self.state = KalmanState(config.theta1.copy(), config.P1_star.copy())

    def step(self, f, y):
        mean, var, self.state = kalman_step(self.state, f, y, Q_star=self.config.q_at(self.state.t))
        return mean, var

    def run(self, F, y, index=None):
        F = check_finite(as_float_array(F, "F", ndim=2), "F")
        y = check_finite(as_float_array(y, "y", ndim=1), "y")
        n, k = F.shape
        forecasts = np.empty(n)
        variances = np.empty(n)
        thetas = np.empty((n, k))
        pdiags = np.empty((n, k))
        for t in range(n):
            thetas[t] = self.state.theta
            pdiags[t] = np.diag(self.state.P)
            forecasts[t], variances[t] = self.step(F[t], y[t])
        return AdaptiveRun(forecasts, variances, thetas, pdiags, index=index)


def static_kalman_fit(F, y):
    """Run the static filter (Q*=0, P1*=I, theta1=0) over the history.

    The returned estimate equals the ridge regularized least-squares solution
    argmin sum (y_s - theta' f_s)^2 + ||theta||^2.
    """
    F = as_float_array(F, "F", ndim=2)
    config = KalmanConfig.static(F.shape[1])
    adapter = KalmanFilterAdapter(config)
    for t in range(F.shape[0]):
        adapter.step(F[t], y[t])
    return adapter.state.theta


# --------------------------------------------------------------------------
# likelihood machinery
# --------------------------------------------------------------------------

def kalman_loglik(config, F, y, sigma2=None):
    """Gaussian log-likelihood of the one-step-ahead prediction errors.

    With sigma2 given, evaluates the exact Gaussian density with variances
    sigma2 * v*_t. With sigma2=None the observation variance is profiled out
    by its closed-form maximizer (the mean squared standardized innovation).
    """
    F = check_finite(as_float_array(F, "F", ndim=2), "F")
    y = check_finite(as_float_array(y, "y", ndim=1), "y")
    if len(y) == 0:
        raise NoUsableRows("empty history")
    adapter = KalmanFilterAdapter(config)
    n = len(y)
    e = np.empty(n)
    v = np.empty(n)
    for t in range(n):
        mean, var = adapter.step(F[t], y[t])
        e[t] = y[t] - mean
        v[t] = var
    if sigma2 is not None:
        ll = -0.5 * float(np.sum(np.log(2.0 * np.pi * sigma2 * v) + e**2 / (sigma2 * v)))
    else:
        ll = _profiled_loglik(float(np.sum(e**2 / v)), float(np.sum(np.log(v))), n,
                              scale=float(np.mean(y**2)))
    if not np.isfinite(ll):
        raise NonFiniteLikelihood(f"log-likelihood is {ll}")
    return ll


def _profiled_loglik(sum_e2_over_v, sum_log_v, n, scale):
    sigma2_hat = max(sum_e2_over_v / n, _VARIANCE_FLOOR_REL * max(scale, 1e-300))
    return -0.5 * (n * np.log(2.0 * np.pi * sigma2_hat) + sum_log_v + n)


def _affine_filter_batch(F, y, Q_diags, P1=None):
    """Propagate the filter's affine dependence on theta_1 for many diagonal Q*.

    Equivalent to running the filter once per canonical basis vector of
    theta_1 (the columns of A_t), vectorized over basis vectors and over the
    Q* candidates. Returns, per candidate, the accumulated weighted
    normal-equation blocks and variance terms needed for the closed-form
    theta_1 and the profiled likelihood:

        G = sum_t M_t M_t' / v_t,  r = sum_t M_t (y_t - m0_t) / v_t,
        s0 = sum_t (y_t - m0_t)^2 / v_t,  slv = sum_t log v_t,

    where the prediction mean at step t is m0_t + M_t' theta_1 and v_t is the
    (theta_1-independent) variance scale.
    """
    F = check_finite(as_float_array(F, "F", ndim=2), "F")
    y = check_finite(as_float_array(y, "y", ndim=1), "y")
    Q_diags = as_float_array(Q_diags, "Q_diags", ndim=2)
    n, k = F.shape
    C = Q_diags.shape[0]
    eye = np.eye(k)
    P = np.broadcast_to(eye if P1 is None else P1, (C, k, k)).copy()
    A = np.broadcast_to(eye, (C, k, k)).copy()
    b = np.zeros((C, k))
    G = np.zeros((C, k, k))
    r = np.zeros((C, k))
    s0 = np.zeros(C)
    slv = np.zeros(C)
    rng_k = np.arange(k)
    for t in range(n):
        f = F[t]
        Pf = P @ f                                    # (C, k)
        v = 1.0 + Pf @ f                              # (C,)
        m0 = b @ f                                    # (C,)
        M = A.transpose(0, 2, 1) @ f                  # (C, k): f' A
        resid0 = y[t] - m0
        w = 1.0 / v
        Mw = M * w[:, None]
        G += Mw[:, :, None] * M[:, None, :]
        r += Mw * resid0[:, None]
        s0 += w * resid0**2
        slv += np.log(v)
        K = Pf * w[:, None]
        IKf = eye[None, :, :] - K[:, :, None] * f[None, None, :]
        P = IKf @ P @ IKf.transpose(0, 2, 1) + K[:, :, None] * K[:, None, :]
        P = (P + P.transpose(0, 2, 1)) / 2.0
        P[:, rng_k, rng_k] += Q_diags
        b = b + K * resid0[:, None]
        A = A - K[:, :, None] * M[:, None, :]
    return G, r, s0, slv


def solve_theta1(Q_star, F, y, P1_star=None):
    """Closed-form likelihood-optimal initial mean for a given Q*.

    Every one-step prediction mean is affine in theta_1 while the prediction
    variances do not depend on it, so maximizing the Gaussian likelihood is a
    generalized least-squares problem with weights 1/v*_t. The affine map is
    extracted by running the filter once per canonical basis vector of
    theta_1; the normal equations are then solved directly.
    """
    F = as_float_array(F, "F", ndim=2)
    Q_star = check_square(Q_star, dim=F.shape[1], name="Q_star")
    diag = np.diag(Q_star)
    if not np.allclose(Q_star, np.diag(diag), atol=0.0):
        raise ValueError("solve_theta1 supports diagonal Q*")
    G, r, _, _ = _affine_filter_batch(F, y, diag.reshape(1, -1), P1=P1_star)
    try:
        theta1 = np.linalg.solve(G[0], r[0])
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"normal equations for theta_1 are singular: {exc}") from None
    if not np.all(np.isfinite(theta1)):
        raise SingularSystem("normal equations for theta_1 produced non-finite values")
    return theta1


def _candidate_logliks(F, y, Q_diags):
    """Profiled log-likelihood with theta_1 solved per diagonal-Q* candidate."""
    n = len(y)
    scale = float(np.mean(np.asarray(y, dtype=float) ** 2))
    G, r, s0, slv = _affine_filter_batch(F, y, Q_diags)
    C = Q_diags.shape[0]
    lls = np.full(C, -np.inf)
    try:
        theta1 = np.linalg.solve(G, r[..., None])[..., 0]
        ok = np.all(np.isfinite(theta1), axis=1)
    except np.linalg.LinAlgError:
        theta1 = np.zeros_like(r)
        ok = np.zeros(C, dtype=bool)
        for c in range(C):
            try:
                theta1[c] = np.linalg.solve(G[c], r[c])
                ok[c] = np.all(np.isfinite(theta1[c]))
            except np.linalg.LinAlgError:
                pass
    sse = s0 - np.einsum("ck,ck->c", theta1, r)
    for c in range(C):
        if ok[c]:
            lls[c] = _profiled_loglik(max(float(sse[c]), 0.0), float(slv[c]), n, scale)
    return lls, theta1


@dataclass
class GreedyQResult:
    q_diag: np.ndarray
    theta1: np.ndarray
    loglik: float
    n_evaluations: int
    n_rounds: int

    @property
    def Q_star(self):
        return np.diag(self.q_diag)


def greedy_search_q(F, y, exponents=range(-30, 1), max_rounds=30):
    """Greedy coordinate search for the diagonal of Q*.

    Starts from Q*=0; each round evaluates, for every coordinate, every
    alternative value in {0} union {2^j for the given exponents} (theta_1
    re-solved per candidate), and keeps the best strictly improving change.
    Stops when nothing improves. Rounds are capped so the evaluation count
    stays below 10^4 at the 10-dimensional default. Ties break toward the
    smaller candidate value.
    """
    F = as_float_array(F, "F", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    n, k = F.shape
    if n < 10 * k:
        raise NoUsableRows(f"greedy search needs at least {10 * k} rows, got {n}")
    values = np.concatenate([[0.0], np.power(2.0, np.asarray(list(exponents), dtype=float))])
    values = np.unique(values)

    q = np.zeros(k)
    lls, thetas = _candidate_logliks(F, y, q.reshape(1, -1))
    best_ll = float(lls[0])
    best_theta = thetas[0]
    n_eval = 1
    rounds = 0
    for _ in range(max_rounds):
        coords, vals = [], []
        for i in range(k):
            for v in values:
                if v != q[i]:
                    coords.append(i)
                    vals.append(v)
        cand = np.tile(q, (len(coords), 1))
        cand[np.arange(len(coords)), coords] = vals
        lls, thetas = _candidate_logliks(F, y, cand)
        n_eval += len(coords)
        # first strict max wins: candidates are ordered by coordinate then
        # ascending value, so ties fall to the smaller exponent
        j = int(np.argmax(lls))
        if not np.isfinite(lls[j]) or lls[j] <= best_ll + _GREEDY_TOL * max(1.0, abs(best_ll)):
            break
        q = cand[j]
        best_ll = float(lls[j])
        best_theta = thetas[j]
        rounds += 1
    return GreedyQResult(q_diag=q, theta1=best_theta, loglik=best_ll,
                         n_evaluations=n_eval, n_rounds=rounds)


# --------------------------------------------------------------------------
# exponential-forgetting least squares
# --------------------------------------------------------------------------

@dataclass
class ExpLsConfig:
    mu: float
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"forgetting factor mu must be >= 0, got {self.mu}")


class ExpLsEstimator:
    """Least squares with exponentially decaying sample weights.

    Maintains decayed normal equations: each update multiplies the Gram
    matrix and moment vector by exp(-mu), then adds the new rank-one term.
    The ridge epsilon is applied at solve time only, so it is not decayed.
    """

    def __init__(self, dim, mu, epsilon=1e-8):
        if mu < 0:
            raise ValueError(f"forgetting factor mu must be >= 0, got {mu}")
        self.mu = mu
        self.epsilon = epsilon
        self.G = np.zeros((dim, dim))
        self.b = np.zeros(dim)
        self._theta = None

    @property
    def dim(self):
        return self.b.size

    @property
    def theta(self):
        if self._theta is None:
            A = self.G + self.epsilon * np.eye(self.dim)
            if np.linalg.cond(A) > 1e12:
                raise SingularGram(
                    "decayed Gram matrix is singular; feed more rows or set a ridge epsilon")
            self._theta = np.linalg.solve(A, self.b)
        return self._theta

    def predict(self, f):
        return float(self.theta @ np.asarray(f, dtype=float))

    def update(self, f, y):
        f = check_finite(as_float_array(f, "f", ndim=1), "f")
        decay = np.exp(-self.mu)
        self.G *= decay
        self.G += np.outer(f, f)
        self.b *= decay
        self.b += f * y
        self._theta = None

    def run(self, F, y, index=None):
        F = check_finite(as_float_array(F, "F", ndim=2), "F")
        y = check_finite(as_float_array(y, "y", ndim=1), "y")
        n, k = F.shape
        forecasts = np.empty(n)
        thetas = np.empty((n, k))
        for t in range(n):
            try:
                theta = self.theta
            except SingularGram:
                theta = np.zeros(k)
            thetas[t] = theta
            forecasts[t] = theta @ F[t]
            self.update(F[t], y[t])
        return AdaptiveRun(forecasts, np.full(n, np.nan), thetas,
                           np.full((n, k), np.nan), index=index)


def expls_fit(F, y, mu, epsilon=0.0):
    """Forgetting-factor least-squares estimate after consuming the history."""
    F = as_float_array(F, "F", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    if len(y) == 0:
        raise NoUsableRows("expls_fit needs at least one row")
    est = ExpLsEstimator(F.shape[1], mu, epsilon=epsilon)
    for t in range(len(y)):
        est.update(F[t], y[t])
    return est.theta


def tune_forgetting(F, y, n_validation, grid=None, epsilon=1e-8):
    """Pick mu by one-step-ahead RMSE on the trailing validation window."""
    if grid is None:
        grid = [0.0] + [2.0 ** -k for k in range(16, 1, -1)]
    F = as_float_array(F, "F", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    n = len(y)
    n_validation = min(n_validation, n - 1)
    rmses = []
    for mu in grid:
        run = ExpLsEstimator(F.shape[1], mu, epsilon=epsilon).run(F, y)
        err = y[n - n_validation:] - run.forecasts[n - n_validation:]
        rmses.append(float(np.sqrt(np.mean(err**2))))
    best = int(np.argmin(rmses))
    return grid[best], dict(zip(grid, rmses))


# --------------------------------------------------------------------------
# streaming over feature tables
# --------------------------------------------------------------------------

def run_adaptive(model, stream, config, target="load_mw"):
    """One-step-ahead adaptive forecasts of a fitted model over a stream.

    The stream must be chronologically ordered; rows flagged unusable by the
    lag warm-up (lag_ok == 0) are dropped before filtering. Each forecast is
    produced before the corresponding observation updates the state, and the
    full state trajectory is returned for inspection/export.
    """
    df = stream.frame if hasattr(stream, "frame") else stream
    if "lag_ok" in df.columns:
        df = df[df["lag_ok"] > 0]
    if len(df) == 0:
        raise NoUsableRows("stream has no usable rows")
    F = model.effect_values(df)
    y = df[target].to_numpy(dtype=float)
    if isinstance(config, ExpLsConfig):
        est = ExpLsEstimator(F.shape[1], config.mu, epsilon=config.epsilon)
        return est.run(F, y, index=df.index)
    if isinstance(config, KalmanConfig):
        return KalmanFilterAdapter(config).run(F, y, index=df.index)
    raise TypeError(f"unsupported adaptation config {type(config).__name__}")
