"""
Off-policy value estimators: importance sampling, weighted IS, regression, doubly robust and
its variants, plus confidence bounds on their averages.

All estimators are computed on whole datasets at once; the per-trajectory functions wrap a
single-trajectory dataset.
"""
import logging
import math
import numbers
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.utils import check_scalar

from offpolicy.mdp_core import Dataset, QFunction, importance_ratios
from offpolicy.model_fit import FittedModel, constant_baseline_q, q_from_model

logger = logging.getLogger(__name__)

METHOD_IDS = ("is", "step_is", "wis", "step_wis", "reg", "dr", "dr_bsl", "dr_v2", "kfold_dr")
AVERAGING_METHODS = ("is", "step_is", "dr", "dr_bsl", "dr_v2", "kfold_dr")
CROP_WARNING_FRACTION = 0.1


@dataclass(frozen=True)
class EstimatorParams:
    """Inputs shared by the estimator family.

    ``fitter`` maps a training Dataset to a QFunction (or a FittedModel for the DR-v2 variant)
    and is used by k-fold DR. ``r_floor``/``scale`` define the DR-bsl constant baseline.
    """

    pi1: object
    gamma: float = 1.0
    qhat: Optional[QFunction] = None
    model: Optional[FittedModel] = None
    fitter: Optional[Callable] = None
    k: int = 2
    kfold_variant: str = "dr"
    r_floor: Optional[float] = None
    scale: float = 1.0
    horizon: Optional[int] = None


@dataclass(frozen=True)
class EstimatorReport:
    """Result of one estimator on one dataset."""

    method: str
    point_estimate: float
    stderr: float
    n: int
    per_trajectory_values: np.ndarray = field(repr=False)
    crop_count: int = 0
    value_range: Optional[tuple] = None
    flags: tuple = ()

    def as_row(self):
        return {
            "method": self.method,
            "n": self.n,
            "point": self.point_estimate,
            "stderr": self.stderr,
            "crop_count": self.crop_count,
        }


@dataclass(frozen=True)
class CIResult:
    """Two-sided confidence interval."""

    lower: float
    upper: float
    method: str
    parameter: float


def _discounts(gamma, horizon):
    return gamma ** np.arange(horizon)


def _stderr(values):
    if len(values) < 2:
        return math.nan
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _v_hat(qhat, pi1, t, states):
    """V-hat(t, s) = sum_a pi1(a|s) Q-hat(t, s, a); zero beyond the horizon."""
    q = qhat.q_batch(t, states)
    if not q.any():
        return np.zeros(len(states))
    return (pi1.probs_batch(states) * q).sum(axis=1)


def _logged_q(qhat, t, states, actions):
    q = qhat.q_batch(t, states)
    return q[np.arange(len(actions)), actions]


def step_is_values(dataset, pi1, gamma):
    """Closed form sum_t gamma^(t-1) rho_{1:t} r_t per trajectory."""
    cum = np.cumprod(importance_ratios(dataset, pi1), axis=1)
    return (cum * dataset.rewards) @ _discounts(gamma, dataset.horizon)


def _dr_values(dataset, pi1, gamma, qhat):
    rho = importance_ratios(dataset, pi1)
    value = np.zeros(len(dataset))
    for t in range(dataset.horizon, 0, -1):
        states = dataset.states[:, t - 1]
        actions = dataset.actions[:, t - 1]
        q_logged = _logged_q(qhat, t, states, actions)
        value = _v_hat(qhat, pi1, t, states) + rho[:, t - 1] * (
            dataset.rewards[:, t - 1] + gamma * value - q_logged
        )
    return value


def _dr_v2_values(dataset, pi1, gamma, model, qhat=None):
    qhat = q_from_model(model, pi1) if qhat is None else qhat
    rho = importance_ratios(dataset, pi1)
    value = np.zeros(len(dataset))
    for t in range(dataset.horizon, 0, -1):
        states = dataset.states[:, t - 1]
        actions = dataset.actions[:, t - 1]
        next_states = dataset.next_states[:, t - 1]
        correction = model.reward_batch(states, actions) + gamma * _v_hat(qhat, pi1, t + 1,
                                                                         next_states)
        value = _v_hat(qhat, pi1, t, states) + rho[:, t - 1] * (
            dataset.rewards[:, t - 1] + gamma * value - correction
        )
    return value


def _wis_contributions(dataset, pi1, gamma, stepwise):
    """Per-trajectory weighted contributions; their mean is the WIS estimate."""
    cum = np.cumprod(importance_ratios(dataset, pi1), axis=1)
    weights = cum.mean(axis=0)
    zero = np.flatnonzero(weights <= 0)
    flags = tuple(f"zero_weight_horizon={t + 1}" for t in zero)
    if flags:
        logger.warning("WIS weights vanish at horizons %s", [int(t) + 1 for t in zero])
    safe = np.where(weights > 0, weights, 1.0)
    normalized = np.where(weights > 0, cum / safe, 0.0)
    if stepwise:
        return (normalized * dataset.rewards) @ _discounts(gamma, dataset.horizon), flags
    returns = dataset.returns(gamma)
    return normalized[:, -1] * returns, flags


def _resolve_qhat(params, dataset):
    if params.qhat is not None:
        return params.qhat
    if params.model is not None:
        return q_from_model(params.model, params.pi1, params.horizon)
    raise ValueError("this estimator needs params.qhat or params.model")


def trajectory_values(dataset, method, params):
    """
    Per-trajectory estimates of an averaging method (before cropping).

    Args:
        dataset: Dataset
        method (str): one of ``is``, ``step_is``, ``dr``, ``dr_bsl``, ``dr_v2``, ``reg``
        params: EstimatorParams

    Returns:
        np.ndarray: (n,) values whose mean is the estimate
    """
    pi1, gamma = params.pi1, params.gamma
    if method == "is":
        cum = np.prod(importance_ratios(dataset, pi1), axis=1)
        return cum * dataset.returns(gamma)
    if method == "step_is":
        return step_is_values(dataset, pi1, gamma)
    if method == "dr":
        return _dr_values(dataset, pi1, gamma, _resolve_qhat(params, dataset))
    if method == "dr_bsl":
        if params.r_floor is None:
            raise ValueError("dr_bsl needs params.r_floor")
        baseline = constant_baseline_q(params.r_floor, params.scale, gamma, dataset.horizon,
                                       pi1.n_actions)
        return _dr_values(dataset, pi1, gamma, baseline)
    if method == "dr_v2":
        if params.model is None:
            raise ValueError("dr_v2 needs params.model")
        return _dr_v2_values(dataset, pi1, gamma, params.model, params.qhat)
    if method == "reg":
        qhat = _resolve_qhat(params, dataset)
        return _v_hat(qhat, pi1, 1, dataset.initial_states)
    raise ValueError(f"no per-trajectory values for method {method!r}")


def _single(traj):
    return Dataset.from_trajectories([traj])


def is_trajwise(traj, pi1, gamma):
    """rho_{1:H} times the discounted return."""
    return float(trajectory_values(_single(traj), "is", EstimatorParams(pi1, gamma))[0])


def is_stepwise(traj, pi1, gamma):
    """sum_t gamma^(t-1) rho_{1:t} r_t."""
    return float(step_is_values(_single(traj), pi1, gamma)[0])


def is_stepwise_recursive(traj, pi1, gamma):
    """Step-wise IS through V <- rho_t (r_t + gamma V), from t = H down to 1."""
    rho = importance_ratios(_single(traj), pi1)[0]
    value = 0.0
    for t in range(traj.horizon - 1, -1, -1):
        value = rho[t] * (float(traj.rewards[t]) + gamma * value)
    return value


def dr(traj, qhat, pi1, gamma):
    """
    Doubly robust estimate of one trajectory.

    Backward recursion V <- V-hat(s_t) + rho_t (r_t + gamma V - Q-hat(s_t, a_t)) with V = 0
    after step H.
    """
    return float(_dr_values(_single(traj), pi1, gamma, qhat)[0])


def dr_v2(traj, model, pi1, gamma, qhat=None):
    """DR variant that also subtracts R-hat(s_t, a_t) + gamma V-hat(s_{t+1}) inside the correction."""
    return float(_dr_v2_values(_single(traj), pi1, gamma, model, qhat)[0])


def _report(method, values, n, crop=None, flags=()):
    values = np.asarray(values, dtype=np.float64)
    crop_count = 0
    if crop is not None:
        crop_count = int(np.count_nonzero((values < crop[0]) | (values > crop[1])))
        values = np.clip(values, crop[0], crop[1])
        if crop_count > CROP_WARNING_FRACTION * n:
            logger.warning("%s: %d of %d values cropped", method, crop_count, n)
        if crop_count:
            flags = flags + (f"cropped={crop_count}",)
    return EstimatorReport(
        method=method, point_estimate=float(np.mean(values)), stderr=_stderr(values), n=n,
        per_trajectory_values=values, crop_count=crop_count,
        value_range=None if crop is None else (float(crop[0]), float(crop[1])), flags=flags,
    )


def wis(dataset, pi1, gamma, stepwise=False, crop=None):
    """
    Weighted importance sampling, trajectory-wise or step-wise.

    The normalizers w_t = mean_i rho_{1:t}^(i) couple trajectories, so this is a dataset-level
    estimate. Horizons with w_t = 0 contribute 0 and are flagged. With ``crop`` only the final
    estimate is clipped; the weighted contributions are left uncropped.

    Returns:
        EstimatorReport whose ``per_trajectory_values`` are the weighted contributions
    """
    method = "step_wis" if stepwise else "wis"
    contributions, flags = _wis_contributions(dataset, pi1, gamma, stepwise)
    point = float(np.mean(contributions))
    crop_count = 0
    if crop is not None and not crop[0] <= point <= crop[1]:
        crop_count = 1
        point = float(np.clip(point, crop[0], crop[1]))
        flags = flags + ("cropped=1",)
    return EstimatorReport(
        method=method, point_estimate=point, stderr=_stderr(contributions), n=len(dataset),
        per_trajectory_values=contributions, crop_count=crop_count,
        value_range=None if crop is None else (float(crop[0]), float(crop[1])), flags=flags,
    )


def reg_estimate(model, pi1, horizon, dataset_for_init, value_range=None):
    """
    Regression estimate: V-hat^H of the fitted model averaged over logged initial states.

    Args:
        model: FittedModel
        pi1: target Policy
        horizon (int): evaluation horizon
        dataset_for_init: Dataset whose initial states are averaged
        value_range: optional (v_min, v_max) recorded for confidence bounds; never cropped

    Returns:
        EstimatorReport
    """
    qhat = q_from_model(model, pi1, horizon)
    values = _v_hat(qhat, pi1, 1, dataset_for_init.initial_states)
    report = _report("reg", values, len(dataset_for_init))
    return replace(report, value_range=value_range)


def kfold_dr(dataset, k, fitter, pi1, gamma, variant="dr", crop=None):
    """
    Cross-fitted DR: each of k contiguous folds is evaluated with a Q-hat fitted on the others.

    Folds are equal up to one trajectory, the remainder going to the earlier folds; every
    trajectory enters the final average.

    Args:
        dataset: Dataset, at least k trajectories
        k (int): number of folds, at least 2
        fitter: callable Dataset -> QFunction, or -> FittedModel
        pi1: target Policy
        gamma (float): discount
        variant (str): ``dr`` or ``dr_v2`` (the latter needs a FittedModel from ``fitter``)
        crop: optional (v_min, v_max)

    Returns:
        EstimatorReport
    """
    check_scalar(k, "k", numbers.Integral, min_val=2)
    n = len(dataset)
    if k > n:
        raise ValueError(f"k={k} folds need at least {k} trajectories, got {n}")
    values = np.empty(n)
    indices = np.arange(n)
    for fold_index, fold in enumerate(np.array_split(indices, k)):
        rest = np.setdiff1d(indices, fold, assume_unique=True)
        fitted = fitter(dataset.subset(rest))
        part = dataset.subset(fold)
        if variant == "dr_v2":
            values[fold] = _dr_v2_values(part, pi1, gamma, fitted)
        elif isinstance(fitted, FittedModel):
            values[fold] = _dr_values(part, pi1, gamma, q_from_model(fitted, pi1))
        else:
            values[fold] = _dr_values(part, pi1, gamma, fitted)
        logger.debug("k-fold DR: fold %d/%d done (%d trajectories)", fold_index + 1, k, len(fold))
    return _report("kfold_dr", values, n, crop)


def evaluate(dataset, method, params, crop=None):
    """
    Run one estimator and summarize it.

    Averaging methods (IS family, DR family, k-fold DR) clip every per-trajectory value to
    ``crop``; WIS clips its dataset-level estimate; REG is never clipped.

    Args:
        dataset: Dataset
        method (str): estimator id from METHOD_IDS
        params: EstimatorParams
        crop: (v_min, v_max) or None

    Returns:
        EstimatorReport
    """
    if method not in METHOD_IDS:
        raise ValueError(f"unknown estimator id {method!r}; expected one of {', '.join(METHOD_IDS)}")
    if crop is not None:
        lo, hi = float(crop[0]), float(crop[1])
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"crop bounds must be finite with v_min <= v_max, got {crop}")
        crop = (lo, hi)
    if method in ("wis", "step_wis"):
        return wis(dataset, params.pi1, params.gamma, stepwise=method == "step_wis", crop=crop)
    if method == "kfold_dr":
        if params.fitter is None:
            raise ValueError("kfold_dr needs params.fitter")
        return kfold_dr(dataset, params.k, params.fitter, params.pi1, params.gamma,
                        variant=params.kfold_variant, crop=crop)
    if method == "reg":
        values = trajectory_values(dataset, method, params)
        return replace(_report("reg", values, len(dataset)), value_range=crop)
    return _report(method, trajectory_values(dataset, method, params), len(dataset), crop)


def normal_multiplier(delta):
    """Two-sided standard normal quantile z_{1 - delta/2}."""
    check_scalar(delta, "delta", numbers.Real, min_val=0.0, max_val=1.0,
                 include_boundaries="neither")
    return float(norm.ppf(1.0 - delta / 2.0))


def confidence_bound(report, method="hoeffding", param=0.05):
    """
    Confidence interval around a report's point estimate.

    Args:
        report: EstimatorReport
        method (str): ``hoeffding`` (param is delta; needs ``report.value_range``) or
            ``normal`` (param is the multiplier C >= 0; needs n >= 2)
        param (float): delta or C

    Returns:
        CIResult
    """
    point = report.point_estimate
    if method == "hoeffding":
        check_scalar(param, "delta", numbers.Real, min_val=0.0, max_val=1.0,
                     include_boundaries="right")
        if report.value_range is None:
            raise ValueError("hoeffding bound needs the report's value range")
        b = report.value_range[1] - report.value_range[0]
        half = b * math.sqrt(math.log(2.0 / param) / (2.0 * report.n))
    elif method == "normal":
        check_scalar(param, "C", numbers.Real, min_val=0.0)
        if report.n < 2:
            raise ValueError("normal bound needs at least 2 trajectories for a standard error")
        half = param * report.stderr
    else:
        raise ValueError(f"unknown confidence bound method {method!r}")
    return CIResult(lower=point - half, upper=point + half, method=method, parameter=float(param))


def reports_to_frame(reports):
    """CSV-ready rows ``method,n,point,stderr,crop_count``."""
    return pd.DataFrame([r.as_row() for r in reports],
                        columns=["method", "n", "point", "stderr", "crop_count"])
