"""Diffusion-process maths: DDPM schedules, the linear interpolant, samplers.

Time runs from data (``t=0``) to noise (``t=1`` or ``t=T``). Discrete tables
are indexed ``1..T`` with index 0 holding ``alpha_bar = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# posterior-variance choices for the ancestral step
VARIANCES = ("beta", "posterior")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DdpmSchedule:
    kind: str
    beta: np.ndarray        # (T+1,), beta[0] = 0
    alpha_bar: np.ndarray   # (T+1,), alpha_bar[0] = 1
    timesteps: np.ndarray   # (T+1,), model-facing time index of each table row

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def dump(self) -> str:
        """Text table ``t beta alpha_bar`` (rows 1..T)."""
        return "".join(f"{t} {float(self.beta[t])!r} {float(self.alpha_bar[t])!r}\n" for t in range(1, self.T + 1))


def _from_betas(kind: str, betas: np.ndarray, timesteps: np.ndarray | None = None) -> DdpmSchedule:
    beta = np.concatenate([[0.0], betas])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if timesteps is None:
        timesteps = np.arange(len(beta))
    return DdpmSchedule(kind, beta, alpha_bar, np.asarray(timesteps))


def build_schedule(kind: str, T: int) -> DdpmSchedule:
    """``linear`` (beta evenly spaced 1e-4 to 0.02) or ``cosine`` (s = 0.008)."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        s = 0.008

        def f(t):
            return np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

        ab = f(np.arange(T + 1)) / f(0.0)
        betas = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ScheduleError("betas must lie in (0, 1)")
    return _from_betas(kind, betas)


def respace(schedule: DdpmSchedule, steps: int) -> DdpmSchedule:
    """Subsample ``steps`` evenly spaced rows and re-derive the betas."""
    if not 1 <= steps <= schedule.T:
        raise ScheduleError(f"steps must be in [1, {schedule.T}]")
    keep = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(int))
    ab = schedule.alpha_bar[keep]
    prev = np.concatenate([[1.0], ab[:-1]])
    return _from_betas(schedule.kind, 1.0 - ab / prev, np.concatenate([[0], keep]))


def _check_abar(abar, lo_open: bool = False):
    a = np.asarray(abar, dtype=np.float64)
    bad = (a <= 0) if lo_open else (a < 0)
    if np.any(bad) or np.any(a > 1):
        raise ScheduleError(f"alpha_bar must lie in {'(0' if lo_open else '[0'}, 1], got {abar}")
    return a


def forward_diffuse(x0, eps, abar):
    a = _check_abar(abar)
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def x0_from_eps(x_t, eps_hat, abar):
    a = _check_abar(abar, lo_open=True)
    return (np.asarray(x_t) - np.sqrt(1.0 - a) * np.asarray(eps_hat)) / np.sqrt(a)


def eps_from_x0(x_t, x0_hat, abar):
    a = _check_abar(abar)
    if np.any(a >= 1):
        raise ScheduleError("eps is undefined at alpha_bar = 1")
    return (np.asarray(x_t) - np.sqrt(a) * np.asarray(x0_hat)) / np.sqrt(1.0 - a)


def error_relation(abar: float) -> float:
    """Factor mapping squared eps-error to squared x0-error: (1 - abar) / abar."""
    a = float(abar)
    if not 0.0 < a < 1.0:
        raise ScheduleError("alpha_bar must lie in (0, 1)")
    return (1.0 - a) / a


@dataclass
class ErrorRelation:
    delta_x0: np.ndarray
    delta_eps: np.ndarray
    factor: float

    @property
    def max_rel_error(self) -> float:
        expected = self.factor * self.delta_eps
        return float(np.max(np.abs(self.delta_x0 - expected) / np.maximum(np.abs(expected), 1e-300)))


def verify_error_relation(x0, eps, eps_hat, abar: float, phi=None) -> ErrorRelation:
    """Measure squared x0 and eps errors of an eps-prediction.

    Without ``phi`` the errors are totals and ``delta_x0 == factor * delta_eps``.
    With a per-dimension SD ratio ``phi`` the inputs are read as
    network-space data (per-dimension SD ``1/phi`` in standardized units);
    errors are reported per dimension in standardized units, where
    ``delta_x0[i] == phi[i]**2 * factor * delta_eps[i]``.
    """
    factor = error_relation(abar)
    x0, eps, eps_hat = (np.asarray(v, dtype=np.float64) for v in (x0, eps, eps_hat))
    x_t = forward_diffuse(x0, eps, abar)
    x0_hat = x0_from_eps(x_t, eps_hat, abar)
    if phi is None:
        d_x0 = np.sum((x0_hat - x0) ** 2)
        d_eps = np.sum((eps_hat - eps) ** 2)
        return ErrorRelation(np.asarray(d_x0), np.asarray(d_eps), factor)
    phi = np.asarray(phi, dtype=np.float64)
    axes = tuple(range(x0.ndim - 1))
    d_x0 = np.sum(((x0_hat - x0) * phi) ** 2, axis=axes)
    d_eps = np.sum((eps_hat - eps) ** 2, axis=axes)
    return ErrorRelation(d_x0, phi**2 * d_eps, factor)


def posterior_coefficients(schedule: DdpmSchedule, t: int, variance: str = "beta"):
    """(coef on x_t, coef on x0_hat, noise SD) of the step t -> t-1."""
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"t must be in [1, {schedule.T}], got {t}")
    if variance not in VARIANCES:
        raise ScheduleError(f"variance must be one of {VARIANCES}")
    ab, ab_prev, b = schedule.alpha_bar[t], schedule.alpha_bar[t - 1], schedule.beta[t]
    c_xt = math.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    if t == 1:
        sd = 0.0
    elif variance == "posterior":
        sd = math.sqrt((1.0 - ab_prev) / (1.0 - ab) * b)
    else:
        sd = math.sqrt(b)
    return c_xt, c_x0, sd


def ancestral_step(x_t, x0_hat, t: int, schedule: DdpmSchedule, rng: np.random.Generator,
                   variance: str = "beta"):
    c_xt, c_x0, sd = posterior_coefficients(schedule, t, variance)
    out = c_xt * np.asarray(x_t) + c_x0 * np.asarray(x0_hat)
    if sd > 0:
        out = out + sd * rng.standard_normal(np.shape(out))
    return out


def ancestral_sample(eps_predictor: Callable[[np.ndarray, int], np.ndarray], shape,
                     schedule: DdpmSchedule, rng: np.random.Generator, variance: str = "beta",
                     x_T: np.ndarray | None = None):
    """Run the full chain; ``eps_predictor(x_t, model_t)`` returns eps-hat."""
    x = rng.standard_normal(shape) if x_T is None else np.asarray(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        ab = schedule.alpha_bar[t]
        eps_hat = eps_predictor(x, int(schedule.timesteps[t]))
        x = ancestral_step(x, x0_from_eps(x, eps_hat, ab), t, schedule, rng, variance)
    return x


@dataclass(frozen=True)
class Interpolant:
    """x_t = alpha(t) x0 + sigma(t) eps."""

    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    d_alpha: Callable[[float], float]
    d_sigma: Callable[[float], float]

    def __call__(self, x0, eps, t):
        t = np.asarray(t, dtype=np.float64)
        return self.alpha(t) * np.asarray(x0) + self.sigma(t) * np.asarray(eps)


LINEAR = Interpolant(lambda t: 1.0 - t, lambda t: t,
                     lambda t: -np.ones_like(np.asarray(t, dtype=np.float64)),
                     lambda t: np.ones_like(np.asarray(t, dtype=np.float64)))


def velocity_target(x0, eps, t=0.5, interp: Interpolant = LINEAR):
    """d x_t / d t for a given (x0, eps) pair; ``eps - x0`` for the linear path."""
    t = np.asarray(t, dtype=np.float64)
    return interp.d_alpha(t) * np.asarray(x0) + interp.d_sigma(t) * np.asarray(eps)


def score_from_velocity(x, v, t, interp: Interpolant = LINEAR):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ScheduleError("score is singular at t = 0")
    a, s, da, ds = interp.alpha(t), interp.sigma(t), interp.d_alpha(t), interp.d_sigma(t)
    return (a * np.asarray(v) - da * np.asarray(x)) / (s * (da * s - a * ds))


def ode_step(x, v_hat, dt: float):
    """One explicit Euler step from t to t - dt along the forward-time velocity."""
    return np.asarray(x) - dt * np.asarray(v_hat)


def ode_sample(v_predictor: Callable[[np.ndarray, float], np.ndarray], shape, steps: int,
               rng: np.random.Generator, x_1: np.ndarray | None = None):
    """Integrate from t=1 (noise) to t=0 with ``steps`` uniform Euler steps."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    x = rng.standard_normal(shape) if x_1 is None else np.asarray(x_1, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        x = ode_step(x, v_predictor(x, t), dt)
    return x


def cfg_combine(pred_cond, pred_uncond, scale: float):
    pc, pu = np.asarray(pred_cond), np.asarray(pred_uncond)
    if pc.shape != pu.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    return pu + scale * (pc - pu)


# oracle predictors for Gaussian data N(mu, s^2), used as test references

def gaussian_eps_oracle(mu: float, s: float, schedule: DdpmSchedule):
    def predict(x, model_t):
        ab = schedule.alpha_bar[int(np.searchsorted(schedule.timesteps, model_t))]
        var = ab * s * s + 1.0 - ab
        return math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * mu) / var
    return predict


def gaussian_velocity_oracle(mu: float, s: float):
    def predict(x, t):
        var = (1 - t) ** 2 * s * s + t * t
        resid = x - (1 - t) * mu
        e_x0 = mu + (1 - t) * s * s * resid / var
        e_eps = t * resid / var
        return e_eps - e_x0
    return predict
