"""Closed-form Gaussian belief over (deterioration, rate).

All variables stay jointly Gaussian, and the covariance recursion does not
depend on the observations or actions. It is therefore computed once per
parameter set (``CovarianceSchedule``), and a belief reduces to the pair of
posterior means plus the timestep.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import Action, ModelParams, SystemState


@dataclass(frozen=True)
class CovarianceSchedule:
    """Prior (') and posterior ('') standard deviations and correlations.

    Every array has length ``t_end + 1``; index 0 holds the initial
    distribution (prior equal to posterior, zero correlation).
    """

    sigma_e: float
    sigma_d_prior: np.ndarray
    sigma_d_post: np.ndarray
    sigma_k_prior: np.ndarray
    sigma_k_post: np.ndarray
    rho_prior: np.ndarray
    rho_post: np.ndarray

    def __post_init__(self):
        for name in ("sigma_d_prior", "sigma_d_post", "sigma_k_prior", "sigma_k_post", "rho_prior", "rho_post"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def t_end(self) -> int:
        return len(self.sigma_d_prior) - 1

    def transition_std(self, t: int) -> float:
        """Std of the posterior mean mu''_D,t given the belief at t-1."""
        sp = self.sigma_d_prior[t]
        return float(sp * sp / np.sqrt(self.sigma_e**2 + sp * sp)) if sp > 0 else 0.0

    def k_slope(self, t: int) -> float:
        """d mu''_K,t / d mu''_D,t along the (degenerate) belief transition."""
        sp = self.sigma_d_prior[t]
        if sp == 0:
            return 0.0
        return float(self.rho_prior[t] * self.sigma_k_prior[t] / sp)

    def covariance(self, t: int) -> np.ndarray:
        sd, sk, r = self.sigma_d_post[t], self.sigma_k_post[t], self.rho_post[t]
        return np.array([[sd * sd, r * sd * sk], [r * sd * sk, sk * sk]])

    def rows(self):
        for t in range(self.t_end + 1):
            yield (
                t,
                self.sigma_d_prior[t],
                self.sigma_d_post[t],
                self.sigma_k_prior[t],
                self.sigma_k_post[t],
                self.rho_prior[t],
                self.rho_post[t],
            )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sigma_d_prior", "sigma_d_post", "sigma_k_prior", "sigma_k_post", "rho_prior", "rho_post"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path: str | Path, sigma_e: float) -> "CovarianceSchedule":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "t"}
        return cls(sigma_e=sigma_e, **cols)


@dataclass
class BeliefMean:
    """Posterior means at timestep ``t``; fields may be scalars or arrays."""

    mu_d: float | np.ndarray
    mu_k: float | np.ndarray
    t: int


def precompute_schedule(params: ModelParams) -> CovarianceSchedule:
    T = params.t_end
    se2 = params.sigma_e**2
    sdp = np.zeros(T + 1)
    sdq = np.zeros(T + 1)
    skp = np.zeros(T + 1)
    skq = np.zeros(T + 1)
    rp = np.zeros(T + 1)
    rq = np.zeros(T + 1)
    sdp[0] = sdq[0] = params.sigma_d0
    skp[0] = skq[0] = params.sigma_k0
    for t in range(1, T + 1):
        sd, sk, r = sdq[t - 1], skq[t - 1], rq[t - 1]
        var_d = sk * sk + sd * sd + 2.0 * r * sk * sd
        sdp[t] = np.sqrt(var_d)
        skp[t] = sk
        rp[t] = (r * sd + sk) / sdp[t] if sdp[t] > 0 else 0.0
        # 1 - rho'^2 can round slightly below zero once the rate is well known
        one_m_r2 = max(0.0, 1.0 - rp[t] ** 2)
        if params.sigma_e == 0.0:
            sdq[t] = 0.0
            skq[t] = skp[t] * np.sqrt(one_m_r2)
            rq[t] = 0.0
        else:
            denom = np.sqrt(se2 + var_d)
            sdq[t] = params.sigma_e * sdp[t] / denom
            inner = np.sqrt(se2 + var_d * one_m_r2)
            skq[t] = skp[t] * inner / denom
            rq[t] = rp[t] * params.sigma_e / inner
    return CovarianceSchedule(params.sigma_e, sdp, sdq, skp, skq, rp, rq)


def prior_mean_arrays(mu_d, mu_k, actions, params: ModelParams):
    mu_d = np.asarray(mu_d, dtype=float)
    mu_k = np.asarray(mu_k, dtype=float)
    a = np.asarray(actions)
    rate_cut = params.delta_k * (a == Action.REDUCE_RATE)
    pd = mu_d + mu_k - rate_cut - params.delta_d * (a == Action.IMPROVE_STATE)
    pk = mu_k - rate_cut
    replaced = a == Action.REPLACE
    pd = np.where(replaced, params.mu_d0 + params.mu_k0, pd)
    pk = np.where(replaced, params.mu_k0, pk)
    return pd, pk


def prior_mean(belief: BeliefMean, action: int, params: ModelParams) -> tuple[float, float]:
    pd, pk = prior_mean_arrays(belief.mu_d, belief.mu_k, int(action), params)
    return float(pd), float(pk)


def _gains(schedule: CovarianceSchedule, t: int):
    """Observation gains for (mu_D, mu_K) so that mu'' = mu' + gain * (o - mu'_D)."""
    sp2 = schedule.sigma_d_prior[t] ** 2
    denom = schedule.sigma_e**2 + sp2
    if denom == 0:
        return 0.0, 0.0
    gain_d = sp2 / denom
    gain_k = schedule.rho_prior[t] * schedule.sigma_d_prior[t] * schedule.sigma_k_prior[t] / denom
    return gain_d, gain_k


def posterior_mean_arrays(prior_d, prior_k, obs, schedule: CovarianceSchedule, t: int):
    # (s''^2/s_E^2) o + (s''^2/s'^2) mu' == mu' + s'^2/(s_E^2+s'^2) (o - mu'); the
    # gain form is used because it stays defined at s_E = 0.
    if t < 1:
        raise ValueError("posterior update needs t >= 1")
    gain_d, gain_k = _gains(schedule, t)
    innov = np.asarray(obs, dtype=float) - prior_d
    return prior_d + gain_d * innov, prior_k + gain_k * innov


def posterior_mean(prior_means: tuple[float, float], o_t: float, schedule: CovarianceSchedule, t: int) -> BeliefMean:
    md, mk = posterior_mean_arrays(prior_means[0], prior_means[1], o_t, schedule, t)
    return BeliefMean(float(md), float(mk), t)


@dataclass(frozen=True)
class BeliefTransitionLaw:
    """mu''_D,t ~ Normal(mean_d, std_d); mu''_K,t = mean_k + slope * (mu''_D,t - mean_d)."""

    mean_d: float | np.ndarray
    std_d: float
    mean_k: float | np.ndarray
    slope: float

    def k_of(self, mu_d):
        return self.mean_k + self.slope * (np.asarray(mu_d) - self.mean_d)

    def sample(self, rng: np.random.Generator, size=None):
        md = self.mean_d + self.std_d * rng.standard_normal(size)
        return md, self.k_of(md)


def belief_transition_law(belief: BeliefMean, action: int, schedule: CovarianceSchedule, t: int, params: ModelParams) -> BeliefTransitionLaw:
    """Distribution of the next belief (at ``t``) from ``belief`` (at ``t-1``) under ``action``."""
    if t < 1:
        raise ValueError("belief transition needs t >= 1")
    pd, pk = prior_mean_arrays(belief.mu_d, belief.mu_k, action, params)
    if pd.ndim == 0:
        pd, pk = float(pd), float(pk)
    return BeliefTransitionLaw(pd, schedule.transition_std(t), pk, schedule.k_slope(t))


def sample_state(belief: BeliefMean, schedule: CovarianceSchedule, t: int, rng: np.random.Generator, size=None):
    """Draw (D_t, K_t) from the binormal belief via a 2x2 Cholesky factor.

    Returns a ``SystemState`` for ``size=None`` and a pair of arrays otherwise.
    """
    rho = schedule.rho_post[t]
    if abs(rho) > 1.0 + 1e-12:
        raise ValueError(f"invalid correlation {rho} at t={t}")
    rho = float(np.clip(rho, -1.0, 1.0))
    sd, sk = schedule.sigma_d_post[t], schedule.sigma_k_post[t]
    z1 = rng.standard_normal(size)
    z2 = rng.standard_normal(size)
    d = belief.mu_d + sd * z1
    k = belief.mu_k + sk * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2)
    if size is None:
        return SystemState(float(d), float(k))
    return d, k


def initial_belief(params: ModelParams) -> BeliefMean:
    return BeliefMean(params.mu_d0, params.mu_k0, 0)
