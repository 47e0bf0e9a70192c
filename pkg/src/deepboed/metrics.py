"""Evaluation quantities: realised and cumulative information gain, predictive
KL against the true likelihood, and posterior summaries.

Densities passed in here only need ``sample(n, rng) -> (lam, logp)`` and
``log_prob(lam)``: a prior chain, a conditioned flow, or a plain Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ExperimentModel, binomial_logpmf


@dataclass
class Estimate:
    value: float
    stderr: float

    def as_tuple(self):
        return self.value, self.stderr


def realized_info_gain(posterior, prior, n_samples: int, rng) -> Estimate:
    """E over posterior samples of ``log posterior - log prior``.

    This is the KL divergence of the new posterior from the previous prior,
    estimated with posterior draws.
    """
    lam, logq = posterior.sample(n_samples, rng)
    diff = logq - prior.log_prob(lam)
    return Estimate(float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(len(diff))))


def cumulative_info_gain(values) -> np.ndarray:
    """Prefix sums of per-step realised gains.

    Accepts a sequence of floats or of log records with a ``realized_ig`` key.
    """
    vals = [v["realized_ig"] if isinstance(v, dict) else v for v in values]
    out = np.empty(len(vals))
    total = 0.0
    for i, v in enumerate(vals):
        total += float(v)
        out[i] = total
    return out


def _canonical_order(lam: np.ndarray) -> np.ndarray:
    return lam[np.lexsort(lam.T[::-1])]


def predictive_kl(posterior, model: ExperimentModel, true_lambda, x: float, rng,
                  n_mixture: int = 256, n_outer: int = 2048, lam=None) -> Estimate:
    """KL(P(y|x) || P(y|lam*, x)) with P(y|x) an equal-weight posterior mixture.

    Discrete observations are summed exactly over all counts; continuous ones
    use Monte Carlo over mixture draws with a log-sum-exp mixture density.
    Mixture samples are put in a canonical order first, so the result only
    depends on the sample set and the generator state.
    """
    if lam is None:
        lam, _ = posterior.sample(n_mixture, rng)
    lam = _canonical_order(np.asarray(lam, dtype=np.float64).reshape(-1, model.param_dim))
    m = len(lam)
    true_lambda = np.asarray(true_lambda, dtype=np.float64).reshape(1, model.param_dim)
    xs = np.full(m, float(x))

    if model.obs_kind == "count":
        n = model.n_shots
        k = np.arange(n + 1, dtype=np.float64)
        p_mix = model.bind(lam).response_curve(xs)[:, 0]
        p_true = model.response_curve(true_lambda, [x])[0, 0]
        log_comp = binomial_logpmf(k[None, :], n, p_mix[:, None])  # (M, n+1)
        log_mix = _logsumexp(log_comp, axis=0) - math.log(m)
        log_true = binomial_logpmf(k, n, p_true)
        pmf = np.exp(log_mix)
        return Estimate(float(np.sum(pmf * (log_mix - log_true))), 0.0)

    comp = rng.integers(0, m, size=n_outer)
    mean, sd = model.gaussian_obs(lam, xs)  # (M, k), scalar noise std
    y = mean[comp] + sd * rng.standard_normal((n_outer, mean.shape[1]))
    true_mean, _ = model.gaussian_obs(true_lambda, [x])
    k = mean.shape[1]
    norm = -k * (0.5 * math.log(2.0 * math.pi) + math.log(sd))
    r2 = np.sum((y[:, None, :] - mean[None, :, :]) ** 2, axis=2)  # (n_outer, M)
    log_mix = _logsumexp(-0.5 * r2 / sd**2, axis=1) - math.log(m) + norm
    log_true = -0.5 * np.sum((y - true_mean) ** 2, axis=1) / sd**2 + norm
    diff = log_mix - log_true
    return Estimate(float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(n_outer)))


def _logsumexp(a, axis):
    mx = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(a - mx), axis=axis))


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    std: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray
    marginals: list = field(default_factory=list)  # per dim: (edges, density)
    pairs: dict = field(default_factory=dict)  # (i, j): (xedges, yedges, density)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "q05": self.q05.tolist(), "q50": self.q50.tolist(), "q95": self.q95.tolist()}


def posterior_summary(density, n_samples: int, rng, bins: int = 40,
                      ranges=None, histograms: bool = True) -> PosteriorSummary:
    """Moments, 5/50/95 quantiles and 1-D / 2-D histograms of a density."""
    if n_samples < 100:
        raise ValueError("posterior_summary needs at least 100 samples")
    lam, _ = density.sample(n_samples, rng)
    return summarize_samples(lam, bins=bins, ranges=ranges, histograms=histograms)


def summarize_samples(lam, bins: int = 40, ranges=None, histograms: bool = True) -> PosteriorSummary:
    lam = np.asarray(lam, dtype=np.float64)
    q05, q50, q95 = np.quantile(lam, [0.05, 0.5, 0.95], axis=0)
    out = PosteriorSummary(lam.mean(axis=0), lam.std(axis=0, ddof=1), q05, q50, q95)
    if not histograms:
        return out
    d = lam.shape[1]
    if ranges is None:
        lo, hi = lam.min(axis=0), lam.max(axis=0)
        pad = 0.05 * np.maximum(hi - lo, 1e-9)
        ranges = list(zip(lo - pad, hi + pad))
    for i in range(d):
        dens, edges = np.histogram(lam[:, i], bins=bins, range=ranges[i], density=True)
        out.marginals.append((edges, dens))
    for i in range(d):
        for j in range(i + 1, d):
            dens, xe, ye = np.histogram2d(lam[:, i], lam[:, j], bins=bins,
                                          range=[ranges[i], ranges[j]], density=True)
            out.pairs[(i, j)] = (xe, ye, dens)
    return out
