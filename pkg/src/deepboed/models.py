"""Simulated experiments: coupled-cavity array, qubit chain, conjugate Gaussian.

Every model is vectorised over a leading batch axis: ``lam`` is ``(B, D)``,
settings ``x`` are ``(B,)`` and observations ``y`` are ``(B, obs_dim)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

LOG_2PI = math.log(2.0 * math.pi)


class ExperimentModel:
    """Interface shared by all simulated experiments."""

    name: str = "base"
    param_dim: int
    obs_dim: int
    obs_kind: str  # "continuous" or "count"
    setting_domain: tuple[float, float]
    reparameterizable = False

    @property
    def prior_mean(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def prior_std(self) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, lam, x, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, y, lam, x) -> np.ndarray:
        raise NotImplementedError

    def obs_affine(self) -> tuple[float, float]:
        """(shift, scale) with normalised y = (y - shift) / scale."""
        raise NotImplementedError

    def normalize_obs(self, y) -> np.ndarray:
        shift, scale = self.obs_affine()
        return (np.asarray(y, dtype=np.float64) - shift) / scale

    def bind(self, lam) -> "Simulator":
        """Simulator tied to a fixed parameter batch."""
        return Simulator(self, lam)

    def normalize_setting(self, x) -> np.ndarray:
        lo, hi = self.setting_domain
        return 2.0 * (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def context(self, x, y) -> np.ndarray:
        """Normalised (x, y) rows, shape (B, 1 + obs_dim)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
        return np.concatenate([self.normalize_setting(x), self.normalize_obs(y)], axis=1)

    def response_curve(self, lam, x) -> np.ndarray:
        """Deterministic response for plotting, shape (B, k) real."""
        raise NotImplementedError

    def setting_grid(self, n: int) -> np.ndarray:
        lo, hi = self.setting_domain
        return np.linspace(lo, hi, n)

    def to_config(self) -> dict:
        raise NotImplementedError


class Simulator:
    """Draws observations for a fixed batch of parameters at any settings.

    ``idx`` selects a subset of the bound rows; settings broadcast against it.
    """

    def __init__(self, model: ExperimentModel, lam):
        self.model = model
        self.lam = _as_batch(lam, model.param_dim)

    def __len__(self):
        return len(self.lam)

    def draw(self, x, rng, idx=None) -> np.ndarray:
        lam = self.lam if idx is None else self.lam[idx]
        return self.model.simulate(lam, x, rng)

    def log_likelihood(self, y, x, idx=None) -> np.ndarray:
        lam = self.lam if idx is None else self.lam[idx]
        return self.model.log_likelihood(y, lam, x)

    def response_curve(self, x, idx=None) -> np.ndarray:
        lam = self.lam if idx is None else self.lam[idx]
        return self.model.response_curve(lam, x)


class QubitSimulator(Simulator):
    """Caches the eigendecomposition so any number of durations are cheap."""

    def __init__(self, model, lam):
        super().__init__(model, lam)
        self.spectrum = model.spectrum(self.lam)

    def _sub(self, idx):
        if idx is None:
            return self.spectrum
        return tuple(a[idx] for a in self.spectrum)

    def p_up(self, x, idx=None):
        return self.model.p_up_from_spectrum(self._sub(idx), x)

    def draw(self, x, rng, idx=None):
        p = self.p_up(x, idx)
        return rng.binomial(self.model.n_shots, p).astype(np.float64).reshape(-1, 1)

    def log_likelihood(self, y, x, idx=None):
        return self.model.log_likelihood_from_p(y, self.p_up(x, idx))

    def response_curve(self, x, idx=None):
        return self.p_up(x, idx).reshape(-1, 1)


def _as_batch(lam, dim):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape(1, dim)
    if lam.shape[-1] != dim:
        raise ValueError(f"expected parameter dimension {dim}, got {lam.shape[-1]}")
    return lam


def _as_settings(x, batch):
    return np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(-1), (batch,))


# ---------------------------------------------------------------------------
# Coupled-cavity array


@dataclass(frozen=True)
class CavityArray(ExperimentModel):
    """Chain of N cavities probed in transmission from port 0 to port N-1.

    Frequencies are in units of the decay rate. ``true_lambda`` holds the
    simulation ground truth for the unknown on-site frequencies.
    """

    N: int
    J: tuple
    kappa_int: float = 0.5
    kappa_ext: float = 0.5
    eps: float = 0.05
    true_lambda: tuple = ()
    domain: tuple = (-12.0, 12.0)
    y_scale: float = 0.2  # typical |S| spread under the prior is ~0.15

    name = "cavity"
    obs_dim = 2
    obs_kind = "continuous"
    reparameterizable = True

    def __post_init__(self):
        object.__setattr__(self, "J", tuple(float(j) for j in self.J))
        object.__setattr__(self, "true_lambda", tuple(float(v) for v in self.true_lambda))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        if self.N < 1:
            raise ValueError("cavity array needs N >= 1")
        if len(self.J) != self.N - 1:
            raise ValueError(f"expected {self.N - 1} couplings, got {len(self.J)}")
        if self.kappa_int < 0 or self.kappa_ext <= 0 or self.eps <= 0:
            raise ValueError("need kappa_int >= 0, kappa_ext > 0, eps > 0")
        if self.true_lambda and len(self.true_lambda) != self.N:
            raise ValueError("true_lambda must have N entries")

    @property
    def param_dim(self):
        return self.N

    @property
    def setting_domain(self):
        return self.domain

    @property
    def prior_mean(self):
        return np.zeros(self.N)

    @property
    def prior_std(self):
        return np.ones(self.N)

    @property
    def kappa(self) -> np.ndarray:
        k = np.full(self.N, float(self.kappa_int))
        k[0] += self.kappa_ext
        if self.N > 1:
            k[-1] += self.kappa_ext
        return k

    def omega_matrix(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64).reshape(self.N)
        return np.diag(lam) + np.diag(self.J, 1) + np.diag(self.J, -1)

    def _columns(self, lam, w):
        lam = _as_batch(lam, self.N)
        w = _as_settings(w, len(lam))
        return _kernels.tridiag_columns(lam, np.asarray(self.J), self.kappa, w)

    def response(self, lam, w) -> np.ndarray:
        """Transmission element S[0, N-1] (reflection S[0, 0] when N = 1)."""
        first, last = self._columns(lam, w)
        return self._s_from_columns(first, last)

    def _s_from_columns(self, first, last):
        ke = self.kappa_ext
        if self.N == 1:
            return 1.0 - ke * first[:, 0]
        return -ke * last[:, 0]

    def reflection(self, lam, w) -> np.ndarray:
        first, _ = self._columns(lam, w)
        return 1.0 - self.kappa_ext * first[:, 0]

    def response_derivative(self, lam, w) -> tuple[np.ndarray, np.ndarray]:
        """(S, dS/dw) using dG/dw = i G^2 and the symmetry of G."""
        first, last = self._columns(lam, w)
        s = self._s_from_columns(first, last)
        g2 = np.sum(first * last, axis=1)  # (G @ G)[0, N-1]
        return s, -self.kappa_ext * 1j * g2

    def simulate(self, lam, x, rng):
        s = self.response(lam, x)
        noise = rng.standard_normal((len(s), 2))
        return np.stack([s.real, s.imag], axis=1) + self.eps * noise

    def gaussian_obs(self, lam, x):
        """Mean observation (B, 2) and the per-component noise std."""
        return self.response_curve(lam, x), float(self.eps)

    def reparam(self, lam, x, noise):
        """Observation and its derivative w.r.t. x for fixed standard noise."""
        s, ds = self.response_derivative(lam, x)
        y = np.stack([s.real, s.imag], axis=1) + self.eps * noise
        return y, np.stack([ds.real, ds.imag], axis=1)

    def noise(self, n, rng):
        return rng.standard_normal((n, 2))

    def log_likelihood(self, y, lam, x):
        s = self.response(lam, x)
        y = np.asarray(y, dtype=np.float64).reshape(len(s), 2)
        r2 = (y[:, 0] - s.real) ** 2 + (y[:, 1] - s.imag) ** 2
        return -0.5 * r2 / self.eps**2 - (LOG_2PI + 2.0 * math.log(self.eps))

    def obs_affine(self):
        return 0.0, float(self.y_scale)

    def response_curve(self, lam, x):
        s = self.response(lam, x)
        return np.stack([s.real, s.imag], axis=1)

    response_labels = ("re", "im")

    def to_config(self):
        return {"type": "cavity", "N": self.N, "J": list(self.J),
                "kappa_int": self.kappa_int, "kappa_ext": self.kappa_ext, "eps": self.eps,
                "true_lambda": list(self.true_lambda), "domain": list(self.domain),
                "y_scale": self.y_scale}


# ---------------------------------------------------------------------------
# Qubit chain


def _chain_operators(n: int):
    """Diagonal sigma_z patterns and the sigma_x sigma_x hopping matrix.

    Basis index bit ``n-1-i`` is qubit i, 1 meaning up (sigma_z = +1).
    """
    dim = 1 << n
    idx = np.arange(dim)
    bits = np.stack([(idx >> (n - 1 - i)) & 1 for i in range(n)], axis=0)
    zdiag = 2.0 * bits - 1.0  # (n, dim)
    hop = np.zeros((dim, dim))
    for i in range(n - 1):
        flip = (1 << (n - 1 - i)) | (1 << (n - 2 - i))
        hop[idx, idx ^ flip] += 1.0
    up0 = bits[0].astype(bool)
    flip0 = idx ^ (1 << (n - 1))
    return zdiag, hop, up0, flip0


@dataclass(frozen=True)
class QubitChain(ExperimentModel):
    """Transverse-coupled qubit chain probed by a pi pulse and free evolution.

    ``prior_loc``/``prior_scale`` define the independent Gaussian prior on
    each qubit frequency.
    """

    N: int
    J: float = 1.7
    n_shots: int = 100
    true_lambda: tuple = ()
    domain: tuple = (0.0, 5.0)
    prior_loc: float = 1.0
    prior_scale: float = 0.25

    name = "qubit"
    obs_dim = 1
    obs_kind = "count"

    def __post_init__(self):
        object.__setattr__(self, "true_lambda", tuple(float(v) for v in self.true_lambda))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        if not 1 <= self.N <= 10:
            raise ValueError("qubit chain supports 1 <= N <= 10")
        if self.n_shots < 1:
            raise ValueError("n_shots must be >= 1")
        if self.true_lambda and len(self.true_lambda) != self.N:
            raise ValueError("true_lambda must have N entries")
        object.__setattr__(self, "_ops", _chain_operators(self.N))

    @property
    def param_dim(self):
        return self.N

    @property
    def setting_domain(self):
        return self.domain

    @property
    def prior_mean(self):
        return np.full(self.N, float(self.prior_loc))

    @property
    def prior_std(self):
        return np.full(self.N, float(self.prior_scale))

    def hamiltonian(self, lam) -> np.ndarray:
        lam = _as_batch(lam, self.N)
        zdiag, hop, _, _ = self._ops
        diag = lam @ zdiag
        h = self.J * np.broadcast_to(hop, (len(lam),) + hop.shape).copy()
        i = np.arange(hop.shape[0])
        h[:, i, i] += diag
        return h

    def spectrum(self, lam):
        """Eigenpairs and the post-pulse state expressed in the eigenbasis.

        Returns ``(energies (B,d), vectors (B,d,d), coeffs (B,d) complex)``.
        """
        h = self.hamiltonian(lam)
        energies, vectors = _kernels.sym_eigh(h)
        gap = energies[:, 1] - energies[:, 0] if energies.shape[1] > 1 else np.inf
        if np.any(gap < 1e-10):
            warnings.warn(f"{int(np.sum(gap < 1e-10))} degenerate ground state(s); "
                          "using the lowest-index eigenvector", RuntimeWarning, stacklevel=2)
        ground = vectors[:, :, 0].copy()
        # phase convention: first non-negligible amplitude positive
        first = np.argmax(np.abs(ground) > 1e-12, axis=1)
        sign = np.sign(ground[np.arange(len(ground)), first])
        ground *= sign[:, None]
        pulsed = self.apply_pulse(ground)
        coeffs = np.einsum("bsk,bs->bk", vectors, pulsed)
        return energies, vectors, coeffs

    def apply_pulse(self, psi) -> np.ndarray:
        """exp(-i pi/2 sigma_x on qubit 0) = cos(pi/2) - i sin(pi/2) sigma_x."""
        _, _, _, flip0 = self._ops
        psi = np.asarray(psi, dtype=np.complex128)
        return math.cos(math.pi / 2) * psi - 1j * math.sin(math.pi / 2) * psi[:, flip0]

    def evolve(self, spectrum, t) -> np.ndarray:
        """State after free evolution for time t, shape (B, d) complex."""
        energies, vectors, coeffs = spectrum
        t = _as_settings(t, len(energies))
        phases = np.exp(-1j * energies * t[:, None]) * coeffs
        return np.einsum("bsk,bk->bs", vectors, phases)

    def p_up_from_spectrum(self, spectrum, t) -> np.ndarray:
        _, _, up0, _ = self._ops
        energies, vectors, coeffs = spectrum
        t = _as_settings(t, len(energies))
        phases = np.exp(-1j * energies * t[:, None]) * coeffs
        amp = np.einsum("bsk,bk->bs", vectors[:, up0, :], phases)
        p = np.sum(amp.real**2 + amp.imag**2, axis=1)
        return np.clip(p, 0.0, 1.0)

    def p_up(self, lam, t) -> np.ndarray:
        return self.p_up_from_spectrum(self.spectrum(lam), t)

    def simulate(self, lam, x, rng):
        p = self.p_up(lam, x)
        return rng.binomial(self.n_shots, p).astype(np.float64).reshape(-1, 1)

    def log_likelihood(self, y, lam, x):
        return self.log_likelihood_from_p(y, self.p_up(lam, x))

    def log_likelihood_from_p(self, y, p):
        k = np.asarray(y, dtype=np.float64).reshape(-1)
        n = self.n_shots
        if np.any(k < 0) or np.any(k > n):
            raise ValueError(f"count out of range [0, {n}]")
        return binomial_logpmf(k, n, p)

    def obs_affine(self):
        return 0.5 * self.n_shots, 0.5 * self.n_shots

    def bind(self, lam):
        return QubitSimulator(self, lam)

    def response_curve(self, lam, x):
        return self.p_up(lam, x).reshape(-1, 1)

    response_labels = ("p_up",)

    def to_config(self):
        return {"type": "qubit", "N": self.N, "J": self.J, "n_shots": self.n_shots,
                "true_lambda": list(self.true_lambda), "domain": list(self.domain),
                "prior_loc": self.prior_loc, "prior_scale": self.prior_scale}


def binomial_logpmf(k, n, p, clamp=1e-12):
    k = np.asarray(k, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    log_comb = _log_comb(n, k)
    return log_comb + k * np.log(p) + (n - k) * np.log1p(-p)


def _log_comb(n, k):
    table = _LOG_COMB_CACHE.get(n)
    if table is None:
        ks = np.arange(n + 1)
        table = np.array([math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1)
                          for j in ks])
        _LOG_COMB_CACHE[n] = table
    return table[np.asarray(k).astype(np.intp)]


_LOG_COMB_CACHE: dict = {}


# ---------------------------------------------------------------------------
# Conjugate Gaussian reference


@dataclass(frozen=True)
class ConjugateGaussian(ExperimentModel):
    """y = gain * lam + noise, noise std sigma_eps * (1 + noise_slope * |x|).

    One-dimensional, with a Gaussian prior: every posterior and the mutual
    information are available in closed form.
    """

    sigma0: float = 1.0
    sigma_eps: float = 1.0
    mu0: float = 0.0
    gain: float = 1.0
    noise_slope: float = 0.0
    true_lambda: tuple = ()
    domain: tuple = (-1.0, 1.0)

    name = "conjugate"
    param_dim = 1
    obs_dim = 1
    obs_kind = "continuous"
    reparameterizable = True

    def __post_init__(self):
        object.__setattr__(self, "true_lambda", tuple(float(v) for v in self.true_lambda))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        if self.sigma0 <= 0 or self.sigma_eps <= 0:
            raise ValueError("sigma0 and sigma_eps must be positive")

    @property
    def setting_domain(self):
        return self.domain

    @property
    def prior_mean(self):
        return np.array([float(self.mu0)])

    @property
    def prior_std(self):
        return np.array([float(self.sigma0)])

    def noise_std(self, x) -> np.ndarray:
        return self.sigma_eps * (1.0 + self.noise_slope * np.abs(np.asarray(x, dtype=np.float64)))

    def response(self, lam, x):
        lam = _as_batch(lam, 1)
        return self.gain * lam[:, 0]

    def simulate(self, lam, x, rng):
        lam = _as_batch(lam, 1)
        x = _as_settings(x, len(lam))
        return (self.gain * lam[:, 0] + self.noise_std(x) * rng.standard_normal(len(lam)))[:, None]

    def gaussian_obs(self, lam, x):
        xs = np.unique(np.asarray(x, dtype=np.float64))
        if len(xs) != 1:
            raise ValueError("gaussian_obs needs a single setting")
        return self.response_curve(lam, x), float(self.noise_std(xs[0]))

    def reparam(self, lam, x, noise):
        lam = _as_batch(lam, 1)
        x = _as_settings(x, len(lam))
        noise = np.asarray(noise).reshape(len(lam))
        y = self.gain * lam[:, 0] + self.noise_std(x) * noise
        dy = self.sigma_eps * self.noise_slope * np.sign(x) * noise
        return y[:, None], dy[:, None]

    def noise(self, n, rng):
        return rng.standard_normal((n, 1))

    def log_likelihood(self, y, lam, x):
        lam = _as_batch(lam, 1)
        x = _as_settings(x, len(lam))
        sd = self.noise_std(x)
        r = np.asarray(y, dtype=np.float64).reshape(len(lam)) - self.gain * lam[:, 0]
        return -0.5 * (r / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI

    def obs_affine(self):
        scale = math.sqrt((self.gain * self.sigma0) ** 2 + self.sigma_eps**2)
        return self.gain * self.mu0, scale

    def response_curve(self, lam, x):
        return self.response(lam, x).reshape(-1, 1)

    response_labels = ("mean",)

    def mutual_information(self, x=0.0) -> float:
        sd = float(self.noise_std(x))
        return 0.5 * math.log1p((self.gain * self.sigma0 / sd) ** 2)

    def to_config(self):
        return {"type": "conjugate", "sigma0": self.sigma0, "sigma_eps": self.sigma_eps,
                "mu0": self.mu0, "gain": self.gain, "noise_slope": self.noise_slope,
                "true_lambda": list(self.true_lambda), "domain": list(self.domain)}


def conjugate_posterior(model: ConjugateGaussian, observations) -> tuple[float, float]:
    """Closed-form posterior (mean, std) after a sequence of (x, y) pairs."""
    precision = 1.0 / model.sigma0**2
    weighted = model.mu0 * precision
    for x, y in observations:
        y = float(np.asarray(y).reshape(-1)[0])
        noise_var = float(model.noise_std(x)) ** 2
        precision += model.gain**2 / noise_var
        weighted += model.gain * y / noise_var
    return weighted / precision, 1.0 / math.sqrt(precision)


def conjugate_mi(model: ConjugateGaussian, x=0.0) -> float:
    return model.mutual_information(x)


def model_from_config(cfg: dict) -> ExperimentModel:
    cfg = dict(cfg)
    kind = cfg.pop("type")
    if kind == "cavity":
        return CavityArray(**cfg)
    if kind == "qubit":
        return QubitChain(**cfg)
    if kind == "conjugate":
        return ConjugateGaussian(**cfg)
    raise ValueError(f"unknown model type {kind!r}")


REFERENCE_CAVITY_OMEGA = (1.040, 0.326, 0.520, 0.900, -0.466, 0.004)
REFERENCE_CAVITY_J = (2.733, 2.615, 1.956, 1.568, 2.620)
REFERENCE_QUBIT_OMEGA = (1.163, 1.003, 1.045, 0.910)


def reference_cavity(n: int = 6, **overrides) -> CavityArray:
    """Coupled-cavity reference setup (first ``n`` cavities)."""
    kw = dict(N=n, J=REFERENCE_CAVITY_J[: n - 1], kappa_int=0.5, kappa_ext=0.5, eps=0.05,
              true_lambda=REFERENCE_CAVITY_OMEGA[:n])
    kw.update(overrides)
    return CavityArray(**kw)


def reference_qubits(n: int = 4, **overrides) -> QubitChain:
    """Qubit-chain reference setup (first ``n`` qubits)."""
    kw = dict(N=n, J=1.7, n_shots=100, true_lambda=REFERENCE_QUBIT_OMEGA[:n])
    kw.update(overrides)
    return QubitChain(**kw)
