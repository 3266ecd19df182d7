"""Hierarchical Gaussian-product-Gamma model for TT cores and its variational state.

Every element of core ``d`` is a zero-mean Gaussian whose precision is the
product ``lambda_k^(d) * lambda_l^(d+1)`` of two Gamma variables attached to
the neighbouring TT interfaces; the outer interfaces carry the constant 1.  The
noise precision ``tau`` is Gamma distributed as well.  Gammas use the
shape-rate parameterisation throughout.

Interfaces are numbered ``b = 0..D`` (interface ``b`` sits in front of core
``b``), so the learnable precisions live at ``b = 1..D-1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats

# Floor applied to rates and variances before they are divided by.
FLOOR = 1e-12
DEFAULT_HYPER = 1e-6

STATE_MAGIC = b"TTMS"
STATE_VERSION = 1


@dataclass
class PriorHyper:
    """Gamma hyperparameters: one (alpha, beta) pair per interface slice plus tau's."""

    alpha: list
    beta: list
    alpha_tau: float = DEFAULT_HYPER
    beta_tau: float = DEFAULT_HYPER

    @classmethod
    def default(cls, ranks, value: float = DEFAULT_HYPER) -> "PriorHyper":
        inner = list(ranks[1:-1])
        return cls(
            alpha=[np.full(r, value) for r in inner],
            beta=[np.full(r, value) for r in inner],
            alpha_tau=value,
            beta_tau=value,
        )

    def validate(self) -> None:
        for a, b in zip(self.alpha, self.beta):
            if a.shape != b.shape:
                raise ValueError("alpha/beta shape mismatch")
            if not (np.all(a > 0) and np.all(b > 0)):
                raise ValueError("Gamma hyperparameters must be strictly positive")
        if not (self.alpha_tau > 0 and self.beta_tau > 0):
            raise ValueError("tau hyperparameters must be strictly positive")


@dataclass
class CorePosterior:
    """Factorised Gaussian posterior of one core: elementwise means and variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.ndim != 3 or self.mean.shape != self.var.shape:
            raise ValueError("core mean/var must be matching order-3 arrays")

    @property
    def shape(self):
        return self.mean.shape

    def second_moment(self) -> np.ndarray:
        """``E[G^2]`` elementwise."""
        return self.mean**2 + self.var

    def kron_covariance(self, j: int) -> np.ndarray:
        """Kronecker-form covariance ``V`` of slice ``j`` (``L^2 x L'^2``, one
        nonzero per ``(k, l)`` block)."""
        lk, ll, _ = self.mean.shape
        out = np.zeros((lk * lk, ll * ll))
        k = np.arange(lk)[:, None]
        l = np.arange(ll)[None, :]
        out[k * lk + k, l * ll + l] = self.var[:, :, j]
        return out


@dataclass
class LambdaPosterior:
    """Gamma posteriors for the slice precisions at one interface."""

    shape: np.ndarray
    rate: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.shape / self.rate


@dataclass
class TauPosterior:
    shape: float
    rate: float

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass
class ModelState:
    cores: list
    lambdas: list
    tau: TauPosterior
    prior: PriorHyper = field(default=None)

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> list[int]:
        return [c.shape[0] for c in self.cores] + [1]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores)

    def lambda_mean(self, b: int) -> np.ndarray:
        """``E[lambda]`` at interface ``b``; the outer interfaces are fixed at 1."""
        if b == 0 or b == self.order:
            return np.ones(1)
        return self.lambdas[b - 1].mean

    def means(self) -> list:
        return [c.mean for c in self.cores]

    def copy(self) -> "ModelState":
        return ModelState(
            cores=[CorePosterior(c.mean.copy(), c.var.copy()) for c in self.cores],
            lambdas=[LambdaPosterior(l.shape.copy(), l.rate.copy()) for l in self.lambdas],
            tau=TauPosterior(self.tau.shape, self.tau.rate),
            prior=PriorHyper(
                alpha=[a.copy() for a in self.prior.alpha],
                beta=[b.copy() for b in self.prior.beta],
                alpha_tau=self.prior.alpha_tau,
                beta_tau=self.prior.beta_tau,
            ),
        )

    def validate(self) -> None:
        """Raise ``ValueError`` if shapes are inconsistent or a parameter is not positive."""
        ranks = self.ranks
        if ranks[0] != 1 or self.cores[-1].shape[1] != 1:
            raise ValueError("boundary ranks must be 1")
        for d in range(self.order - 1):
            if self.cores[d].shape[1] != self.cores[d + 1].shape[0]:
                raise ValueError(f"rank mismatch between cores {d} and {d + 1}")
        if len(self.lambdas) != self.order - 1:
            raise ValueError("need one lambda posterior per inner interface")
        for b, lam in enumerate(self.lambdas, start=1):
            if lam.shape.shape != (ranks[b],) or lam.rate.shape != (ranks[b],):
                raise ValueError(f"lambda posterior at interface {b} has wrong length")
            if not (np.all(lam.shape > 0) and np.all(lam.rate > 0)):
                raise ValueError(f"non-positive lambda posterior at interface {b}")
        for d, core in enumerate(self.cores):
            if not np.all(core.var > 0):
                raise ValueError(f"non-positive variance in core {d}")
            if not (np.isfinite(core.mean).all() and np.isfinite(core.var).all()):
                raise ValueError(f"non-finite entries in core {d}")
        if not (self.tau.shape > 0 and self.tau.rate > 0):
            raise ValueError("non-positive tau posterior")
        if self.prior is not None:
            self.prior.validate()
            if [len(a) for a in self.prior.alpha] != ranks[1:-1]:
                raise ValueError("prior hyperparameters do not match the ranks")


def save_state(path, state: ModelState) -> None:
    """Versioned binary checkpoint: magic, version, sizes, then payloads in field order."""
    order = state.order
    parts = [
        STATE_MAGIC,
        struct.pack("<II", STATE_VERSION, order),
        struct.pack(f"<{order + 1}I", *state.ranks),
        struct.pack(f"<{order}I", *state.dims),
    ]

    def f64(x):
        parts.append(np.asarray(x, dtype="<f8").ravel(order="F").tobytes())

    for core in state.cores:
        f64(core.mean)
        f64(core.var)
    for lam in state.lambdas:
        f64(lam.shape)
        f64(lam.rate)
    f64([state.tau.shape, state.tau.rate])
    for a in state.prior.alpha:
        f64(a)
    for b in state.prior.beta:
        f64(b)
    f64([state.prior.alpha_tau, state.prior.beta_tau])
    Path(path).write_bytes(b"".join(parts))


def load_state(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: not a model state file")
    version, order = struct.unpack_from("<II", raw, 4)
    if version != STATE_VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    pos = 12
    ranks = struct.unpack_from(f"<{order + 1}I", raw, pos)
    pos += 4 * (order + 1)
    dims = struct.unpack_from(f"<{order}I", raw, pos)
    pos += 4 * order

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        return arr.reshape(shape, order="F").astype(np.float64)

    cores = []
    for d in range(order):
        shape = (ranks[d], ranks[d + 1], dims[d])
        cores.append(CorePosterior(take(shape), take(shape)))
    lambdas = [LambdaPosterior(take((r,)), take((r,))) for r in ranks[1:-1]]
    tau_shape, tau_rate = take((2,))
    alpha = [take((r,)) for r in ranks[1:-1]]
    beta = [take((r,)) for r in ranks[1:-1]]
    alpha_tau, beta_tau = take((2,))
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelState(
        cores=cores,
        lambdas=lambdas,
        tau=TauPosterior(float(tau_shape), float(tau_rate)),
        prior=PriorHyper(alpha, beta, float(alpha_tau), float(beta_tau)),
    )


# --- univariate Gaussian-product-Gamma analysis -------------------------------


def lambda_conditional(x: float, lambda2: float, alpha1: float, beta1: float):
    """Shape and rate of ``p(lambda1 | x, lambda2)``, a Gamma by conditional conjugacy."""
    return alpha1 + 0.5, 0.5 * lambda2 * x * x + beta1


def log_joint(x, lambda1, lambda2, alpha1, beta1, alpha2, beta2):
    """Log density of ``(x, lambda1, lambda2)`` under the univariate model."""
    from scipy.special import gammaln

    return (
        alpha1 * np.log(beta1)
        + alpha2 * np.log(beta2)
        - 0.5 * np.log(2 * np.pi)
        - gammaln(alpha1)
        - gammaln(alpha2)
        + (alpha1 - 0.5) * np.log(lambda1)
        + (alpha2 - 0.5) * np.log(lambda2)
        - (0.5 * lambda1 * lambda2 * x * x + beta1 * lambda1 + beta2 * lambda2)
    )


class ConjugacyCheck(NamedTuple):
    empirical_mean: float
    empirical_var: float
    analytic_mean: float
    analytic_var: float
    se_mean: float
    se_var: float

    def passes(self, n_sigma: float = 3.0) -> bool:
        return (
            abs(self.empirical_mean - self.analytic_mean) <= n_sigma * self.se_mean
            and abs(self.empirical_var - self.analytic_var) <= n_sigma * self.se_var
        )


def conjugacy_oracle(
    x: float,
    lambda2: float,
    hyper,
    n_samples: int = 200_000,
    seed=None,
) -> ConjugacyCheck:
    """Monte-Carlo check of the conditional Gamma posterior of ``lambda1``.

    Samples are drawn from the claimed Gamma and importance-weighted by the
    joint density over the proposal density, so the weighted moments estimate
    the moments of the true conditional whatever the claim.  ``hyper`` is
    ``(alpha1, beta1, alpha2, beta2)``.
    """
    alpha1, beta1, alpha2, beta2 = hyper
    if n_samples < 100_000:
        raise ValueError("use at least 1e5 samples")
    if min(hyper) <= 0 or lambda2 <= 0:
        raise ValueError("hyperparameters and lambda2 must be positive")
    shape, rate = lambda_conditional(x, lambda2, alpha1, beta1)
    rng = np.random.default_rng(seed)
    lam = rng.gamma(shape, 1.0 / rate, size=n_samples)
    lam = np.maximum(lam, np.finfo(float).tiny)
    log_w = log_joint(x, lam, lambda2, alpha1, beta1, alpha2, beta2) - stats.gamma.logpdf(
        lam, shape, scale=1.0 / rate
    )
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    ess = 1.0 / np.sum(w**2)
    mean = float(np.sum(w * lam))
    centred = lam - mean
    var = float(np.sum(w * centred**2))
    m4 = float(np.sum(w * centred**4))
    return ConjugacyCheck(
        empirical_mean=mean,
        empirical_var=var,
        analytic_mean=shape / rate,
        analytic_var=shape / rate**2,
        se_mean=float(np.sqrt(var / ess)),
        se_var=float(np.sqrt(max(m4 - var**2, 0.0) / ess)),
    )


def slice_prior_log_density(slice_: np.ndarray, J_d: int | None = None) -> float:
    """Unnormalised log prior of a horizontal slice ``G[k, :, :]`` in the
    vanishing-hyperparameter limit: ``sum_l -(J_d/2) log(sum_j G[k,l,j]^2)``.

    ``slice_`` is ``(L_{d+1}, J_d)``.  The density is singular when a fibre is
    identically zero; that case is reported as ``-inf``.
    """
    slice_ = np.atleast_2d(np.asarray(slice_, dtype=np.float64))
    if J_d is None:
        J_d = slice_.shape[1]
    elif J_d != slice_.shape[1]:
        raise ValueError(f"slice has {slice_.shape[1]} columns, J_d={J_d}")
    energy = np.sum(slice_**2, axis=1)
    if np.any(energy == 0.0):
        return -np.inf
    return float(np.sum(-0.5 * J_d * np.log(energy)))
