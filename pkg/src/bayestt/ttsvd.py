"""TT-SVD and construction of the initial variational state."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import numerical_rank, truncated_svd
from .model import (
    DEFAULT_HYPER,
    CorePosterior,
    LambdaPosterior,
    ModelState,
    PriorHyper,
    TauPosterior,
)
from .tensor import TensorTrain, check_mask, unfold


@dataclass
class InitConfig:
    rank_cap_multiplier: int = 15
    fill_seed: int | None = 0
    svd_rel_tol: float | None = None  # None -> numerical_rank default
    # posterior variance of every core element at the start
    init_variance: float = 1.0
    # when set, E[tau] starts at 10^(snr/10) / mean(observed^2) instead of 1
    init_snr_db: float | None = None

    def __post_init__(self):
        if self.rank_cap_multiplier < 1:
            raise ValueError("rank_cap_multiplier must be >= 1")
        if not self.init_variance > 0:
            raise ValueError("init_variance must be positive")


def _check_ranks(dims: Sequence[int], ranks: Sequence[int]) -> list[int]:
    ranks = [int(r) for r in ranks]
    D = len(dims)
    if len(ranks) != D + 1:
        raise ValueError(f"expected {D + 1} ranks for an order-{D} tensor, got {len(ranks)}")
    if ranks[0] != 1 or ranks[-1] != 1:
        raise ValueError("boundary TT ranks must be 1")
    for d in range(1, D):
        left_bound = ranks[d - 1] * dims[d - 1]
        right_bound = int(np.prod(dims[d:]))
        if not 1 <= ranks[d] <= min(left_bound, right_bound):
            raise ValueError(
                f"rank L_{d + 1}={ranks[d]} is infeasible "
                f"(must lie in 1..{min(left_bound, right_bound)})"
            )
    return ranks


def tt_svd(t: np.ndarray, ranks: Sequence[int]) -> TensorTrain:
    """Left-to-right sequential truncated-SVD sweep with prescribed TT ranks."""
    t = np.asarray(t, dtype=np.float64)
    dims = t.shape
    ranks = _check_ranks(dims, ranks)
    cores = []
    rest = t.reshape(1, -1)
    for d in range(len(dims) - 1):
        mat = rest.reshape(ranks[d] * dims[d], -1)
        u, s, v = truncated_svd(mat, ranks[d + 1])
        cores.append(u.reshape(ranks[d], dims[d], ranks[d + 1]).transpose(0, 2, 1))
        rest = s[:, None] * v.T
    cores.append(rest.reshape(ranks[-2], dims[-1], 1).transpose(0, 2, 1))
    return TensorTrain(cores)


def max_ranks(t: np.ndarray, cfg: InitConfig | None = None) -> list[int]:
    """Initial ranks ``L_d = min(rank(A_[d-1]), cap * J_d)``.

    Each rank is additionally clipped to what a TT-SVD sweep can realise, which
    only binds when the cap is hit on a neighbouring interface.
    """
    cfg = cfg or InitConfig()
    t = np.asarray(t, dtype=np.float64)
    dims = t.shape
    D = len(dims)
    ranks = [1] * (D + 1)
    for d in range(1, D):
        r = numerical_rank(unfold(t, d), cfg.svd_rel_tol)
        ranks[d] = max(1, min(r, cfg.rank_cap_multiplier * dims[d]))
    for d in range(1, D):
        ranks[d] = min(ranks[d], ranks[d - 1] * dims[d - 1])
    for d in range(D - 1, 0, -1):
        ranks[d] = min(ranks[d], ranks[d + 1] * dims[d])
    return ranks


def fill_missing(a: np.ndarray, mask: np.ndarray, seed) -> np.ndarray:
    """Replace unobserved entries with i.i.d. N(0, 1) draws."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(a.shape)
    return np.where(mask, a, noise)


def init_state(
    a: np.ndarray,
    mask: np.ndarray,
    cfg: InitConfig | None = None,
    hyper: float = DEFAULT_HYPER,
) -> ModelState:
    """Initial posterior: TT-SVD means of the randomly completed tensor, unit
    variances, and ``E[lambda] = E[tau] = 1`` from equal shape and rate.

    ``cfg.init_variance`` and ``cfg.init_snr_db`` override the variances and
    the starting noise precision; the priors are unaffected.
    """
    cfg = cfg or InitConfig()
    a = np.asarray(a, dtype=np.float64)
    mask = check_mask(mask, a.shape)
    filled = fill_missing(a, mask, cfg.fill_seed)
    ranks = max_ranks(filled, cfg)
    tt = tt_svd(filled, ranks)
    prior = PriorHyper.default(ranks, hyper)
    tau = TauPosterior(prior.alpha_tau, prior.beta_tau)
    if cfg.init_snr_db is not None:
        power = float(np.mean(a[mask] ** 2))
        if power > 0:
            tau.rate = tau.shape * power / 10.0 ** (cfg.init_snr_db / 10.0)
    return ModelState(
        cores=[CorePosterior(c, np.full_like(c, cfg.init_variance)) for c in tt.cores],
        lambdas=[LambdaPosterior(a_.copy(), b_.copy()) for a_, b_ in zip(prior.alpha, prior.beta)],
        tau=tau,
        prior=prior,
    )
