"""Mean-field variational inference for the Bayesian TT model.

One sweep updates the cores left to right, then the slice precisions
``lambda``, then the noise precision ``tau``, and finally prunes slices whose
precision has run away from the rest.

Notation used in the code: for core ``d`` the observed tensor is viewed as
``(P, J, S)`` where ``P`` runs over the multi-index prefix ``j_1..j_{d-1}`` and
``S`` over the suffix ``j_{d+1}..j_D`` (both C order).  The contraction caches
hold, per prefix, the row vector ``E[t]`` (``P x L_d``) and the second-moment
matrix ``E[t^T t]`` (``P x L_d x L_d``), and the analogous suffix quantities.
The second-moment matrix is the Kronecker chain ``E[b] = prod E[G (x) G]``
reshaped to ``L x L``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .model import FLOOR, CorePosterior, ModelState
from .tensor import check_mask, kron, tt_contract
from .ttsvd import InitConfig, init_state

log = logging.getLogger(__name__)

_VAR_FLOOR = np.finfo(np.float64).tiny


class FitError(RuntimeError):
    """Raised when the iteration produces non-finite values.

    ``state`` holds the last valid posterior and ``report`` the history so far.
    """

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass
class FitOptions:
    max_iters: int = 100
    rel_tol: float = 1e-6
    prune_ratio: float = 100.0
    fast_path_observed_fraction: float = 0.9
    seed: int | None = 0
    prune: bool = True
    # slices with more than this many (k, l) unknowns are solved by CG; CG is
    # warm-started at the current means, so even a truncated solve lowers the
    # slice objective and the bound still increases
    dense_limit: int = 1024
    cg_tol: float = 1e-6
    cg_max_iters: int = 50
    # stop after the sweep that crosses this wall-clock budget
    max_seconds: float | None = None

    def __post_init__(self):
        if self.prune_ratio <= 1:
            raise ValueError("prune_ratio must exceed 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValueError("max_seconds must be positive")


@dataclass
class FitReport:
    ranks_history: list = field(default_factory=list)
    rse_history: list = field(default_factory=list)
    e_tau_history: list = field(default_factory=list)
    e_tau: float = float("nan")
    iterations: int = 0
    wall_time_ms: float = 0.0
    converged: bool = False
    status: str = "running"
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def csv_rows(self):
        """Per-iteration rows ``(iter, ranks, rse, e_tau)`` with ranks joined by ``x``."""
        for i, (ranks, rse, tau) in enumerate(
            zip(self.ranks_history, self.rse_history, self.e_tau_history), start=1
        ):
            yield i, "x".join(str(r) for r in ranks), rse, tau


# --- expectations of slices ---------------------------------------------------


def expected_kron_slice(core: CorePosterior, j: int) -> np.ndarray:
    """``E[G_j (x) G_j] = E[G_j] (x) E[G_j] + V_j`` for frontal slice ``j``."""
    m = core.mean[:, :, j]
    return kron(m, m) + core.kron_covariance(j)


def _left_step(tl, bl, core: CorePosterior, summed: bool):
    """Extend prefix chains by one core.

    ``tl``: (P, L), ``bl``: (P, L, L) -> (P*J, L'), (P*J, L', L') or, when
    ``summed``, the second moments are summed over all prefixes: (1, L', L').
    """
    ms = np.moveaxis(core.mean, 2, 0)  # (J, L, L')
    lp = ms.shape[2]
    tl_new = np.einsum("pk,jkl->pjl", tl, ms).reshape(-1, lp)
    if summed:
        x = bl.sum(axis=0)
        y = np.matmul(x[None], ms)  # (J, L, L')
        z = np.matmul(ms.transpose(0, 2, 1), y).sum(axis=0)
        z[np.diag_indices(lp)] += np.einsum("k,klj->l", np.diagonal(x), core.var)
        return tl_new, z[None]
    y = np.matmul(bl[:, None], ms[None])  # (P, J, L, L')
    z = np.matmul(ms.transpose(0, 2, 1)[None], y)  # (P, J, L', L')
    diag = np.einsum("pk,klj->pjl", np.diagonal(bl, axis1=1, axis2=2), core.var)
    idx = np.arange(lp)
    z[:, :, idx, idx] += diag
    return tl_new, z.reshape(-1, lp, lp)


def _right_step(tr, br, core: CorePosterior, summed: bool):
    """Extend suffix chains by one core (the new index is the slowest)."""
    ms = np.moveaxis(core.mean, 2, 0)  # (J, L, L')
    l = ms.shape[1]
    tr_new = np.einsum("jkl,sl->jsk", ms, tr).reshape(-1, l)
    if summed:
        y = br.sum(axis=0)
        z = np.matmul(np.matmul(ms, y[None]), ms.transpose(0, 2, 1)).sum(axis=0)
        z[np.diag_indices(l)] += np.einsum("klj,l->k", core.var, np.diagonal(y))
        return tr_new, z[None]
    y = np.matmul(ms[:, None], br[None])  # (J, S, L, L')
    z = np.matmul(y, ms.transpose(0, 2, 1)[:, None])  # (J, S, L, L)
    diag = np.einsum("klj,sl->jsk", core.var, np.diagonal(br, axis1=1, axis2=2))
    idx = np.arange(l)
    z[:, :, idx, idx] += diag
    return tr_new, z.reshape(-1, l, l)


def observed_fraction(mask) -> float:
    return float(np.count_nonzero(mask)) / mask.size


class ContractionCaches:
    """Lazily computed prefix/suffix chains of posterior expectations.

    ``left(d)`` gives the chains for the product of cores ``< d`` (``d`` in
    ``0..D``) and ``right(d)`` for cores ``> d`` (``d`` in ``-1..D-1``).  After
    core ``d`` changes, :meth:`invalidate` drops everything that depended on it.

    ``mode`` is ``"full"`` (fully observed: second moments are summed over
    prefixes, which is the product of per-mode sums), ``"subtractive"`` (nearly
    full: complete sums minus the missing entries) or ``"masked"``.
    """

    def __init__(self, state: ModelState, mask, opts: FitOptions | None = None):
        opts = opts or FitOptions()
        self.state = state
        self.mask = check_mask(mask, state.dims)
        frac = observed_fraction(self.mask)
        if frac == 1.0:
            self.mode = "full"
        elif frac >= opts.fast_path_observed_fraction:
            self.mode = "subtractive"
        else:
            self.mode = "masked"
        self.summed = self.mode == "full"
        D = state.order
        one = (np.ones((1, 1)), np.ones((1, 1, 1)))
        self._left = {0: one}
        self._right = {D - 1: one}

    def left(self, d: int):
        start = max(k for k in self._left if k <= d)
        tl, bl = self._left[start]
        for e in range(start, d):
            tl, bl = _left_step(tl, bl, self.state.cores[e], self.summed)
            self._left[e + 1] = (tl, bl)
        return self._left[d]

    def right(self, d: int):
        start = min(k for k in self._right if k >= d)
        tr, br = self._right[start]
        for e in range(start, d, -1):
            tr, br = _right_step(tr, br, self.state.cores[e], self.summed)
            self._right[e - 1] = (tr, br)
        return self._right[d]

    def invalidate(self, d: int) -> None:
        self._left = {k: v for k, v in self._left.items() if k <= d}
        self._right = {k: v for k, v in self._right.items() if k >= d}

    def discard(self, d: int) -> None:
        """Free chains that a left-to-right sweep positioned at core ``d`` no longer needs."""
        self._left = {k: v for k, v in self._left.items() if k >= d or k == 0}
        self._right = {k: v for k, v in self._right.items() if k >= d or k == self.state.order - 1}

    def summed_second_moments(self, d: int):
        """``sum_p E[t^T t]`` for the prefix and suffix of core ``d``."""
        _, bl = self.left(d)
        _, br = self.right(d)
        return bl.sum(axis=0), br.sum(axis=0)


# --- core update ----------------------------------------------------------------


def _core_views(a_obs, weights, state: ModelState, d: int):
    dims = state.dims
    P = int(np.prod(dims[:d], dtype=np.int64))
    S = int(np.prod(dims[d + 1 :], dtype=np.int64))
    J = dims[d]
    return a_obs.reshape(P, J, S), weights.reshape(P, J, S)


def _sandwich(left, w3, right):
    """``out[j, k, l] = sum_{p,s} left[p,k] w3[p,j,s] right[s,l]``."""
    P, J, S = w3.shape
    t1 = left.T @ w3.reshape(P, J * S)  # (L, J*S)
    L = t1.shape[0]
    t2 = t1.reshape(L * J, S) @ right  # (L*J, L')
    return t2.reshape(L, J, -1).transpose(1, 0, 2)


def _dense_coeff(bl, br, w3, j):
    """``C_j[(k,l),(k',l')] = sum_{p,s} w[p,j,s] bl[p,k,k'] br[s,l,l']``."""
    P, L, _ = bl.shape
    S, Lp, _ = br.shape
    w = w3[:, j, :] @ br.reshape(S, Lp * Lp)  # (P, L'^2)
    c = bl.reshape(P, L * L).T @ w  # (L^2, L'^2)
    return c.reshape(L, L, Lp, Lp).transpose(0, 2, 1, 3).reshape(L * Lp, L * Lp)


def _masked_matvec(bl, br, w3, m):
    """``out[j] = sum_{p,s} w[p,j,s] bl[p] @ m[j] @ br[s]`` for all slices ``j``."""
    P, J, S = w3.shape
    L, Lp = m.shape[1:]
    out = np.empty_like(m)
    blt = bl.transpose(1, 0, 2).reshape(L, P * L)
    for j in range(J):
        z = np.matmul(m[j][None], br)  # (S, L, L')
        u = w3[:, j, :] @ z.reshape(S, L * Lp)  # (P, L*L')
        out[j] = blt @ u.reshape(P * L, Lp)
    return out


def _solve_kron(sbl, sbr, lam_k, lam_l, tau, h):
    """Solve ``tau (A (x) B) x + (Dk (x) Dl) x = tau h`` for every slice in closed form.

    ``A``, ``B`` are PSD, ``Dk``, ``Dl`` positive diagonal; ``h`` is (J, L, L').
    """
    sk = 1.0 / np.sqrt(lam_k)
    sl = 1.0 / np.sqrt(lam_l)
    ea, ua = np.linalg.eigh(sk[:, None] * sbl * sk[None, :])
    eb, ub = np.linalg.eigh(sl[:, None] * sbr * sl[None, :])
    ea = np.maximum(ea, 0.0)
    eb = np.maximum(eb, 0.0)
    lk = sk[:, None] * ua  # Dk^{-1/2} U
    ll = sl[:, None] * ub
    rhs = lk.T[None] @ (tau * h) @ ll[None]
    rhs /= tau * np.outer(ea, eb)[None] + 1.0
    return lk[None] @ rhs @ ll.T[None]


def _batched_cg(apply, b, x0, diag, tol, max_iters):
    """Jacobi-preconditioned CG on a stack of independent SPD systems."""
    x = x0.copy()
    r = b - apply(x)
    z = r / diag
    p = z.copy()
    rz = np.einsum("jkl,jkl->j", r, z)
    bnorm = np.sqrt(np.einsum("jkl,jkl->j", b, b))
    bnorm[bnorm == 0] = 1.0
    for _ in range(max_iters):
        rnorm = np.sqrt(np.einsum("jkl,jkl->j", r, r))
        active = rnorm > tol * bnorm
        if not active.any():
            break
        ap = apply(p)
        pap = np.einsum("jkl,jkl->j", p, ap)
        alpha = np.where(active & (pap > 0), rz / np.where(pap > 0, pap, 1.0), 0.0)
        x += alpha[:, None, None] * p
        r -= alpha[:, None, None] * ap
        z = r / diag
        rz_new = np.einsum("jkl,jkl->j", r, z)
        beta = np.where(active & (rz > 0), rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        p = z + beta[:, None, None] * p
        rz = rz_new
    return x


def update_core(
    state: ModelState,
    caches: ContractionCaches,
    a: np.ndarray,
    mask: np.ndarray,
    d: int,
    opts: FitOptions | None = None,
) -> ModelState:
    """Update the Gaussian factors of core ``d`` (0-based) in place.

    The fibres ``G[k, l, :]`` of one core are coupled only through the cross
    terms of the same frontal slice, so for every slice ``j`` the jointly
    stationary means solve ``(tau C_j + Lambda) m_j = tau h_j`` where
    ``C_j`` collects the observed second-moment chains and
    ``Lambda = E[lambda_k] E[lambda_l]``.  At that point each fibre is the
    exact single-factor optimum given all others; the variances are
    ``1 / (tau diag(C_j) + Lambda)``.
    """
    opts = opts or FitOptions()
    core = state.cores[d]
    L, Lp, J = core.shape
    tau = state.tau.mean
    lam_k = state.lambda_mean(d)
    lam_l = state.lambda_mean(d + 1)
    prior_prec = np.outer(lam_k, lam_l)

    weights = caches.mask.astype(np.float64)
    a_obs = np.where(caches.mask, a, 0.0)
    a3, w3 = _core_views(a_obs, weights, state, d)
    tl, bl = caches.left(d)
    tr, br = caches.right(d)
    h = _sandwich(tl, a3, tr)  # (J, L, L')

    mode = caches.mode
    if mode == "full":
        sbl, sbr = bl[0], br[0]
        diag_c = np.broadcast_to(np.outer(np.diag(sbl), np.diag(sbr)), (J, L, Lp))
        mean = _solve_kron(sbl, sbr, lam_k, lam_l, tau, h)
    else:
        dbl = np.diagonal(bl, axis1=1, axis2=2)
        dbr = np.diagonal(br, axis1=1, axis2=2)
        if mode == "subtractive":
            sbl, sbr = bl.sum(axis=0), br.sum(axis=0)
            w_miss = 1.0 - w3
            diag_c = np.outer(np.diag(sbl), np.diag(sbr))[None] - _sandwich(dbl, w_miss, dbr)
        else:
            diag_c = _sandwich(dbl, w3, dbr)
        n = L * Lp
        if n <= opts.dense_limit:
            mean = np.empty((J, L, Lp))
            if mode == "subtractive":
                # row-major (k, l) ordering makes the full sum a plain Kronecker product
                c_full = np.kron(sbl, sbr)
            for j in range(J):
                if mode == "subtractive":
                    c = c_full - _dense_coeff(bl, br, w_miss, j)
                else:
                    c = _dense_coeff(bl, br, w3, j)
                sys_mat = tau * c
                sys_mat[np.diag_indices(n)] += prior_prec.ravel()
                rhs = tau * h[j].ravel()
                try:
                    mean[j] = scipy.linalg.cho_solve(
                        scipy.linalg.cho_factor(sys_mat, check_finite=False), rhs
                    ).reshape(L, Lp)
                except np.linalg.LinAlgError:
                    mean[j] = np.linalg.solve(sys_mat, rhs).reshape(L, Lp)
        else:
            if mode == "subtractive":

                def apply(m):
                    full = np.matmul(np.matmul(sbl[None], m), sbr[None])
                    return tau * (full - _masked_matvec(bl, br, w_miss, m)) + prior_prec * m

            else:

                def apply(m):
                    return tau * _masked_matvec(bl, br, w3, m) + prior_prec * m

            precond = tau * diag_c + prior_prec[None]
            x0 = np.moveaxis(core.mean, 2, 0)
            mean = _batched_cg(apply, tau * h, x0, precond, opts.cg_tol, opts.cg_max_iters)

    prec = tau * np.maximum(diag_c, 0.0) + prior_prec[None]
    var = np.maximum(1.0 / prec, _VAR_FLOOR)
    if not (np.isfinite(mean).all() and np.isfinite(var).all()):
        raise FitError(f"non-finite values while updating core {d}")
    core.mean = np.ascontiguousarray(np.moveaxis(mean, 0, 2))
    core.var = np.ascontiguousarray(np.moveaxis(var, 0, 2))
    caches.invalidate(d)
    return state


# --- Gamma updates ----------------------------------------------------------------


def update_lambda(state: ModelState, b: int) -> ModelState:
    """Update the Gamma posteriors at interface ``b`` (1..D-1), in place.

    ``lambda_k`` scales the precision of lateral slice ``k`` of core ``b-1``
    and horizontal slice ``k`` of core ``b``.
    """
    D = state.order
    if not 1 <= b <= D - 1:
        raise ValueError(f"interface {b} outside 1..{D - 1}")
    prev, nxt = state.cores[b - 1], state.cores[b]
    l_prev, _, j_prev = prev.shape
    _, l_next, j_next = nxt.shape
    alpha = state.prior.alpha[b - 1]
    beta = state.prior.beta[b - 1]
    shape = 0.5 * j_next * l_next + 0.5 * j_prev * l_prev + alpha
    rate = (
        0.5 * np.einsum("klj,l->k", nxt.second_moment(), state.lambda_mean(b + 1))
        + 0.5 * np.einsum("lkj,l->k", prev.second_moment(), state.lambda_mean(b - 1))
        + beta
    )
    lam = state.lambdas[b - 1]
    lam.shape = np.asarray(shape, dtype=np.float64)
    lam.rate = np.maximum(rate, FLOOR)
    return state


def expected_fit_terms(state: ModelState, caches: ContractionCaches, a, mask):
    """``(sum O*A*E[y], sum O*E[y^2])`` over the observed entries."""
    D = state.order
    tl, bl = caches.left(D)
    a_obs = np.where(caches.mask, a, 0.0).reshape(-1)
    cross = float(a_obs @ tl[:, 0])
    if caches.mode == "full":
        second = float(bl[0, 0, 0])
    else:
        second = float(caches.mask.reshape(-1) @ bl[:, 0, 0])
    return cross, second


def update_tau(state: ModelState, caches: ContractionCaches, a, mask) -> ModelState:
    """Update ``q(tau)`` in place from the expected masked squared residual."""
    mask = caches.mask
    a = np.asarray(a, dtype=np.float64)
    n_obs = int(np.count_nonzero(mask))
    cross, second = expected_fit_terms(state, caches, a, mask)
    data = float(np.sum(a[mask] ** 2))
    resid = data - 2.0 * cross + second
    rate = 0.5 * resid + state.prior.beta_tau
    if not np.isfinite(rate):
        raise FitError("non-finite noise rate")
    # resid is an expectation of a square and can only dip below 0 by rounding
    state.tau.shape = 0.5 * n_obs + state.prior.alpha_tau
    state.tau.rate = max(rate, FLOOR)
    return state


# --- fast coefficient evaluation ----------------------------------------------


def _kron_chain(cores, idx, lo, hi):
    """Row vector ``prod_{n=lo}^{hi-1} E[G_n (x) G_n]`` at multi-index ``idx``."""
    out = np.ones((1, 1))
    for n in range(lo, hi):
        out = out @ expected_kron_slice(cores[n], idx[n])
    return out


def _direct_coeffs(cores, d, entries):
    L, Lp, J = cores[d].shape
    D = len(cores)
    c = np.zeros((J, L, Lp))
    kk = np.arange(L) * L + np.arange(L)
    ll = np.arange(Lp) * Lp + np.arange(Lp)
    for idx in entries:
        left = _kron_chain(cores, idx, 0, d)[0]
        right = np.ones((1, 1))
        for n in range(D - 1, d, -1):
            right = expected_kron_slice(cores[n], idx[n]) @ right
        c[idx[d]] += np.outer(left[kk], right[ll, 0])
    return c


def _mode_sum(core):
    return sum(expected_kron_slice(core, j) for j in range(core.shape[2]))


def precision_coefficients(cores, mask, d, method="fast", min_fraction=0.9):
    """All ``c(j_d)`` for core ``d`` as a ``(J, L_d, L_{d+1})`` array.

    ``c(j)[k, l] = sum over observed entries with index j at mode d of
    E[b_left]_{kL+k} E[b_right]_{lL'+l}``.  ``method`` is ``"direct"``
    (literal sum over entries), ``"fast"`` (fully observed only: product of
    per-mode sums) or ``"subtractive"`` (fast minus the missing entries;
    requires an observed fraction of at least ``min_fraction``).
    """
    mask = np.asarray(mask, dtype=bool)
    L, Lp, J = cores[d].shape
    if method == "direct":
        return _direct_coeffs(cores, d, zip(*np.nonzero(mask)))
    frac = observed_fraction(mask)
    if method == "fast" and frac < 1.0:
        raise ValueError("the product-of-sums form requires a fully observed tensor")
    if method == "subtractive" and frac < min_fraction:
        raise ValueError(
            f"observed fraction {frac:.3f} is below the subtractive threshold {min_fraction}"
        )
    if method not in ("fast", "subtractive"):
        raise ValueError(f"unknown method {method!r}")
    left = np.ones((1, 1))
    for n in range(d):
        left = left @ _mode_sum(cores[n])
    right = np.ones((1, 1))
    for n in range(len(cores) - 1, d, -1):
        right = _mode_sum(cores[n]) @ right
    kk = np.arange(L) * L + np.arange(L)
    ll = np.arange(Lp) * Lp + np.arange(Lp)
    full = np.outer(left[0, kk], right[ll, 0])
    c = np.broadcast_to(full, (J, L, Lp)).copy()
    if method == "subtractive":
        c -= _direct_coeffs(cores, d, zip(*np.nonzero(~mask)))
    return c


def fast_c(cores, d, k, l, mask=None, method="fast", min_fraction=0.9) -> np.ndarray:
    """``c(j_d)`` for one ``(k, l)`` pair, as a vector over ``j_d``."""
    if mask is None:
        mask = np.ones(tuple(c.shape[2] for c in cores), dtype=bool)
    return precision_coefficients(cores, mask, d, method, min_fraction)[:, k, l]


# --- rank pruning ---------------------------------------------------------------


def prune_ranks(state: ModelState, prune_ratio: float = 100.0):
    """Drop slices whose ``E[lambda]`` exceeds ``prune_ratio`` times the interface
    minimum.  Returns ``(state, pruned)`` with one boolean array per interface.

    Removing ``lambda_k`` at interface ``b`` deletes lateral slice ``k`` of core
    ``b-1`` and horizontal slice ``k`` of core ``b``.  The smallest precision is
    always kept, so no rank drops below 1.
    """
    pruned = []
    for b in range(1, state.order):
        lam = state.lambdas[b - 1]
        e = lam.mean
        drop = e > prune_ratio * e.min()
        pruned.append(drop)
        if not drop.any():
            continue
        keep = ~drop
        prev, nxt = state.cores[b - 1], state.cores[b]
        prev.mean = np.ascontiguousarray(prev.mean[:, keep, :])
        prev.var = np.ascontiguousarray(prev.var[:, keep, :])
        nxt.mean = np.ascontiguousarray(nxt.mean[keep])
        nxt.var = np.ascontiguousarray(nxt.var[keep])
        lam.shape = lam.shape[keep]
        lam.rate = lam.rate[keep]
        state.prior.alpha[b - 1] = state.prior.alpha[b - 1][keep]
        state.prior.beta[b - 1] = state.prior.beta[b - 1][keep]
    return state, pruned


# --- driver -----------------------------------------------------------------------


def reconstruct(state: ModelState) -> np.ndarray:
    """Dense tensor of posterior means."""
    return tt_contract(state.means())


def sweep(state: ModelState, a, mask, opts: FitOptions) -> ModelState:
    """One pass of the update schedule (without pruning)."""
    caches = ContractionCaches(state, mask, opts)
    for d in range(state.order):
        update_core(state, caches, a, mask, d, opts)
        caches.discard(d + 1)
    for b in range(1, state.order):
        update_lambda(state, b)
    update_tau(state, caches, a, mask)
    return state


def fit(
    a,
    mask,
    opts: FitOptions | None = None,
    init: InitConfig | None = None,
    hyper: float = 1e-6,
    truth=None,
    state: ModelState | None = None,
    callback=None,
    threads: int | None = 1,
):
    """Run variational inference until the masked reconstruction settles.

    Returns ``(state, report)``.  ``rse_history`` is measured against ``truth``
    when given, otherwise it is the relative residual on the observed entries.
    ``state`` resumes from a previous posterior instead of initialising.
    Raises :class:`FitError` (carrying the last valid state) on divergence.
    """
    from threadpoolctl import threadpool_limits

    opts = opts or FitOptions()
    a = np.asarray(a, dtype=np.float64)
    mask = check_mask(mask, a.shape)
    if not mask.any():
        raise ValueError("the mask has no observed entries")
    if not np.isfinite(a[mask]).all():
        raise ValueError("observed entries must be finite")
    a = np.where(mask, a, 0.0)
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        truth_norm = np.linalg.norm(truth)
    obs_norm = np.linalg.norm(a[mask])
    report = FitReport()
    start = time.perf_counter()

    with threadpool_limits(limits=threads):
        if state is None:
            init = init or InitConfig(fill_seed=opts.seed)
            state = init_state(a, mask, init, hyper)
        prev = reconstruct(state)[mask]
        for it in range(1, opts.max_iters + 1):
            backup = state.copy()
            try:
                sweep(state, a, mask, opts)
                if opts.prune:
                    prune_ranks(state, opts.prune_ratio)
                recon = reconstruct(state)
                if not np.isfinite(recon).all():
                    raise FitError("non-finite reconstruction")
            except (FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
                report.status = "failed"
                report.message = f"iteration {it}: {exc}"
                report.wall_time_ms = 1e3 * (time.perf_counter() - start)
                raise FitError(report.message, state=backup, report=report) from exc

            if truth is not None:
                rse = float(np.linalg.norm(truth - recon) / truth_norm)
            else:
                rse = float(np.linalg.norm(a[mask] - recon[mask]) / max(obs_norm, FLOOR))
            cur = recon[mask]
            change = float(np.linalg.norm(cur - prev) / max(np.linalg.norm(prev), FLOOR))
            prev = cur
            report.ranks_history.append(state.ranks)
            report.rse_history.append(rse)
            report.e_tau_history.append(state.tau.mean)
            report.iterations = it
            log.debug("iter %d ranks=%s rse=%.3e change=%.3e", it, state.ranks, rse, change)
            if callback is not None:
                callback(it, state, report)
            if change < opts.rel_tol:
                report.converged = True
                break
            if opts.max_seconds is not None and time.perf_counter() - start > opts.max_seconds:
                report.status = "max_time"
                break

    report.e_tau = state.tau.mean
    if report.converged:
        report.status = "converged"
    elif report.status != "max_time":
        report.status = "max_iters"
    report.wall_time_ms = 1e3 * (time.perf_counter() - start)
    return state, report
