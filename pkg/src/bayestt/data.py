"""Synthetic TT data, noise and missing-data masks, and evaluation metrics.

All randomness comes from ``numpy.random.default_rng`` (PCG64), seeded
explicitly, so generated data is reproducible across platforms.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import TensorTrain, tt_contract
from .ttsvd import _check_ranks


@dataclass
class SynthSpec:
    dims: tuple
    true_ranks: tuple
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(j) for j in self.dims)
        self.true_ranks = tuple(_check_ranks(self.dims, self.true_ranks))


def gen_synthetic(spec: SynthSpec):
    """Cores with i.i.d. N(0, 1) entries and their contraction ``(tensor, cores)``."""
    rng = np.random.default_rng(spec.seed)
    r, dims = spec.true_ranks, spec.dims
    cores = [rng.standard_normal((r[d], r[d + 1], dims[d])) for d in range(len(dims))]
    tt = TensorTrain(cores)
    return tt_contract(tt), tt


def snr_db(signal, noise) -> float:
    """``20 log10(||signal|| / ||noise||)``; ``inf`` for zero noise."""
    nn = np.linalg.norm(noise)
    if nn == 0:
        return math.inf
    return 20.0 * math.log10(np.linalg.norm(signal) / nn)


def add_noise(t, snr, seed):
    """Add Gaussian noise rescaled so the realised SNR equals ``snr`` dB.

    ``snr = inf`` adds nothing.  Returns ``(noisy, noise)``.
    """
    t = np.asarray(t, dtype=np.float64)
    if math.isinf(snr) and snr > 0:
        noise = np.zeros_like(t)
        return t.copy(), noise
    if not math.isfinite(snr):
        raise ValueError(f"invalid SNR {snr}")
    signal = np.linalg.norm(t)
    if signal == 0:
        raise ValueError("cannot set an SNR relative to an all-zero signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(t.shape)
    noise *= signal / (np.linalg.norm(noise) * 10.0 ** (snr / 20.0))
    return t + noise, noise


def random_mask(dims, missing_rate: float, seed) -> np.ndarray:
    """Each entry observed independently with probability ``1 - missing_rate``."""
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    mask = rng.random(tuple(dims)) >= missing_rate
    if not mask.any():
        raise ValueError("mask has no observed entries; use a lower missing rate")
    return mask


@dataclass
class StripeSpec:
    """Stripes of ``width`` columns (rows when ``axis=0``) repeating every
    ``period``.  With ``offset=None`` each stripe sits at the end of its period,
    so ``period=3, width=1`` removes every 3rd column.  ``random_offset`` draws
    the offset from the seed instead.  All bands lose the same stripes."""

    period: int = 3
    width: int = 1
    offset: int | None = None
    axis: int = 1
    random_offset: bool = False

    def __post_init__(self):
        if not 1 <= self.width < self.period:
            raise ValueError("stripe width must be in 1..period-1")
        if self.axis not in (0, 1):
            raise ValueError("stripe axis must be 0 (rows) or 1 (columns)")


def stripe_mask(dims, spec: StripeSpec | None = None, seed=0) -> np.ndarray:
    """Mask for ``(H, W[, bands...])`` data with whole columns (rows) removed."""
    spec = spec or StripeSpec()
    dims = tuple(dims)
    if len(dims) < 2:
        raise ValueError("stripe masks need at least two spatial dimensions")
    n = dims[spec.axis]
    if spec.random_offset:
        offset = int(np.random.default_rng(seed).integers(spec.period))
    elif spec.offset is None:
        offset = spec.period - spec.width
    else:
        offset = spec.offset
    missing = ((np.arange(n) - offset) % spec.period) < spec.width
    shape = [1] * len(dims)
    shape[spec.axis] = n
    mask = np.broadcast_to(~missing.reshape(shape), dims).copy()
    if not mask.any():
        raise ValueError("stripe spec removes every entry")
    return mask


# --- metrics ----------------------------------------------------------------------


def rse(truth, estimate) -> float:
    """``||truth - estimate||_F / ||truth||_F``."""
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {estimate.shape}")
    nt = np.linalg.norm(truth)
    if nt == 0:
        raise ValueError("RSE is undefined for an all-zero reference")
    return float(np.linalg.norm(truth - estimate) / nt)


def psnr(img, img_hat, data_range: float | None = None) -> float:
    """``20 log10(max(img) sqrt(#entries) / ||img - img_hat||_F)`` in dB.

    ``data_range`` overrides ``max(img)``.  Identical inputs give ``inf``.
    """
    img = np.asarray(img, dtype=np.float64)
    img_hat = np.asarray(img_hat, dtype=np.float64)
    if img.shape != img_hat.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {img_hat.shape}")
    peak = float(img.max()) if data_range is None else float(data_range)
    if peak <= 0:
        raise ValueError("PSNR needs a positive peak value")
    err = np.linalg.norm(img - img_hat)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(peak * math.sqrt(img.size) / err)


_SSIM_K1, _SSIM_K2, _SSIM_SIGMA, _SSIM_WIN = 0.01, 0.03, 1.5, 11


def _ssim_map(x, y, data_range):
    trunc = (_SSIM_WIN // 2) / _SSIM_SIGMA

    def blur(z):
        return gaussian_filter(z, _SSIM_SIGMA, truncate=trunc, mode="reflect")

    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    # unbiased local covariances, as in the reference implementation
    n = _SSIM_WIN * _SSIM_WIN
    cov = n / (n - 1.0)
    sxx = cov * (blur(x * x) - mx * mx)
    syy = cov * (blur(y * y) - my * my)
    sxy = cov * (blur(x * y) - mx * my)
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    pad = _SSIM_WIN // 2
    return (num / den)[pad:-pad, pad:-pad]


def ssim(img, img_hat, data_range: float | None = None) -> float:
    """Mean structural similarity of two 2-D images.

    Gaussian 11x11 window with sigma 1.5, ``K1 = 0.01``, ``K2 = 0.03``; the
    dynamic range defaults to ``max(img)``.  Border pixels whose window would
    leave the image are excluded.
    """
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(img_hat, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ValueError("ssim expects a single 2-D band; use metric_report for stacks")
    if min(x.shape) < _SSIM_WIN:
        raise ValueError(f"images must be at least {_SSIM_WIN}x{_SSIM_WIN}")
    rng = float(x.max()) if data_range is None else float(data_range)
    if rng <= 0:
        raise ValueError("SSIM needs a positive dynamic range")
    if np.array_equal(x, y):
        return 1.0
    return float(_ssim_map(x, y, rng).mean())


@dataclass
class MetricReport:
    rse: float
    psnr: float
    ssim: float | None = None
    band_psnr: list = field(default_factory=list)
    band_ssim: list = field(default_factory=list)
    mpsnr: float | None = None
    mssim: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _bands(t: np.ndarray):
    if t.ndim == 2:
        return [t]
    flat = t.reshape(t.shape[0], t.shape[1], -1)
    return [flat[:, :, b] for b in range(flat.shape[2])]


def metric_report(truth, estimate, image: bool | None = None) -> MetricReport:
    """RSE and PSNR for any tensors; SSIM and per-band means for images.

    ``image`` defaults to "at least two dimensions and both of the first two
    are >= 11".  For stacks ``(H, W, bands...)``, ``ssim`` is the mean over
    bands (MSSIM) and per-band PSNR values use each band's own peak.  Overall
    PSNR uses the global peak.
    """
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {estimate.shape}")
    if image is None:
        image = truth.ndim >= 2 and min(truth.shape[:2]) >= _SSIM_WIN
    report = MetricReport(rse=rse(truth, estimate), psnr=psnr(truth, estimate))
    if image:
        peak = float(truth.max())
        pairs = list(zip(_bands(truth), _bands(estimate)))
        report.band_psnr = [psnr(a, b, data_range=max(a.max(), 0) or peak) for a, b in pairs]
        report.band_ssim = [ssim(a, b, data_range=peak) for a, b in pairs]
        report.mpsnr = float(np.mean(report.band_psnr))
        report.mssim = float(np.mean(report.band_ssim))
        report.ssim = report.mssim
    return report


def to_jsonable(x):
    """Replace non-finite floats with strings JSON can carry."""
    if isinstance(x, dict):
        return {k: to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x
