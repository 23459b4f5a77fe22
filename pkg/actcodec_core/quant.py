"""
Uniform scalar quantization, step/rate laws and rate allocation.

All functions are pure; inputs are never modified.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import bisect
from scipy.special import erfc

from actcodec_core import settings
from actcodec_core.errors import BracketError, DegenerateSpectrum, ValidationError

logger = logging.getLogger(__name__)

# Empirical fit of the Gaussian step/rate relation: step ~ 4.2184 * 2^-R.
STEP_RATE_CONSTANT = 4.2184
HIGH_RATE_FACTOR = math.pi * math.e / 6.0
TAIL_MASS = 1e-12
ENTROPY_TOL = 1e-4

ALLOCATION_MODES = ("clamp", "waterfill")


@dataclass(frozen=True)
class QuantizerSpec:
    """Mid-tread uniform quantizer: levels k * step, inputs clamped to +-clip."""

    step: float
    clip: float

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValidationError(f"quantizer step must be positive, got {self.step}")
        if not (self.clip >= self.step / 2 and math.isfinite(self.clip)):
            raise ValidationError(f"clip {self.clip} must be at least step/2 = {self.step / 2}")

    @property
    def max_index(self) -> int:
        return int(math.floor(self.clip / self.step))

    @property
    def levels(self) -> int:
        return 2 * self.max_index + 1


def quantize(x, spec: QuantizerSpec) -> np.ndarray:
    """Bin indices round(clamp(x) / step), halves rounded away from zero."""
    x = np.clip(np.asarray(x, dtype=np.float64), -spec.clip, spec.clip)
    scaled = x / spec.step
    k = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(k, -spec.max_index, spec.max_index).astype(np.int64)


def dequantize(k, spec: QuantizerSpec) -> np.ndarray:
    return np.asarray(k, dtype=np.float64) * spec.step


# ---------------------------------------------------------------------------
# Step <-> rate
# ---------------------------------------------------------------------------

def step_for_rate_approx(rate) -> float:
    if rate < 0:
        raise ValidationError(f"rate must be non-negative, got {rate}")
    return STEP_RATE_CONSTANT * 2.0 ** (-rate)


def _upper_tail(z):
    # 1 - Phi(z)
    return 0.5 * erfc(z / math.sqrt(2.0))


def gaussian_bin_probabilities(step, sigma=1.0) -> np.ndarray:
    """Probabilities of the mid-tread bins k = -K..K for N(0, sigma^2).

    K is the smallest index whose two-sided tail beyond it is below 1e-12.
    """
    ratio = step / sigma
    k_max = 0
    while 2.0 * _upper_tail((k_max + 0.5) * ratio) >= TAIL_MASS:
        k_max = max(2 * k_max, k_max + 1)
    edges = (np.arange(k_max + 1) + 0.5) * ratio
    tails = _upper_tail(edges)
    positive = tails[:-1] - tails[1:]
    centre = 1.0 - 2.0 * tails[0]
    return np.concatenate([positive[::-1], [centre], positive])


def gaussian_bin_entropy(step, sigma=1.0) -> float:
    p = gaussian_bin_probabilities(step, sigma)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


@lru_cache(maxsize=256)
def _unit_step_for_rate(rate: float) -> float:
    target = lambda step: gaussian_bin_entropy(step) - rate
    guess = step_for_rate_approx(rate)
    lo, hi = guess / 2.0, guess * 2.0
    for _ in range(60):
        if target(lo) > 0:
            break
        lo /= 2.0
    for _ in range(60):
        if target(hi) < 0:
            break
        hi *= 2.0
    if not (target(lo) > 0 > target(hi)):
        raise BracketError(f"cannot bracket a quantizer step for rate {rate} bits")
    step = bisect(target, lo, hi, xtol=1e-15, rtol=1e-13, maxiter=200)
    residual = abs(target(step))
    if residual > ENTROPY_TOL:
        raise BracketError(f"step for rate {rate} bits has entropy residual {residual:.2e}")
    logger.debug("step for rate %.4f bits: %.6g (entropy residual %.1e)", rate, step, residual)
    return step


def step_for_rate_exact(rate, sigma=1.0) -> float:
    """Step whose quantized N(0, sigma^2) output has entropy ``rate`` bits."""
    if not rate > 0:
        raise ValidationError(f"rate must be positive, got {rate}")
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    # Solved at unit variance; the Gaussian bin distribution only depends on step / sigma.
    return sigma * _unit_step_for_rate(float(rate))


# ---------------------------------------------------------------------------
# Rate allocation and distortion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateAllocation:
    rates: np.ndarray
    target: float
    mode: str

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.rates > 0)


def _closed_form(log_sigma, target, total_budget=None):
    """R_i = R + log2 sigma_i - mean_k log2 sigma_k, optionally rescaled so the
    rates over this subset sum to ``total_budget``."""
    count = log_sigma.size
    base = target if total_budget is None else total_budget / count
    return base + log_sigma - log_sigma.mean()


def allocate_rates(variances, target, mode=None) -> RateAllocation:
    """Distribute ``target`` average bits over components of given variances.

    ``clamp`` applies the closed form and zeroes negative rates (the
    mean rate may then exceed the target). ``waterfill`` drops negative
    components and re-solves on the remaining set until all rates are
    non-negative, keeping the mean rate equal to the target. Zero-variance
    components always get rate 0.
    """
    mode = mode or settings.ALLOCATION_MODE
    if mode not in ALLOCATION_MODES:
        raise ValidationError(f"unknown allocation mode {mode!r}")
    variances = np.asarray(variances, dtype=np.float64)
    if (variances < 0).any():
        raise ValidationError("variances must be non-negative")
    if target < 0:
        raise ValidationError(f"target rate must be non-negative, got {target}")
    positive = variances > 0
    if not positive.any():
        raise DegenerateSpectrum("cannot allocate rates over all-zero variances")

    n = variances.size
    rates = np.zeros(n)
    log_sigma = 0.5 * np.log2(np.where(positive, variances, 1.0))

    if mode == "clamp":
        idx = np.flatnonzero(positive)
        rates[idx] = np.maximum(_closed_form(log_sigma[idx], target), 0.0)
        return RateAllocation(rates, float(target), mode)

    active = np.flatnonzero(positive)
    budget = n * target
    while True:
        candidate = _closed_form(log_sigma[active], target, total_budget=budget)
        if (candidate >= 0).all():
            rates[active] = candidate
            break
        # The subset mean is budget / count >= 0, so something always survives.
        active = active[candidate >= 0]
    return RateAllocation(rates, float(target), mode)


@dataclass(frozen=True)
class DistortionPrediction:
    per_index: np.ndarray
    total: float


def predict_distortion(variances, rates) -> DistortionPrediction:
    """High-rate model D_i = (pi e / 6) sigma_i^2 2^(-2 R_i); total is the mean."""
    variances = np.asarray(variances, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    if variances.shape != rates.shape:
        raise ValidationError(f"{variances.size} variances but {rates.size} rates")
    per_index = HIGH_RATE_FACTOR * variances * np.exp2(-2.0 * rates)
    return DistortionPrediction(per_index, float(per_index.mean()))


def optimal_distortion(variances, target) -> float:
    """D*(R) = (pi e / 6) * geomean(sigma^2) * 2^(-2R)."""
    variances = np.asarray(variances, dtype=np.float64)
    if (variances <= 0).any():
        return 0.0
    geometric = np.exp(np.log(variances).mean())
    return float(HIGH_RATE_FACTOR * geometric * 2.0 ** (-2.0 * target))
