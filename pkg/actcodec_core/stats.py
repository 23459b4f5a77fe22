"""
Block statistics and the Karhunen-Loeve transform.

Covariance uses the population (1/N) convention. Accumulation is a
single-pass comoment update, so models built on disjoint data can be merged.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from actcodec_core.errors import DegenerateSpectrum, NonConvergence, ValidationError
from actcodec_core.fileio import atomic_write_text

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-8
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
PSD_SLACK = 1e-9


@dataclass
class CovarianceModel:
    """Running mean and comoment of n-dimensional block vectors."""

    n: int
    mean: np.ndarray = None
    comoment: np.ndarray = None
    sample_count: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"covariance dimension must be positive, got {self.n}")
        if self.mean is None:
            self.mean = np.zeros(self.n)
        if self.comoment is None:
            self.comoment = np.zeros((self.n, self.n))

    @property
    def cov(self) -> np.ndarray:
        if self.sample_count == 0:
            return np.zeros((self.n, self.n))
        return self.comoment / self.sample_count

    def copy(self):
        return CovarianceModel(self.n, self.mean.copy(), self.comoment.copy(), self.sample_count)


def _merge_moments(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    total = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / total)
    m2 = m2_a + m2_b + np.outer(delta, delta) * (n_a * n_b / total)
    return total, mean, 0.5 * (m2 + m2.T)


def accumulate(blocks: Iterable, model: CovarianceModel) -> CovarianceModel:
    """Fold a stream of vectors (or 2-D batches of vectors) into ``model``.

    Returns a new model; ``model`` itself is left unchanged.
    """
    if isinstance(blocks, np.ndarray):
        blocks = [blocks]
    count, mean, m2 = model.sample_count, model.mean.copy(), model.comoment.copy()
    for batch in blocks:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[1] != model.n:
            raise ValidationError(f"block length {batch.shape[1]} does not match model dimension {model.n}")
        if batch.shape[0] == 0:
            continue
        b_mean = batch.mean(axis=0)
        centered = batch - b_mean
        b_m2 = centered.T @ centered
        if count == 0:
            count, mean, m2 = batch.shape[0], b_mean, 0.5 * (b_m2 + b_m2.T)
        else:
            count, mean, m2 = _merge_moments(count, mean, m2, batch.shape[0], b_mean, b_m2)
    return CovarianceModel(model.n, mean, m2, count)


def merge(a: CovarianceModel, b: CovarianceModel) -> CovarianceModel:
    if a.n != b.n:
        raise ValidationError(f"cannot merge models of dimension {a.n} and {b.n}")
    if a.sample_count == 0:
        return b.copy()
    if b.sample_count == 0:
        return a.copy()
    count, mean, m2 = _merge_moments(a.sample_count, a.mean, a.comoment, b.sample_count, b.mean, b.comoment)
    return CovarianceModel(a.n, mean, m2, count)


# ---------------------------------------------------------------------------
# Eigendecomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray   # descending
    eigenvectors: np.ndarray  # row i pairs with eigenvalues[i]
    sweeps: int = 0


def _round_robin(n):
    """Disjoint (p, q) pair sets covering every pair once per sweep."""
    players = list(range(n)) + ([None] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p is not None and q is not None:
                pairs.append((min(p, q), max(p, q)))
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(matrix, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps visit every (p, q) pair once, in round-robin order so each round
    applies n/2 disjoint rotations at once. Stops when the largest
    off-diagonal magnitude falls below ``tol * ||A||_F``.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"eigendecomposition needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = np.abs(a).max() if a.size else 0.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(scale, 1e-300)):
        raise ValidationError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    threshold = tol * np.linalg.norm(a)
    off = ~np.eye(n, dtype=bool)
    rounds = _round_robin(n) if n > 1 else []

    sweeps = 0
    residual = np.abs(a[off]).max() if n > 1 else 0.0
    while residual > threshold:
        if sweeps >= max_sweeps:
            raise NonConvergence(
                f"Jacobi did not converge in {max_sweeps} sweeps (residual {residual:.3e})",
                residual=residual,
            )
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a = 0.5 * (a + a.T)
            v = v @ rot
        sweeps += 1
        residual = np.abs(a[off]).max()
        logger.debug("jacobi sweep %d residual %.3e", sweeps, residual)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vectors = v.T[order]
    # Largest-magnitude component of each eigenvector is made positive.
    lead = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(n), lead])
    signs[signs == 0] = 1.0
    vectors = vectors * signs[:, None]
    return EigenDecomposition(eigenvalues=eigenvalues, eigenvectors=vectors, sweeps=sweeps)


def eigendecompose(model: CovarianceModel) -> EigenDecomposition:
    """Eigendecomposition of the model covariance with PSD clamping.

    The diagonal is lifted by eps * trace / n before solving and the shift is
    removed from the eigenvalues afterwards, so the spectrum still sums to
    trace(cov).
    """
    cov = model.cov
    shift = REGULARIZATION * np.trace(cov) / model.n
    decomposition = jacobi_eigh(cov + shift * np.eye(model.n))
    eigenvalues = decomposition.eigenvalues - shift
    largest = np.abs(eigenvalues).max() if eigenvalues.size else 0.0
    if (eigenvalues < -PSD_SLACK * largest).any():
        logger.warning(
            "covariance has eigenvalue %.3e below PSD slack; clamping to 0", eigenvalues.min()
        )
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return EigenDecomposition(eigenvalues, decomposition.eigenvectors, decomposition.sweeps)


# ---------------------------------------------------------------------------
# KLT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KLTransform:
    """Orthonormal transform: rows are principal directions, descending variance."""

    matrix: np.ndarray
    mean: np.ndarray
    spectrum: np.ndarray
    sample_count: int = 0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, mean, variances, sample_count=0):
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.eye(mean.size), mean, np.asarray(variances, dtype=np.float64), sample_count)

    def with_matrix(self, matrix):
        return KLTransform(np.asarray(matrix, dtype=np.float64), self.mean, self.spectrum, self.sample_count)


def make_klt(model: CovarianceModel) -> KLTransform:
    decomposition = eigendecompose(model)
    logger.debug(
        "KLT n=%d from %d samples, top eigenvalue %.4g, %d Jacobi sweeps",
        model.n, model.sample_count, decomposition.eigenvalues[0], decomposition.sweeps,
    )
    return KLTransform(
        matrix=decomposition.eigenvectors,
        mean=model.mean.copy(),
        spectrum=decomposition.eigenvalues,
        sample_count=model.sample_count,
    )


def _check_length(T, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != T.n:
        raise ValidationError(f"vector length {x.shape[-1]} does not match transform size {T.n}")
    return x


def klt_forward(T: KLTransform, x) -> np.ndarray:
    """y = T (x - mu); accepts one vector or a batch of row vectors."""
    x = _check_length(T, x)
    return (x - T.mean) @ T.matrix.T


def klt_inverse(T: KLTransform, y) -> np.ndarray:
    """x = T^T y + mu."""
    y = _check_length(T, y)
    return y @ T.matrix + T.mean


def energy_ratio(spectrum, fraction) -> int:
    """Smallest k whose leading k eigenvalues hold ``fraction`` of the energy."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"energy fraction must be in (0, 1], got {fraction}")
    if (spectrum < 0).any():
        raise ValidationError("spectrum has negative eigenvalues")
    total = spectrum.sum()
    if total <= 0:
        raise DegenerateSpectrum("all-zero spectrum has no energy ratio")
    ratios = np.cumsum(spectrum) / total
    k = int(np.searchsorted(ratios, fraction - 1e-12, side="left")) + 1
    return min(k, spectrum.size)


def channel_energy(T: KLTransform, blocks) -> np.ndarray:
    """Mean squared L2 energy of each projected channel over ``blocks``."""
    y = klt_forward(T, np.atleast_2d(blocks))
    return (y * y).mean(axis=0)


def export_spectrum(T: KLTransform, path, layer_id=None):
    total = T.spectrum.sum()
    payload = {
        "layer": layer_id,
        "n": T.n,
        "sample_count": int(T.sample_count),
        "spectrum": [float(v) for v in T.spectrum],
        "cumulative_energy": [float(v) for v in (np.cumsum(T.spectrum) / total if total > 0 else T.spectrum)],
    }
    atomic_write_text(path, json.dumps(payload, indent=2))
