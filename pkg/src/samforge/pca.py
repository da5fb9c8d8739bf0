"""Mean-centering PCA with exact and randomized solvers.

Eigenvalues use the sample covariance (divisor ``N - 1``). Components are
sign-canonicalized so the entry of largest magnitude is positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# Relative slack when comparing a cumulative variance ratio to the target
# fraction, so spectra like {9, .5, .5} at 0.95 land on k=2 despite rounding.
FRACTION_TOL = 1e-10


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float
    n_train: int
    variance_fraction: float
    zero_variance: bool = False

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def explained(self) -> np.ndarray:
        """Per-component fraction of the full (untruncated) variance."""
        if self.total_variance <= 0:
            return np.zeros(0)
        return self.eigenvalues / self.total_variance

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)


@dataclass(frozen=True, eq=False)
class ScorePercentiles:
    p10: np.ndarray
    p90: np.ndarray

    def __post_init__(self):
        if np.any(self.p10 > self.p90):
            raise ValueError("p10 must not exceed p90")


def canonicalize_signs(components: np.ndarray) -> np.ndarray:
    if components.size == 0:
        return components
    # argmax returns the first (lowest-index) maximum on ties
    lead = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[lead, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def n_components_for(eigenvalues: np.ndarray, total: float, fraction: float) -> int:
    """Smallest k whose leading eigenvalues reach ``fraction`` of ``total``."""
    if total <= 0 or eigenvalues.size == 0:
        return 0
    ratio = np.cumsum(eigenvalues) / total
    hits = np.flatnonzero(ratio >= fraction * (1 - FRACTION_TOL))
    return int(hits[0]) + 1 if hits.size else eigenvalues.size


def randomized_svd(x: np.ndarray, rank: int, oversample: int = 10, power_iters: int = 2, rng=None):
    """Truncated SVD by randomized range finding with power iterations.

    Returns ``(u, s, vt)`` restricted to ``rank`` triplets.
    """
    rng = np.random.default_rng(rng)
    n, d = x.shape
    width = min(rank + oversample, n, d)
    omega = rng.standard_normal((d, width))
    q, _ = np.linalg.qr(x @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ z)
    b = q.T @ x
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub
    return u[:, :rank], s[:rank], vt[:rank]


def _rank_tolerance(data: np.ndarray) -> float:
    # singular values below this are rounding noise of the centering step
    n, d = data.shape
    return 10 * max(n, d) * np.finfo(np.float64).eps * float(np.linalg.norm(data))


def fit(data, variance_fraction: float = 0.95, solver: str = "exact", seed: int = 0,
        oversample: int = 10, power_iters: int = 2, max_components: int | None = None,
        initial_rank: int = 32) -> PcaModel:
    """Fit PCA to the rows of ``data`` and truncate at ``variance_fraction``
    of the total centered variance.

    ``solver="randomized"`` grows the sketch rank (doubling from
    ``initial_rank``) until the captured variance reaches the target.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be a 2D matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"PCA needs at least 2 samples, got {n}")
    if d < 1:
        raise ValueError("PCA needs at least one variable")
    if not 0 < variance_fraction <= 1:
        raise ValueError(f"variance_fraction must be in (0, 1], got {variance_fraction}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite entries")

    mean = x.mean(axis=0)
    xc = x - mean
    tol = _rank_tolerance(x)
    full_rank = min(n, d)

    if solver == "exact":
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        keep = s > tol
        s, vt = s[keep], vt[keep]
        eigenvalues = s**2 / (n - 1)
        total = float(eigenvalues.sum())
    elif solver == "randomized":
        rng = np.random.default_rng(seed)
        norm = np.linalg.norm(xc)
        total = float(norm**2 / (n - 1)) if norm > tol else 0.0
        rank = min(initial_rank, full_rank)
        while True:
            _, s, vt = randomized_svd(xc, rank, oversample, power_iters, rng)
            keep = s > tol
            s, vt = s[keep], vt[keep]
            eigenvalues = s**2 / (n - 1)
            captured = eigenvalues.sum()
            if total == 0 or rank >= full_rank or keep.sum() < rank:
                break
            if captured >= variance_fraction * total * (1 - FRACTION_TOL):
                break
            rank = min(2 * rank, full_rank)
    else:
        raise ValueError(f"unknown solver {solver!r}")

    if total == 0:
        warnings.warn("data has zero variance; model has no components", ZeroVarianceWarning, stacklevel=2)
        return PcaModel(mean, np.zeros((d, 0)), np.zeros(0), 0.0, n, variance_fraction, zero_variance=True)

    k = n_components_for(eigenvalues, total, variance_fraction)
    if max_components is not None:
        k = min(k, max_components)
    components = canonicalize_signs(vt[:k].T.copy())
    return PcaModel(mean, components, eigenvalues[:k].copy(), total, n, variance_fraction)


def project(model: PcaModel, sample) -> np.ndarray:
    """Scores ``components.T @ (sample - mean)``; rows of a 2D input are
    projected independently."""
    x = np.asarray(sample, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"sample has length {x.shape[-1]}, model dimension is {model.dim}")
    return (x - model.mean) @ model.components


def reconstruct(model: PcaModel, scores) -> np.ndarray:
    b = np.asarray(scores, dtype=np.float64)
    m = b.shape[-1] if b.ndim else 0
    if m > model.k:
        raise ValueError(f"{m} scores given, model has only {model.k} components")
    return model.mean + b @ model.components[:, :m].T


def percentiles_of_scores(scores) -> ScorePercentiles:
    """10th/90th percentiles per column with linear interpolation
    (``h = (N - 1) q``)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise ValueError("no scores")
    p10, p90 = np.percentile(s, [10, 90], axis=0, method="linear")
    return ScorePercentiles(p10, p90)


def score_percentiles(model: PcaModel, data) -> ScorePercentiles:
    return percentiles_of_scores(project(model, np.atleast_2d(data)))
