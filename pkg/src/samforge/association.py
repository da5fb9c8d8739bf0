"""Percentile-tail association testing between model scores and biomarkers.

For every component, scans scoring strictly below the 10th or strictly
above the 90th percentile form two samples; a two-sample Kolmogorov-Smirnov
test compares the biomarker distribution between them. Tests with fewer
than ``min_tail`` scans in either tail are skipped, and significance uses a
Bonferroni-adjusted level.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy import special, stats

from . import pca
from .model_io import CohortTable
from .texture import reconstruct_image

MIN_TAIL = 100
EXACT_MAX_N = 25
SPEARMAN_ALPHA = 0.01


@dataclass(frozen=True)
class TailSplit:
    low: tuple[str, ...]
    high: tuple[str, ...]
    source: str
    p10: float
    p90: float


@dataclass(frozen=True)
class AssociationResult:
    model_kind: str
    mode: str
    sex: str
    component: int  # 1-based
    variance_fraction: float
    biomarker: str
    n_low: int
    n_high: int
    ks_d: float
    p_value: float
    alpha_adjusted: float
    significant: bool
    skipped: bool
    skip_reason: str = ""

    @property
    def model_key(self) -> str:
        return "_".join(p for p in (self.model_kind, self.sex, self.mode) if p)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Scores of one model on a set of scans."""

    model_kind: str
    mode: str
    sex: str
    scan_ids: tuple[str, ...]
    scores: np.ndarray  # (n_scans, k)
    explained: np.ndarray  # per-component fraction of full variance
    percentiles: pca.ScorePercentiles | None = None  # training-set percentiles

    @classmethod
    def from_model(cls, model, kind: str, scan_ids, scores) -> "ScoreSet":
        return cls(kind, getattr(model, "mode", "") or "", model.sex, tuple(scan_ids),
                   np.asarray(scores, dtype=np.float64), model.pca.explained, model.percentiles)


# ---------------------------------------------------------------- tails

def split_tails(scan_ids: Sequence[str], scores, percentiles: tuple[float, float] | None = None,
                source: str = "train") -> TailSplit:
    """Scans strictly below p10 and strictly above p90.

    ``source="train"`` uses the given (training) percentiles; ``"self"``
    recomputes them from ``scores``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (len(scan_ids),):
        raise ValueError("scores must be one value per scan id")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    if source == "self":
        p = pca.percentiles_of_scores(s)
        p10, p90 = float(p.p10[0]), float(p.p90[0])
    elif source == "train":
        if percentiles is None:
            raise ValueError("train-percentile tails need stored training percentiles")
        p10, p90 = float(percentiles[0]), float(percentiles[1])
    else:
        raise ValueError(f"unknown percentile source {source!r}")
    ids = np.asarray(scan_ids, dtype=object)
    return TailSplit(tuple(ids[s < p10]), tuple(ids[s > p90]), source, p10, p90)


# ---------------------------------------------------------------- KS

def _sorted_labels(a, b):
    z = np.concatenate([a, b])
    order = np.argsort(z, kind="stable")
    zs = z[order]
    # last position of each run of equal values
    ends = np.flatnonzero(np.append(zs[1:] != zs[:-1], True))
    return order < a.size, ends


def _ks_stat_batch(labels: np.ndarray, ends: np.ndarray, m: int, n: int) -> np.ndarray:
    cum_a = np.cumsum(labels, axis=-1)[..., ends]
    cum_b = (ends + 1) - cum_a
    return np.max(np.abs(cum_a / m - cum_b / n), axis=-1)


def ks_statistic(a, b) -> float:
    a, b = _check_samples(a, b)
    labels, ends = _sorted_labels(a, b)
    return float(_ks_stat_batch(labels, ends, a.size, b.size))


def _check_samples(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two non-empty samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("KS samples must be finite")
    return a, b


def ks_asymptotic_p(d: float, m: int, n: int) -> float:
    """Two-sided p from the Kolmogorov distribution with the small-sample
    argument ``(sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D``."""
    en = math.sqrt(m * n / (m + n))
    lam = (en + 0.12 + 0.11 / en) * d
    return float(min(1.0, max(0.0, special.kolmogorov(lam))))


def ks_permutation_p(a, b, n_permutations: int = 100_000, seed: int = 0, batch: int = 10_000) -> float:
    """Permutation p-value of the KS statistic.

    Enumerates every relabeling when there are at most ``n_permutations``
    of them; otherwise draws ``n_permutations`` random relabelings and
    returns ``(1 + hits) / (1 + n_permutations)``.
    """
    a, b = _check_samples(a, b)
    m, n = a.size, b.size
    if m > EXACT_MAX_N or n > EXACT_MAX_N:
        raise ValueError(f"permutation mode supports samples of at most {EXACT_MAX_N}")
    labels, ends = _sorted_labels(a, b)
    d_obs = _ks_stat_batch(labels, ends, m, n)
    thresh = d_obs - 1e-12
    total = m + n
    if math.comb(total, m) <= n_permutations:
        hits = 0
        count = 0
        for chunk in _batched(itertools.combinations(range(total), m), batch):
            lab = np.zeros((len(chunk), total), dtype=bool)
            rows = np.repeat(np.arange(len(chunk)), m)
            lab[rows, np.asarray(chunk).ravel()] = True
            hits += int(np.sum(_ks_stat_batch(lab, ends, m, n) >= thresh))
            count += len(chunk)
        return hits / count
    rng = np.random.default_rng(seed)
    base = np.zeros(total, dtype=bool)
    base[:m] = True
    hits = 0
    done = 0
    while done < n_permutations:
        size = min(batch, n_permutations - done)
        lab = rng.permuted(np.broadcast_to(base, (size, total)), axis=1)
        hits += int(np.sum(_ks_stat_batch(lab, ends, m, n) >= thresh))
        done += size
    return (1 + hits) / (1 + n_permutations)


def _batched(iterable, size):
    it = iter(iterable)
    while chunk := list(itertools.islice(it, size)):
        yield chunk


def ks_two_sample(a, b, method: str = "asymptotic", n_permutations: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Two-sample KS test returning ``(D, p)``."""
    a, b = _check_samples(a, b)
    d = ks_statistic(a, b)
    if method == "asymptotic":
        return d, ks_asymptotic_p(d, a.size, b.size)
    if method == "exact":
        return d, ks_permutation_p(a, b, n_permutations, seed)
    raise ValueError(f"unknown KS method {method!r}")


# ---------------------------------------------------------------- Spearman

def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _complete_pairs(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    keep = ~(np.isnan(x) | np.isnan(y))
    return x[keep], y[keep]


def spearman(x, y) -> float:
    """Spearman's rho on pairwise-complete observations; NaN when either
    variable is constant."""
    x, y = _complete_pairs(x, y)
    if x.size < 3:
        raise ValueError(f"Spearman needs at least 3 complete pairs, got {x.size}")
    rx = average_ranks(x) - (x.size + 1) / 2.0
    ry = average_ranks(y) - (y.size + 1) / 2.0
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        return math.nan
    return float(np.clip(np.sum(rx * ry) / denom, -1.0, 1.0))


def spearman_test(x, y) -> tuple[float, float, int]:
    """``(rho, two-sided p, n)`` with the t approximation on n - 2 dof."""
    xc, yc = _complete_pairs(x, y)
    rho = spearman(xc, yc)
    n = xc.size
    if math.isnan(rho):
        return rho, math.nan, n
    if abs(rho) >= 1:
        return rho, 0.0, n
    t = rho * math.sqrt((n - 2) / (1 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), n - 2)), n


# ---------------------------------------------------------------- scans

def _component_tails(ss: ScoreSet, j: int, source: str) -> TailSplit:
    pct = None
    if source == "train":
        if ss.percentiles is None:
            raise ValueError(f"{ss.model_kind}: no stored training percentiles")
        pct = (ss.percentiles.p10[j], ss.percentiles.p90[j])
    return split_tails(ss.scan_ids, ss.scores[:, j], pct, source)


def scan_associations(score_sets: Sequence[ScoreSet], cohort: CohortTable, biomarkers: Sequence[str] | None = None,
                      alpha_base: float = 0.05, alpha_pinned: float | None = None, percentile_source: str = "train",
                      min_tail: int = MIN_TAIL, jobs: int = 1) -> list[AssociationResult]:
    """KS-test every (model, component, biomarker) triple.

    ``alpha_adjusted`` is ``alpha_base`` divided by the number of tests
    actually run, unless ``alpha_pinned`` fixes it to a literal value.
    Results are ordered by model, component, biomarker.
    """
    names = list(cohort.biomarker_names if biomarkers is None else biomarkers)
    unknown = [b for b in names if b not in cohort.biomarker_names]
    if unknown:
        raise ValueError(f"unknown biomarker column(s): {', '.join(unknown)}")
    for ss in score_sets:
        missing = [s for s in ss.scan_ids if s not in cohort]
        if missing:
            raise ValueError(f"{len(missing)} scored scans absent from cohort, e.g. {missing[0]!r}")

    tasks = [(ss, j, b) for ss in score_sets for j in range(ss.scores.shape[1]) for b in names]

    def run(task):
        ss, j, name = task
        tails = _component_tails(ss, j, percentile_source)
        low = cohort.values(name, tails.low)
        high = cohort.values(name, tails.high)
        low, high = low[~np.isnan(low)], high[~np.isnan(high)]
        base = dict(model_kind=ss.model_kind, mode=ss.mode, sex=ss.sex, component=j + 1,
                    variance_fraction=float(ss.explained[j]), biomarker=name,
                    n_low=int(low.size), n_high=int(high.size))
        if low.size < min_tail or high.size < min_tail:
            return base, None
        return base, ks_two_sample(low, high)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            raw = list(pool.map(run, tasks))
    else:
        raw = [run(t) for t in tasks]

    attempted = sum(r is not None for _, r in raw)
    if alpha_pinned is not None:
        alpha = float(alpha_pinned)
    else:
        alpha = alpha_base / attempted if attempted else alpha_base

    results = []
    for base, r in raw:
        if r is None:
            results.append(AssociationResult(**base, ks_d=math.nan, p_value=math.nan, alpha_adjusted=alpha,
                                             significant=False, skipped=True, skip_reason=f"tail<{min_tail}"))
        else:
            d, p = r
            results.append(AssociationResult(**base, ks_d=d, p_value=p, alpha_adjusted=alpha,
                                             significant=p < alpha, skipped=False))
    return results


def representative_images(model, score_set: ScoreSet, result: AssociationResult, percentile_source: str = "train"):
    """Reconstructions at the mean score vector of the low and high tails
    when ``result`` is significant, else one at the whole-set mean."""
    if result.significant:
        tails = _component_tails(score_set, result.component - 1, percentile_source)
        if not tails.low or not tails.high:
            raise ValueError("significant result with an empty tail")
        index = {s: i for i, s in enumerate(score_set.scan_ids)}
        low = score_set.scores[[index[s] for s in tails.low]].mean(axis=0)
        high = score_set.scores[[index[s] for s in tails.high]].mean(axis=0)
        return (reconstruct_image(model, low, f"{result.biomarker}_pc{result.component}_low"),
                reconstruct_image(model, high, f"{result.biomarker}_pc{result.component}_high"))
    mean = score_set.scores.mean(axis=0)
    return (reconstruct_image(model, mean, f"{result.biomarker}_pc{result.component}_mean"),)


@dataclass(frozen=True)
class VarianceRow:
    model: str
    biomarker: str
    component: int
    variance_fraction: float
    significant: bool


def variance_significance_table(results: Sequence[AssociationResult]) -> list[VarianceRow]:
    """Per (model, biomarker): components in order with their variance
    fraction and significance flag."""
    rows = [VarianceRow(r.model_key, r.biomarker, r.component, r.variance_fraction, r.significant) for r in results]
    return sorted(rows, key=lambda r: (r.model, r.biomarker, r.component))


@dataclass(frozen=True)
class SpearmanRow:
    component: int
    biomarker: str
    n: int
    rho: float
    p_value: float
    significant: bool


def spearman_table(score_set: ScoreSet, cohort: CohortTable, biomarkers: Sequence[str] | None = None,
                   n_components: int = 5, alpha: float = SPEARMAN_ALPHA) -> list[SpearmanRow]:
    names = list(cohort.biomarker_names if biomarkers is None else biomarkers)
    rows = []
    for j in range(min(n_components, score_set.scores.shape[1])):
        for name in names:
            y = cohort.values(name, score_set.scan_ids)
            rho, p, n = spearman_test(score_set.scores[:, j], y)
            rows.append(SpearmanRow(j + 1, name, n, rho, p, bool(p < alpha)))
    return rows


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(rows, path, columns=None) -> None:
    """CSV with one line per dataclass row."""
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if columns is None:
            columns = [f.name for f in fields(rows[0])] if rows else []
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in columns])


RESULT_COLUMNS = [f.name for f in fields(AssociationResult)]
