"""Sex-specific point distribution model over centroid-aligned landmarks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import pca
from .geometry import align_centroid, unflatten
from .model_io import SEXES, ModelContainer, PointSet


@dataclass(frozen=True, eq=False)
class ShapeModel:
    sex: str
    n_points: int
    pca: pca.PcaModel
    percentiles: pca.ScorePercentiles
    train_ids: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.pca.k

    @property
    def mean_shape(self) -> np.ndarray:
        return unflatten(self.pca.mean)

    def to_container(self) -> ModelContainer:
        return ModelContainer(
            kind="shape",
            sex=self.sex,
            n_points=self.n_points,
            variance_fraction=self.pca.variance_fraction,
            arrays=pca_arrays(self.pca, self.percentiles),
            meta={"train_ids": list(self.train_ids), **pca_meta(self.pca)},
        )

    @classmethod
    def from_container(cls, c: ModelContainer, prefix: str = "") -> "ShapeModel":
        model, pct = pca_from_arrays(c.arrays, c.meta, c.variance_fraction, prefix)
        ids = c.meta.get(prefix + "train_ids", c.meta.get("train_ids", []))
        return cls(c.sex, c.n_points, model, pct, tuple(ids))


def pca_arrays(model: pca.PcaModel, pct: pca.ScorePercentiles, prefix: str = "") -> dict:
    return {
        prefix + "mean": model.mean,
        prefix + "eigenvalues": model.eigenvalues,
        prefix + "components": model.components,
        prefix + "p10": pct.p10,
        prefix + "p90": pct.p90,
        prefix + "total_variance": np.array([model.total_variance]),
    }


def pca_meta(model: pca.PcaModel, prefix: str = "") -> dict:
    return {
        prefix + "n_train": model.n_train,
        prefix + "variance_fraction": model.variance_fraction,
        prefix + "zero_variance": model.zero_variance,
    }


def pca_from_arrays(arrays, meta, variance_fraction, prefix: str = ""):
    model = pca.PcaModel(
        mean=arrays[prefix + "mean"],
        components=arrays[prefix + "components"],
        eigenvalues=arrays[prefix + "eigenvalues"],
        total_variance=float(arrays[prefix + "total_variance"][0]),
        n_train=int(meta.get(prefix + "n_train", 0)),
        variance_fraction=float(meta.get(prefix + "variance_fraction", variance_fraction)),
        zero_variance=bool(meta.get(prefix + "zero_variance", False)),
    )
    return model, pca.ScorePercentiles(arrays[prefix + "p10"], arrays[prefix + "p90"])


def shape_matrix(point_sets: Sequence[PointSet]) -> np.ndarray:
    ns = {ps.n for ps in point_sets}
    if len(ns) != 1:
        raise ValueError(f"point sets have differing landmark counts: {sorted(ns)}")
    return np.stack([align_centroid(ps) for ps in point_sets])


def build_shape_model(point_sets: Sequence[PointSet], sex: str, variance_fraction: float = 0.95,
                      sexes: Sequence[str] | None = None, **fit_kwargs) -> ShapeModel:
    """Align by centroid, stack into an ``N x 2n`` matrix and fit PCA.

    ``sexes`` (one per point set) is checked against ``sex`` when given.
    """
    if sex not in SEXES:
        raise ValueError(f"invalid sex {sex!r}")
    if len(point_sets) < 2:
        raise ValueError("need at least 2 point sets")
    if sexes is not None:
        mixed = sorted({s for s in sexes if s != sex})
        if mixed:
            raise ValueError(f"shape models are sex-specific; got {mixed} in a {sex} model")
    x = shape_matrix(point_sets)
    model = pca.fit(x, variance_fraction, **fit_kwargs)
    pct = pca.percentiles_of_scores(pca.project(model, x))
    return ShapeModel(sex, point_sets[0].n, model, pct, tuple(ps.scan_id for ps in point_sets))


def project_shape(model: ShapeModel, points) -> np.ndarray:
    return pca.project(model.pca, align_centroid(points))


def synthesize_shape(model: ShapeModel, scores, scan_id: str = "synthetic") -> PointSet:
    """Landmarks (centroid at the origin) for the given shape scores."""
    return PointSet(scan_id, unflatten(pca.reconstruct(model.pca, scores)))
