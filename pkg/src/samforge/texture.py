"""Texture models over warped in-body pixels and combined shape+texture
appearance models."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import pca
from .geometry import ReferenceFrame, build_reference_frame, render_on_shape, warp_to_vector
from .model_io import TEXTURE_MODES, ModelContainer, PointSet, ScanImage, Triangulation
from .shape import ShapeModel, pca_arrays, pca_from_arrays, pca_meta, project_shape, synthesize_shape

NORMALIZATIONS = ("raw", "zero_mean_unit_var")


@dataclass(frozen=True, eq=False)
class TextureModel:
    mode: str
    sex: str
    frame: ReferenceFrame
    pca: pca.PcaModel
    percentiles: pca.ScorePercentiles
    normalization: str = "raw"
    train_ids: tuple[str, ...] = ()
    source_shape: np.ndarray | None = None
    target_long_side: int = 256

    @property
    def k(self) -> int:
        return self.pca.k

    def _arrays(self, prefix=""):
        arrays = pca_arrays(self.pca, self.percentiles, prefix)
        arrays[prefix + "frame_source"] = self.source_shape
        return arrays

    def _meta(self, prefix=""):
        return {
            prefix + "train_ids": list(self.train_ids),
            prefix + "normalization": self.normalization,
            prefix + "target_long_side": self.target_long_side,
            prefix + "triangles": self.frame.triangulation.triangles.tolist(),
            **pca_meta(self.pca, prefix),
        }

    def to_container(self) -> ModelContainer:
        return ModelContainer(
            kind="texture",
            sex=self.sex,
            n_points=self.frame.n_points,
            variance_fraction=self.pca.variance_fraction,
            arrays=self._arrays(),
            mode=self.mode,
            frame_dims=(self.frame.width, self.frame.height),
            meta=self._meta(),
        )

    @classmethod
    def from_container(cls, c: ModelContainer, prefix: str = "") -> "TextureModel":
        model, pct = pca_from_arrays(c.arrays, c.meta, c.variance_fraction, prefix)
        source = c.arrays[prefix + "frame_source"]
        tri = Triangulation(c.n_points, np.asarray(c.meta[prefix + "triangles"], dtype=np.int64))
        long_side = int(c.meta[prefix + "target_long_side"])
        frame = build_reference_frame(source, tri, long_side)
        return cls(c.mode, c.sex, frame, model, pct, c.meta[prefix + "normalization"],
                   tuple(c.meta[prefix + "train_ids"]), source, long_side)


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    mode: str
    sex: str
    shape: ShapeModel
    texture: TextureModel
    shape_weight: float
    pca: pca.PcaModel
    percentiles: pca.ScorePercentiles
    train_ids: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.pca.k

    @property
    def frame(self) -> ReferenceFrame:
        return self.texture.frame

    def to_container(self) -> ModelContainer:
        arrays = pca_arrays(self.pca, self.percentiles)
        arrays.update(pca_arrays(self.shape.pca, self.shape.percentiles, "shape."))
        arrays.update(self.texture._arrays("texture."))
        arrays["shape_weight"] = np.array([self.shape_weight])
        meta = {
            "train_ids": list(self.train_ids),
            "shape.train_ids": list(self.shape.train_ids),
            **pca_meta(self.pca),
            **pca_meta(self.shape.pca, "shape."),
            **self.texture._meta("texture."),
        }
        return ModelContainer(
            kind="appearance",
            sex=self.sex,
            n_points=self.shape.n_points,
            variance_fraction=self.pca.variance_fraction,
            arrays=arrays,
            mode=self.mode,
            frame_dims=(self.frame.width, self.frame.height),
            meta=meta,
        )

    @classmethod
    def from_container(cls, c: ModelContainer) -> "AppearanceModel":
        shape = ShapeModel.from_container(c, "shape.")
        texture = TextureModel.from_container(c, "texture.")
        model, pct = pca_from_arrays(c.arrays, c.meta, c.variance_fraction)
        return cls(c.mode, c.sex, shape, texture, float(c.arrays["shape_weight"][0]), model, pct,
                   tuple(c.meta["train_ids"]))


class Reconstruction(NamedTuple):
    points: PointSet
    image: ScanImage


def normalize_texture(vec: np.ndarray, normalization: str) -> np.ndarray:
    if normalization == "raw":
        return vec
    if normalization != "zero_mean_unit_var":
        raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    sd = vec.std()
    if sd == 0:
        warnings.warn("texture has zero variance; normalized to zeros", pca.ZeroVarianceWarning, stacklevel=3)
        return np.zeros_like(vec)
    return (vec - vec.mean()) / sd


def extract_texture(image: ScanImage, points, frame: ReferenceFrame, normalization: str = "raw") -> np.ndarray:
    """Masked frame pixels of the warped image, row-major."""
    pts = points.points if isinstance(points, PointSet) else points
    return normalize_texture(warp_to_vector(image.pixels, pts, frame), normalization)


def texture_matrix(images: Sequence[ScanImage], point_sets: Sequence[PointSet], frame: ReferenceFrame,
                   normalization: str = "raw", jobs: int = 1) -> np.ndarray:
    _check_pairs(images, point_sets)
    out = np.empty((len(images), frame.n_pixels))

    def work(i):
        out[i] = extract_texture(images[i], point_sets[i], frame, normalization)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(work, range(len(images))))
    else:
        for i in range(len(images)):
            work(i)
    return out


def _check_pairs(images, point_sets):
    if len(images) != len(point_sets):
        raise ValueError(f"{len(images)} images but {len(point_sets)} point sets")
    for im, ps in zip(images, point_sets):
        if im.scan_id != ps.scan_id:
            raise ValueError(f"image {im.scan_id!r} paired with points {ps.scan_id!r}")


def build_texture_model(images: Sequence[ScanImage], point_sets: Sequence[PointSet], shape_model: ShapeModel,
                        triangulation: Triangulation, variance_fraction: float = 0.95,
                        normalization: str = "raw", target_long_side: int = 256, jobs: int = 1,
                        **fit_kwargs) -> TextureModel:
    """Warp every scan onto the shape model's mean shape and fit PCA to the
    in-body pixel vectors."""
    if len(images) < 2:
        raise ValueError("need at least 2 scans")
    modes = sorted({im.mode for im in images})
    if len(modes) != 1:
        raise ValueError(f"mode mismatch among inputs: {modes}")
    mode = modes[0]
    if mode not in TEXTURE_MODES:
        raise ValueError(f"no texture models for mode {mode!r}; expected one of {TEXTURE_MODES}")
    source = shape_model.mean_shape
    frame = build_reference_frame(source, triangulation, target_long_side)
    x = texture_matrix(images, point_sets, frame, normalization, jobs)
    model = pca.fit(x, variance_fraction, **fit_kwargs)
    pct = pca.percentiles_of_scores(pca.project(model, x))
    return TextureModel(mode, shape_model.sex, frame, model, pct, normalization,
                        tuple(ps.scan_id for ps in point_sets), source, target_long_side)


def shape_weight(shape_model: ShapeModel, texture_model: TextureModel) -> float:
    """sqrt(total texture variance / total shape variance); 1 when either
    block carries no variance."""
    vs, vt = shape_model.pca.total_variance, texture_model.pca.total_variance
    if vs <= 0 or vt <= 0:
        return 1.0
    return float(np.sqrt(vt / vs))


def _combined(shape_model, texture_model, w_s, point_sets, textures):
    b_s = np.stack([project_shape(shape_model, ps) for ps in point_sets])
    b_t = pca.project(texture_model.pca, textures)
    return np.hstack([w_s * b_s, b_t])


def build_appearance_model(shape_model: ShapeModel, texture_model: TextureModel, point_sets: Sequence[PointSet],
                           images: Sequence[ScanImage] | None = None, textures: np.ndarray | None = None,
                           variance_fraction: float = 0.95, jobs: int = 1, **fit_kwargs) -> AppearanceModel:
    """Joint PCA over ``(w_s * shape scores, texture scores)`` per scan.

    Pass either the training ``images`` or their precomputed ``textures``.
    """
    ids = tuple(ps.scan_id for ps in point_sets)
    for name, sub in (("shape", shape_model), ("texture", texture_model)):
        if sub.train_ids and tuple(sub.train_ids) != ids:
            raise ValueError(f"{name} model was trained on a different set of scans")
    if shape_model.sex != texture_model.sex:
        raise ValueError("shape and texture models differ in sex")
    if textures is None:
        if images is None:
            raise ValueError("need images or precomputed textures")
        textures = texture_matrix(images, point_sets, texture_model.frame, texture_model.normalization, jobs)
    w_s = shape_weight(shape_model, texture_model)
    x = _combined(shape_model, texture_model, w_s, point_sets, textures)
    model = pca.fit(x, variance_fraction, **fit_kwargs)
    pct = pca.percentiles_of_scores(pca.project(model, x))
    return AppearanceModel(texture_model.mode, shape_model.sex, shape_model, texture_model, w_s, model, pct, ids)


def appearance_vectors(model: AppearanceModel, point_sets: Sequence[PointSet], images: Sequence[ScanImage] | None = None,
                       textures: np.ndarray | None = None, jobs: int = 1) -> np.ndarray:
    if textures is None:
        textures = texture_matrix(images, point_sets, model.frame, model.texture.normalization, jobs)
    return _combined(model.shape, model.texture, model.shape_weight, point_sets, textures)


def project_appearance(model: AppearanceModel, point_sets, images=None, textures=None, jobs: int = 1) -> np.ndarray:
    """Appearance scores, one row per scan."""
    return pca.project(model.pca, appearance_vectors(model, point_sets, images, textures, jobs))


def split_appearance(model: AppearanceModel, scores) -> tuple[np.ndarray, np.ndarray]:
    """Invert the joint PCA into ``(shape scores, texture scores)``."""
    v = pca.reconstruct(model.pca, scores)
    ks = model.shape.k
    return v[..., :ks] / model.shape_weight, v[..., ks:]


def render_texture(texture_model: TextureModel, texture_scores, shape_points=None, scan_id="synthetic") -> Reconstruction:
    """Texture at ``texture_scores`` painted onto ``shape_points`` (aligned
    coordinates; the mean shape when omitted) in the frame canvas."""
    frame = texture_model.frame
    grid = frame.to_grid(pca.reconstruct(texture_model.pca, texture_scores))
    if shape_points is None:
        frame_pts = frame.mean_shape
        pixels = grid
    else:
        frame_pts = frame.to_frame(shape_points)
        pixels = render_on_shape(grid, frame, frame_pts, frame.width, frame.height)
    return Reconstruction(PointSet(scan_id, frame_pts), ScanImage(scan_id, texture_model.mode, pixels))


def reconstruct_image(model: AppearanceModel, scores, scan_id: str = "synthetic") -> Reconstruction:
    """Synthesized landmarks (frame coordinates) and the reconstructed
    texture rendered on them in the reference-frame canvas."""
    b_s, b_t = split_appearance(model, scores)
    shape = synthesize_shape(model.shape, b_s)
    return render_texture(model.texture, b_t, shape.points, scan_id)
