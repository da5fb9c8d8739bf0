"""Synthetic landmark-annotated scans with known generating latents.

Landmarks are a template body deformed linearly by three standard-normal
latents (size, limb width, adiposity) plus isotropic noise. Every imaging
mode is a smooth field over the body's own template coordinates, so warping
a scan back onto the template recovers the field up to interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .geometry import rasterize
from .model_io import (
    DEFAULT_N_POINTS,
    MODES,
    CohortRow,
    CohortTable,
    PointSet,
    ScanImage,
    Triangulation,
    validate_triangulation,
    write_cohort,
    write_image,
    write_point_file,
    write_triangulation,
)

LATENTS = ("size", "limb_width", "adiposity")

# semi-axes of the template body outline as fractions of the image height
HALF_WIDTH = 0.262
HALF_HEIGHT = 0.4


@dataclass(frozen=True)
class BiomarkerRecipe:
    name: str
    weights: tuple[float, float, float]
    sigma: float = 0.5


DEFAULT_BIOMARKERS = (
    BiomarkerRecipe("glucose", (1.0, 0.0, 0.0), 0.5),
    BiomarkerRecipe("grip_strength", (0.0, 1.0, 0.0), 0.5),
    BiomarkerRecipe("insulin", (0.0, 0.0, 1.0), 0.5),
    BiomarkerRecipe("calcium", (0.0, 0.0, 0.0), 1.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_scans: int = 500
    n_points: int = DEFAULT_N_POINTS
    noise_sigma: float = 0.5
    width: int = 109
    height: int = 150
    biomarkers: tuple[BiomarkerRecipe, ...] = DEFAULT_BIOMARKERS
    modes: tuple[str, ...] = MODES
    image_noise: float = 0.0
    sex: str | None = None  # None: alternate F/M
    missing_fraction: float = 0.0
    latent_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("n_points must be >= 3")
        if self.noise_sigma < 0 or self.image_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.n_scans < 1:
            raise ValueError("n_scans must be >= 1")
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ValueError(f"unknown modes {unknown}")
        if self.sex not in (None, "F", "M"):
            raise ValueError(f"invalid sex {self.sex!r}")


@dataclass
class PhantomSet:
    spec: PhantomSpec
    template: np.ndarray  # (n, 2) unit-disk body coordinates
    triangulation: Triangulation
    point_sets: list[PointSet]
    images: dict[str, list[ScanImage]]
    cohort: CohortTable
    latents: np.ndarray  # (n_scans, 3)
    sexes: list[str] = field(default_factory=list)

    @property
    def scan_ids(self) -> list[str]:
        return [ps.scan_id for ps in self.point_sets]

    def subset(self, sex: str) -> "PhantomSet":
        keep = [i for i, s in enumerate(self.sexes) if s == sex]
        ids = {self.point_sets[i].scan_id for i in keep}
        return PhantomSet(
            self.spec, self.template, self.triangulation,
            [self.point_sets[i] for i in keep],
            {m: [ims[i] for i in keep] for m, ims in self.images.items()},
            CohortTable(self.cohort.biomarker_names, [r for r in self.cohort.rows if r.scan_id in ids]),
            self.latents[keep],
            [self.sexes[i] for i in keep],
        )


def _ring_counts(n: int) -> tuple[bool, list[int]]:
    """(has_center, points per ring, inner to outer) for n landmarks."""
    if n < 8:
        return False, [n]
    if n == DEFAULT_N_POINTS:
        return True, [8, 16, 32, 48]
    rest = n - 1
    weights = np.array([1, 2, 4, 6], dtype=float)
    while True:
        counts = np.floor(weights / weights.sum() * rest).astype(int)
        counts[-1] += rest - counts.sum()
        if counts.min() >= 3 or weights.size == 1:
            return True, counts.tolist()
        weights = weights[1:]


def template_points(n_points: int = DEFAULT_N_POINTS) -> np.ndarray:
    """Concentric rings in the unit disk (outer ring on the boundary)."""
    center, counts = _ring_counts(n_points)
    pts = [np.zeros((1, 2))] if center else []
    radii = np.linspace(1.0, 0.0, len(counts) + 1)[:-1][::-1] if center else [1.0]
    for i, (r, c) in enumerate(zip(radii, counts)):
        theta = 2 * np.pi * (np.arange(c) + 0.5 * (i % 2)) / c + 0.1
        pts.append(r * np.column_stack([np.cos(theta), np.sin(theta)]))
    return np.vstack(pts)


def template_triangulation(template: np.ndarray) -> Triangulation:
    tri = Delaunay(template)
    simplices = tri.simplices.copy()
    # consistent counter-clockwise orientation, deterministic order
    a, b, c = (template[simplices[:, i]] for i in range(3))
    cw = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]) < 0
    simplices[cw] = simplices[cw][:, [0, 2, 1]]
    simplices = simplices[np.lexsort(simplices.T[::-1])]
    return validate_triangulation(simplices.tolist(), template.shape[0])


def deformation_basis(template: np.ndarray) -> np.ndarray:
    """(3, n, 2) landmark displacement per unit latent, in template units."""
    u, v = template[:, 0], template[:, 1]
    size = 0.07 * template
    limb = np.column_stack([0.08 * u * v**2, np.zeros_like(u)])
    adiposity = np.column_stack([0.10 * u * (1 - v**2), 0.02 * v])
    return np.stack([size, limb, adiposity])


def body_to_pixels(uv: np.ndarray, spec: PhantomSpec, sex: str) -> np.ndarray:
    widen = 1.04 if sex == "M" else 1.0
    center = np.array([(spec.width - 1) / 2.0, (spec.height - 1) / 2.0])
    return center + uv * spec.height * np.array([HALF_WIDTH * widen, HALF_HEIGHT])


def mode_field(mode: str, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Noise-free intensity of ``mode`` at template coordinates ``(u, v)``
    for latents ``z``."""
    size, limb, adip = z
    r2 = u * u + v * v
    if mode == "d_fat":
        f = 1500 * (1 + 0.25 * adip) * (0.6 + 0.4 * (1 - v * v)) * (1 - 0.3 * r2) + 200 * limb * u * u
    elif mode == "d_lean":
        f = 2000 * (1 + 0.15 * limb) * (0.7 + 0.3 * u * u) + 150 * size * (1 - r2)
    elif mode == "bmd_irs":
        f = 800 + 600 * (1 + 0.1 * size) * np.exp(-((u / 0.2) ** 2)) + 100 * v
    elif mode == "m_bone_irs":
        f = 400 + 300 * (1 + 0.1 * size) * np.exp(-((u / 0.25) ** 2)) + 150 * v * v
    elif mode == "r_air":
        f = 3000 + 500 * (1 - r2) - 200 * adip * u * u + 100 * limb * v
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.maximum(f, 0.0)


def generate(spec: PhantomSpec) -> PhantomSet:
    """Deterministic phantom cohort for ``spec``."""
    template = template_points(spec.n_points)
    tri = template_triangulation(template)
    basis = deformation_basis(template)
    master = np.random.default_rng(spec.seed)
    latents = master.standard_normal((spec.n_scans, 3)) * np.asarray(spec.latent_scale)
    if spec.sex is None:
        sexes = ["F" if i % 2 == 0 else "M" for i in range(spec.n_scans)]
    else:
        sexes = [spec.sex] * spec.n_scans
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_scans)

    point_sets = []
    images = {m: [] for m in spec.modes}
    for i in range(spec.n_scans):
        rng = np.random.default_rng(children[i])
        scan_id = f"scan{i:05d}"
        z = latents[i]
        uv = template + np.tensordot(z, basis, axes=1)
        xy = body_to_pixels(uv, spec, sexes[i]) + spec.noise_sigma * rng.standard_normal(uv.shape)
        point_sets.append(PointSet(scan_id, xy))
        if not spec.modes:
            continue
        tri_index, bary = rasterize(xy, tri, spec.width, spec.height)
        inside = tri_index >= 0
        body_uv = np.einsum("pk,pkd->pd", bary[inside], template[tri.triangles[tri_index[inside]]])
        for mode in spec.modes:
            img = np.zeros((spec.height, spec.width))
            img[inside] = mode_field(mode, body_uv[:, 0], body_uv[:, 1], z)
            if spec.image_noise > 0:
                img[inside] += spec.image_noise * rng.standard_normal(int(inside.sum()))
            images[mode].append(ScanImage(scan_id, mode, np.clip(img, 0, 65535)))

    cohort = _biomarkers(spec, latents, sexes, [ps.scan_id for ps in point_sets], master)
    return PhantomSet(spec, template, tri, point_sets, images, cohort, latents, sexes)


def _biomarkers(spec, latents, sexes, scan_ids, rng) -> CohortTable:
    values = {}
    for recipe in spec.biomarkers:
        col = latents @ np.asarray(recipe.weights, dtype=float) + recipe.sigma * rng.standard_normal(len(scan_ids))
        if spec.missing_fraction > 0:
            col = np.where(rng.random(len(scan_ids)) < spec.missing_fraction, np.nan, col)
        values[recipe.name] = col
    rows = []
    for i, sid in enumerate(scan_ids):
        bm = {name: (None if np.isnan(col[i]) else float(col[i])) for name, col in values.items()}
        rows.append(CohortRow(sid, f"subj{i:05d}", sexes[i], bm))
    return CohortTable(tuple(r.name for r in spec.biomarkers), rows)


def band_limited_image(width: int, height: int, rng, n_waves: int = 4, max_cycles: float = 2.0,
                       base: float = 1000.0, amplitude: float = 300.0) -> np.ndarray:
    """Sum of a few low-frequency sinusoids over the whole canvas."""
    rng = np.random.default_rng(rng)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), base)
    for _ in range(n_waves):
        fx, fy = rng.uniform(-max_cycles, max_cycles, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img += amplitude / n_waves * np.cos(2 * np.pi * (fx * xx / width + fy * yy / height) + phase)
    return img


def write_corpus(phantoms: PhantomSet, out_dir) -> Path:
    """Write points/, images/, per-sex triangulations, cohort.csv and
    latents.csv in the formats model_io reads."""
    out = Path(out_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    for ps in phantoms.point_sets:
        write_point_file(ps, out / "points" / f"{ps.scan_id}.csv")
    for mode, ims in phantoms.images.items():
        for im in ims:
            write_image(im, out / "images" / f"{im.scan_id}_{mode}.pgm")
    for sex in ("F", "M"):
        write_triangulation(phantoms.triangulation, out / f"triangulation_{sex}.txt")
    write_cohort(phantoms.cohort, out / "cohort.csv")
    with open(out / "latents.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("scan_id," + ",".join(LATENTS) + "\n")
        for sid, z in zip(phantoms.scan_ids, phantoms.latents):
            fh.write(sid + "," + ",".join(repr(float(v)) for v in z) + "\n")
    return out


@dataclass(frozen=True)
class OracleReport:
    r2: tuple[float, ...]  # per latent, regressing the latent on the scores
    canonical_correlations: tuple[float, ...]


def oracle_report(scores, latents, k: int | None = None) -> OracleReport:
    """How well the top-``k`` model scores linearly recover each latent."""
    s = np.asarray(scores, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] != z.shape[0]:
        raise ValueError(f"{s.shape[0]} score rows vs {z.shape[0]} latent rows")
    if k is not None:
        s = s[:, :k]
    design = np.column_stack([np.ones(len(s)), s])
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    resid = z - design @ coef
    zc = z - z.mean(axis=0)
    r2 = 1 - (resid**2).sum(axis=0) / (zc**2).sum(axis=0)

    sc = s - s.mean(axis=0)
    qs, _ = np.linalg.qr(sc)
    qz, _ = np.linalg.qr(zc)
    cc = np.clip(np.linalg.svd(qs.T @ qz, compute_uv=False), 0.0, 1.0)
    return OracleReport(tuple(float(v) for v in r2), tuple(float(v) for v in cc))
