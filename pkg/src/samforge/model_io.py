"""On-disk formats: point CSVs, triangulations, scan images, cohort tables and
the ``SAMM0001`` model container."""

from __future__ import annotations

import csv
import io
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    BadMagicError,
    DegenerateTriangleError,
    FormatError,
    ModelValidationError,
    TruncatedFileError,
)

MODES = ("d_fat", "bmd_irs", "r_air", "d_lean", "m_bone_irs")
TEXTURE_MODES = ("d_fat", "bmd_irs", "d_lean", "m_bone_irs")
SEXES = ("F", "M")
DEFAULT_N_POINTS = 105

# warping divides by twice the triangle area
EPS_AREA = 1e-6

MAGIC = b"SAMM0001"
MODEL_KINDS = ("shape", "texture", "appearance")
ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class PointSet:
    scan_id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise FormatError(f"{self.scan_id}: points must be an (n, 2) array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise FormatError(f"{self.scan_id}: non-finite coordinate")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Triangulation:
    n_points: int
    triangles: np.ndarray

    def __post_init__(self):
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)

    def __len__(self):
        return self.triangles.shape[0]

    def signed_areas(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        a, b, c = (pts[self.triangles[:, i]] for i in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))

    def check_areas(self, points, eps: float = EPS_AREA) -> None:
        """Raise if any triangle is degenerate in the given configuration."""
        areas = np.abs(self.signed_areas(points))
        bad = np.flatnonzero(areas <= eps)
        if bad.size:
            t = int(bad[0])
            raise DegenerateTriangleError(
                f"degenerate triangle {t} {tuple(int(v) for v in self.triangles[t])}: "
                f"area {areas[t]:.3g} px^2",
                triangle=t,
            )


@dataclass
class ScanImage:
    scan_id: str
    mode: str
    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise FormatError(f"{self.scan_id}: image must be single-channel 2D")
        if self.mode not in MODES:
            raise FormatError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class CohortRow:
    scan_id: str
    subject_id: str
    sex: str
    biomarkers: Mapping[str, float | None]


@dataclass
class CohortTable:
    biomarker_names: tuple[str, ...]
    rows: list[CohortRow]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for row in self.rows:
            if row.scan_id in self._index:
                raise FormatError(f"duplicate scan_id {row.scan_id!r}")
            if row.sex not in SEXES:
                raise FormatError(f"invalid sex {row.sex!r} for scan {row.scan_id!r}")
            for name, v in row.biomarkers.items():
                if v is not None and not math.isfinite(v):
                    raise FormatError(f"non-finite {name} for scan {row.scan_id!r}")
            self._index[row.scan_id] = row

    def __len__(self):
        return len(self.rows)

    def __contains__(self, scan_id):
        return scan_id in self._index

    def __getitem__(self, scan_id) -> CohortRow:
        return self._index[scan_id]

    @property
    def scan_ids(self) -> list[str]:
        return [r.scan_id for r in self.rows]

    def completion(self, name: str) -> float:
        if name not in self.biomarker_names:
            raise KeyError(name)
        if not self.rows:
            return 0.0
        present = sum(r.biomarkers.get(name) is not None for r in self.rows)
        return present / len(self.rows)

    def values(self, name: str, scan_ids: Iterable[str]) -> np.ndarray:
        """Biomarker values for ``scan_ids`` with NaN where missing."""
        if name not in self.biomarker_names:
            raise KeyError(f"unknown biomarker {name!r}")
        out = []
        for sid in scan_ids:
            v = self._index[sid].biomarkers.get(name)
            out.append(np.nan if v is None else v)
        return np.asarray(out, dtype=np.float64)

    def with_sex(self, sex: str) -> list[str]:
        return [r.scan_id for r in self.rows if r.sex == sex]


# ---------------------------------------------------------------- text helpers

def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read().replace("\r\n", "\n")


def _parse_float(text, where):
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"{where}: non-finite value {text!r}")
    return v


# ---------------------------------------------------------------- point files

POINT_HEADER = ["point_index", "x_px", "y_px"]


def read_point_file(path) -> PointSet:
    path = Path(path)
    reader = csv.reader(io.StringIO(_read_text(path)))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != POINT_HEADER:
        raise FormatError(f"{path.name}: expected header {','.join(POINT_HEADER)}")
    pts = []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FormatError(f"{path.name}: row {row_no} has {len(row)} fields, expected 3")
        try:
            idx = int(row[0])
        except ValueError:
            raise FormatError(f"{path.name}: bad index at row {row_no}: {row[0]!r}") from None
        if idx < len(pts):
            raise FormatError(f"{path.name}: duplicate index at row {row_no}")
        if idx != len(pts):
            raise FormatError(f"{path.name}: non-contiguous index at row {row_no}")
        pts.append(
            (_parse_float(row[1], f"{path.name} row {row_no}"), _parse_float(row[2], f"{path.name} row {row_no}"))
        )
    if not pts:
        raise FormatError(f"{path.name}: no points")
    return PointSet(path.stem, np.array(pts))


def write_point_file(points: PointSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(POINT_HEADER) + "\n")
        for i, (x, y) in enumerate(points.points):
            fh.write(f"{i},{float(x)!r},{float(y)!r}\n")


# ---------------------------------------------------------------- triangulations

def read_triangulation(path, n_points: int, points=None) -> Triangulation:
    """Parse a triangle list; if ``points`` is given, also reject triangles
    whose area there is at most ``EPS_AREA``."""
    tris = []
    for line_no, line in enumerate(_read_text(path).split("\n"), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise FormatError(f"line {line_no}: expected 3 indices, got {len(parts)}")
        try:
            tri = tuple(int(p) for p in parts)
        except ValueError:
            raise FormatError(f"line {line_no}: non-integer index") from None
        tris.append((line_no, tri))
    return validate_triangulation([t for _, t in tris], n_points, points, lines=[n for n, _ in tris])


def validate_triangulation(triangles, n_points: int, points=None, lines=None) -> Triangulation:
    if not len(triangles):
        raise FormatError("triangulation has no triangles")
    for pos, tri in enumerate(triangles):
        where = f"line {lines[pos]}" if lines else f"triangle {pos}"
        if any(i < 0 or i >= n_points for i in tri):
            raise FormatError(f"{where}: index out of range for {n_points} points: {tuple(tri)}")
        if len(set(tri)) != 3:
            raise FormatError(f"{where}: degenerate triangle {tuple(tri)}")
    result = Triangulation(n_points, np.asarray(triangles, dtype=np.int64))
    _check_disk_topology(result)
    if points is not None:
        result.check_areas(points)
    return result


def _check_disk_topology(tri: Triangulation) -> None:
    # Manifold edges and Euler characteristic 1 for the used vertices.
    edges = {}
    for t in tri.triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    if any(c > 2 for c in edges.values()):
        raise FormatError("triangulation has an edge shared by more than two triangles")
    n_vertices = len(np.unique(tri.triangles))
    if n_vertices - len(edges) + len(tri) != 1:
        raise FormatError("triangulation does not cover a simply connected region")


def write_triangulation(tri: Triangulation, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {len(tri)} triangles over {tri.n_points} points\n")
        for a, b, c in tri.triangles:
            fh.write(f"{a} {b} {c}\n")


# ---------------------------------------------------------------- images

_MODE_RE = re.compile(r"_(" + "|".join(sorted(MODES, key=len, reverse=True)) + r")$")


def mode_from_filename(path) -> tuple[str, str]:
    """Split ``<scan_id>_<mode>.<ext>`` into ``(scan_id, mode)``."""
    stem = Path(path).stem
    m = _MODE_RE.search(stem)
    if not m:
        raise FormatError(f"{Path(path).name}: unknown mode suffix; valid modes: {', '.join(MODES)}")
    return stem[: m.start()], m.group(1)


def _read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{Path(path).name}: truncated PGM header")
        tokens.append(data[start:pos])
        if tokens[0] in (b"P6", b"P3"):
            raise FormatError(f"{Path(path).name}: multi-channel input is not supported")
        if tokens[0] != b"P5":
            raise FormatError(f"{Path(path).name}: not a binary PGM (P5)")
    pos += 1
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(data) - pos < count * dtype.itemsize:
        raise TruncatedFileError(f"{Path(path).name}: truncated pixel data")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.reshape(height, width)


def _read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
            raise FormatError(f"{Path(path).name}: multi-channel input ({im.mode}) is not supported")
        return np.array(im)


def read_image(path, upsample: int = 1) -> ScanImage:
    """Read a 16-bit PGM or grayscale PNG; optionally upsample bicubically
    by an integer factor."""
    scan_id, mode = mode_from_filename(path)
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        raw = _read_pgm(path)
    elif suffix == ".png":
        raw = _read_png(path)
    else:
        raise FormatError(f"{Path(path).name}: unsupported image type {suffix!r}")
    pixels = raw.astype(np.float64)
    if upsample != 1:
        pixels = upsample_bicubic(pixels, upsample)
    return ScanImage(scan_id, mode, pixels)


def upsample_bicubic(pixels: np.ndarray, factor: int) -> np.ndarray:
    if int(factor) != factor or factor < 1:
        raise ValueError("upsampling factor must be a positive integer")
    return ndimage.zoom(pixels, factor, order=3, mode="nearest", grid_mode=True)


def to_uint16(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels), 0, 65535).astype(np.uint16)


def write_image(image: ScanImage | np.ndarray, path) -> None:
    """Write as 16-bit PGM or PNG (by extension), clamping to [0, 65535]."""
    pixels = image.pixels if isinstance(image, ScanImage) else np.asarray(image)
    arr = to_uint16(pixels)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = arr.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(arr.astype(">u2").tobytes())
    elif path.suffix.lower() == ".png":
        Image.fromarray(arr).save(path)
    else:
        raise FormatError(f"unsupported image type {path.suffix!r}")


# ---------------------------------------------------------------- cohort tables

def read_cohort(path) -> CohortTable:
    reader = csv.reader(io.StringIO(_read_text(path)))
    header = [h.strip() for h in next(reader, [])]
    if header[:3] != ["scan_id", "subject_id", "sex"]:
        raise FormatError("cohort header must start with scan_id,subject_id,sex")
    names = tuple(header[3:])
    if len(set(names)) != len(names):
        raise FormatError("duplicate biomarker column")
    rows = []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"cohort row {row_no}: {len(row)} fields, expected {len(header)}")
        values = {}
        for name, cell in zip(names, row[3:]):
            cell = cell.strip()
            values[name] = None if cell == "" else _parse_float(cell, f"cohort row {row_no} {name}")
        rows.append(CohortRow(row[0].strip(), row[1].strip(), row[2].strip(), values))
    return CohortTable(names, rows)


def write_cohort(table: CohortTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "subject_id", "sex", *table.biomarker_names])
        for r in table.rows:
            cells = ["" if r.biomarkers.get(n) is None else repr(float(r.biomarkers[n])) for n in table.biomarker_names]
            w.writerow([r.scan_id, r.subject_id, r.sex, *cells])


# ---------------------------------------------------------------- model container

@dataclass
class ModelContainer:
    """Format-level view of a persisted model.

    ``arrays`` holds every numeric payload; PCA blocks are stored under a
    prefix (``""``, ``"shape."``, ``"texture."``) as ``mean``,
    ``eigenvalues``, ``components``, ``p10`` and ``p90``.
    """

    kind: str
    sex: str
    n_points: int
    variance_fraction: float
    arrays: dict[str, np.ndarray]
    mode: str | None = None
    frame_dims: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def pca_prefixes(self) -> list[str]:
        return sorted(name[: -len("eigenvalues")] for name in self.arrays if name.endswith("eigenvalues"))


def _validate_container(c: ModelContainer) -> None:
    if c.kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {c.kind!r}")
    for prefix in c.pca_prefixes():
        ev = np.asarray(c.arrays[prefix + "eigenvalues"])
        comps = np.asarray(c.arrays[prefix + "components"])
        if np.any(ev <= 0):
            raise ModelValidationError(f"{prefix}eigenvalues not strictly positive")
        if np.any(np.diff(ev) > 0):
            raise ModelValidationError(f"{prefix}eigenvalues not sorted")
        if comps.ndim != 2 or comps.shape[1] != ev.size:
            raise ModelValidationError(f"{prefix}components shape {comps.shape} does not match {ev.size} eigenvalues")
        gram = comps.T @ comps
        if gram.size and np.max(np.abs(gram - np.eye(ev.size))) > ORTHONORMAL_TOL:
            raise ModelValidationError(f"{prefix}components are not orthonormal")


def write_model(model, path) -> None:
    """Persist a model (anything with ``to_container()``) or a ModelContainer."""
    c = model if isinstance(model, ModelContainer) else model.to_container()
    _validate_container(c)
    specs = []
    chunks = []
    offset = 0
    for name in sorted(c.arrays):
        arr = np.ascontiguousarray(c.arrays[name], dtype="<f8")
        specs.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "kind": c.kind,
        "sex": c.sex,
        "mode": c.mode,
        "n_points": int(c.n_points),
        "frame_dims": list(c.frame_dims) if c.frame_dims is not None else None,
        "variance_fraction": float(c.variance_fraction),
        "meta": c.meta,
        "arrays": specs,
        "payload_count": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def read_model(path) -> ModelContainer:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{Path(path).name}: bad magic {data[:8]!r}")
    if len(data) < 16:
        raise TruncatedFileError(f"{Path(path).name}: truncated header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise TruncatedFileError(f"{Path(path).name}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{Path(path).name}: corrupt header ({exc})") from None
    payload = memoryview(data)[16 + hlen :]
    expected = header["payload_count"] * 8
    if len(payload) < expected:
        raise TruncatedFileError(f"{Path(path).name}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"{Path(path).name}: trailing bytes after payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = flat[spec["offset"] : spec["offset"] + count].reshape(spec["shape"]).copy()
    c = ModelContainer(
        kind=header["kind"],
        sex=header["sex"],
        n_points=header["n_points"],
        variance_fraction=header["variance_fraction"],
        arrays=arrays,
        mode=header["mode"],
        frame_dims=tuple(header["frame_dims"]) if header["frame_dims"] is not None else None,
        meta=header["meta"],
    )
    _validate_container(c)
    return c
