"""Directory layout shared by ``synth`` output and every pipeline command:

    <root>/points/<scan_id>.csv
    <root>/images/<scan_id>_<mode>.pgm|png
    <root>/triangulation_<sex>.txt
    <root>/cohort.csv
"""

from __future__ import annotations

from pathlib import Path

from .errors import FormatError
from .model_io import CohortTable, PointSet, ScanImage, read_cohort, read_image, read_point_file, read_triangulation


def load_points(root, scan_ids=None) -> dict[str, PointSet]:
    folder = Path(root) / "points" if (Path(root) / "points").is_dir() else Path(root)
    files = sorted(folder.glob("*.csv"))
    if scan_ids is not None:
        wanted = set(scan_ids)
        files = [f for f in files if f.stem in wanted]
    points = {f.stem: read_point_file(f) for f in files}
    if not points:
        raise FormatError(f"no point files under {folder}")
    return points


def load_images(root, mode: str, scan_ids) -> dict[str, ScanImage]:
    folder = Path(root) / "images"
    out = {}
    for sid in scan_ids:
        for ext in (".pgm", ".png"):
            p = folder / f"{sid}_{mode}{ext}"
            if p.exists():
                out[sid] = read_image(p)
                break
        else:
            raise FormatError(f"missing {mode} image for scan {sid!r} under {folder}")
    return out


def load_cohort(root) -> CohortTable:
    return read_cohort(Path(root) / "cohort.csv")


def load_triangulation(root, sex: str, n_points: int):
    return read_triangulation(Path(root) / f"triangulation_{sex}.txt", n_points)


def scans_for_sex(root, sex: str | None) -> list[str]:
    """Scan ids with point files, filtered by the cohort's sex column."""
    folder = Path(root) / "points"
    ids = sorted(f.stem for f in folder.glob("*.csv"))
    if not ids:
        raise FormatError(f"no point files under {folder}")
    if sex is None:
        return ids
    cohort = load_cohort(root)
    return [s for s in ids if s in cohort and cohort[s].sex == sex]
