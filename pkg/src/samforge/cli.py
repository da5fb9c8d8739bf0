"""Command-line front end.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, association, keypoints, pca
from .corpus import load_cohort, load_images, load_points, load_triangulation, scans_for_sex
from .errors import SamforgeError
from .geometry import build_reference_frame, render_on_shape
from .model_io import (
    MODES,
    SEXES,
    TEXTURE_MODES,
    PointSet,
    ScanImage,
    read_cohort,
    read_triangulation,
    write_image,
    write_point_file,
)
from .phantoms import PhantomSpec, generate, write_corpus
from .shape import ShapeModel, build_shape_model, project_shape, synthesize_shape
from .store import load_model, model_kind, save_model
from .texture import (
    AppearanceModel,
    Reconstruction,
    TextureModel,
    build_appearance_model,
    build_texture_model,
    project_appearance,
    reconstruct_image,
    render_texture,
    texture_matrix,
)

log = logging.getLogger("samforge")


def _fraction(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("must be in (0, 1]")
    return v


def _existing(text):
    if not Path(text).exists():
        raise argparse.ArgumentTypeError(f"{text} does not exist")
    return Path(text)


def _jobs(args) -> int:
    if args.jobs:
        return args.jobs
    env = os.environ.get("SAMFORGE_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--jobs", type=int, default=0, help="worker threads (default: $SAMFORGE_JOBS or all cores)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--variance-fraction", type=_fraction, default=0.95)
    fit.add_argument("--solver", choices=("exact", "randomized"), default="exact")

    p = sub.add_parser("synth", parents=[common], help="generate a phantom corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--n-points", type=int, default=105)
    p.add_argument("--noise", type=float, default=0.5, help="landmark noise sigma (px)")
    p.add_argument("--image-noise", type=float, default=0.0)
    p.add_argument("--sex", choices=SEXES)
    p.add_argument("--missing", type=float, default=0.0, help="fraction of missing biomarker cells")
    p.add_argument("--modes", default=",".join(MODES))

    p = sub.add_parser("build-shape", parents=[common, fit], help="fit a shape model")
    p.add_argument("--in", dest="inp", type=_existing, required=True)
    p.add_argument("--sex", choices=SEXES, required=True)

    for name, helptext in (("build-texture", "fit a texture model"), ("build-appearance", "fit an appearance model")):
        p = sub.add_parser(name, parents=[common, fit], help=helptext)
        p.add_argument("--in", dest="inp", type=_existing, required=True)
        p.add_argument("--sex", choices=SEXES, required=True)
        p.add_argument("--mode", choices=TEXTURE_MODES, required=True)
        p.add_argument("--shape", type=_existing, help="shape model (built from the corpus if omitted)")
        p.add_argument("--frame-long-side", type=int, default=256)
        p.add_argument("--normalization", choices=("raw", "zero_mean_unit_var"), default="raw")
        if name == "build-appearance":
            p.add_argument("--texture", type=_existing, help="texture model (built if omitted)")

    p = sub.add_parser("project", parents=[common], help="score scans with a model")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--in", dest="inp", type=_existing, required=True)

    p = sub.add_parser("render-modes", parents=[common], help="render +/- SD mode extremes")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--sd", type=float, default=2.5)
    p.add_argument("--top", type=int, default=6)
    p.add_argument("--triangulation", type=_existing, help="mesh for silhouettes of shape models")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("reconstruct", parents=[common], help="render images from score vectors")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--scores", type=_existing, required=True, help="CSV: scan_id,pc1,pc2,...")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("eval-points", parents=[common], help="PCK/EPE/NME of predicted landmarks")
    p.add_argument("--pred", type=_existing, required=True)
    p.add_argument("--gt", type=_existing, required=True)
    p.add_argument("--compare", type=_existing, help="second prediction directory")
    p.add_argument("--tau", type=float, default=0.1)

    p = sub.add_parser("associate", parents=[common], help="percentile-tail KS tests against biomarkers")
    p.add_argument("--model", type=_existing, nargs="+", required=True)
    p.add_argument("--in", dest="inp", type=_existing, required=True, help="test corpus")
    p.add_argument("--cohort", type=_existing, help="cohort CSV (default: <in>/cohort.csv)")
    p.add_argument("--biomarkers", help="comma-separated subset")
    p.add_argument("--alpha-base", type=float, default=0.05)
    p.add_argument("--alpha-pinned", type=float, help="use this literal adjusted alpha, e.g. 4.1e-6")
    p.add_argument("--percentile-source", choices=("train", "self"), default="train")
    p.add_argument("--min-tail", type=int, default=association.MIN_TAIL)
    p.add_argument("--representatives", action="store_true", help="render representative images")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")

    p = sub.add_parser("spearman", parents=[common], help="Spearman correlations of scores with biomarkers")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--in", dest="inp", type=_existing, required=True)
    p.add_argument("--cohort", type=_existing)
    p.add_argument("--biomarkers")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--alpha", type=float, default=association.SPEARMAN_ALPHA)
    p.add_argument("--min-abs-rho", type=float, default=0.0)
    return parser


# ---------------------------------------------------------------- helpers

def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _manifest(args, out: Path, extra=None):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    if isinstance(config.get("model"), list):
        config["model"] = [str(m) for m in config["model"]]
    manifest = {
        "subcommand": args.command,
        "config": config,
        "seed": args.seed,
        "versions": {
            "samforge": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    _write_json(out / "run_manifest.json", manifest)


def _fit_kwargs(args):
    return dict(solver=args.solver, seed=args.seed)


def _corpus_scans(args, sex):
    ids = scans_for_sex(args.inp, sex)
    if len(ids) < 2:
        raise SamforgeError(f"need at least 2 {sex} scans under {args.inp}, found {len(ids)}")
    points = load_points(args.inp, ids)
    return ids, [points[s] for s in ids]


def _shape_for(args, point_sets):
    if args.shape:
        model = load_model(args.shape)
        if not isinstance(model, ShapeModel):
            raise SamforgeError(f"{args.shape} is not a shape model")
        return model
    return build_shape_model(point_sets, args.sex, args.variance_fraction, **_fit_kwargs(args))


def _score_rows(path, ids, scores):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", *[f"pc{i + 1}" for i in range(scores.shape[1])]])
        for sid, row in zip(ids, scores):
            w.writerow([sid, *[repr(float(v)) for v in row]])


def _read_scores(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "scan_id":
        raise SamforgeError(f"{path}: expected header scan_id,pc1,...")
    return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(rows) - 1, -1)


def score_corpus(model, root, sex=None, jobs=1):
    """(scan ids, scores) for every scan of the model's sex under ``root``."""
    ids = scans_for_sex(root, sex or model.sex)
    if not ids:
        raise SamforgeError(f"no {model.sex} scans under {root}")
    points = load_points(root, ids)
    pts = [points[s] for s in ids]
    if isinstance(model, ShapeModel):
        return ids, np.stack([project_shape(model, p) for p in pts])
    images = load_images(root, model.mode, ids)
    ims = [images[s] for s in ids]
    if isinstance(model, TextureModel):
        return ids, pca.project(model.pca, texture_matrix(ims, pts, model.frame, model.normalization, jobs))
    return ids, project_appearance(model, pts, ims, jobs=jobs)


def _save_recon(rec, out: Path, stem: str, fmt: str):
    write_image(rec.image, out / f"{stem}.{fmt}")
    write_point_file(rec.points, out / f"{stem}_points.csv")


def _render(model, scores, name, triangulation=None):
    if isinstance(model, AppearanceModel):
        return reconstruct_image(model, scores, name)
    if isinstance(model, TextureModel):
        return render_texture(model, scores, scan_id=name)
    pts = synthesize_shape(model, scores, name)
    if triangulation is None:
        return Reconstruction(pts, None)
    frame = build_reference_frame(model.mean_shape, triangulation, 256)
    fp = frame.to_frame(pts.points)
    silhouette = render_on_shape(np.full((frame.height, frame.width), 1000.0), frame, fp, frame.width, frame.height)
    return Reconstruction(PointSet(name, fp), ScanImage(name, "r_air", silhouette))


# ---------------------------------------------------------------- commands

def cmd_synth(args, out):
    spec = PhantomSpec(seed=args.seed, n_scans=args.n, n_points=args.n_points, noise_sigma=args.noise,
                       image_noise=args.image_noise, sex=args.sex, missing_fraction=args.missing,
                       modes=tuple(m for m in args.modes.split(",") if m))
    phantoms = generate(spec)
    write_corpus(phantoms, out)
    print(f"wrote {args.n} phantom scans to {out}")
    return {"n_scans": args.n}


def cmd_build_shape(args, out):
    ids, pts = _corpus_scans(args, args.sex)
    model = build_shape_model(pts, args.sex, args.variance_fraction, **_fit_kwargs(args))
    path = out / f"shape_{args.sex}.samm"
    save_model(model, path)
    report = {"model": path.name, "sex": args.sex, "n_train": len(ids), "k": model.k,
              "explained": model.pca.explained.tolist()}
    _write_json(out / f"shape_{args.sex}_report.json", report)
    print(f"shape model {args.sex}: k={model.k} components explain "
          f"{model.pca.explained.sum():.4f} of variance ({len(ids)} scans)")
    return report


def _texture_inputs(args):
    ids, pts = _corpus_scans(args, args.sex)
    images = load_images(args.inp, args.mode, ids)
    shape = _shape_for(args, pts)
    tri = load_triangulation(args.inp, args.sex, pts[0].n)
    return ids, pts, [images[s] for s in ids], shape, tri


def cmd_build_texture(args, out):
    ids, pts, ims, shape, tri = _texture_inputs(args)
    model = build_texture_model(ims, pts, shape, tri, args.variance_fraction, args.normalization,
                                args.frame_long_side, _jobs(args), **_fit_kwargs(args))
    path = out / f"tex_{args.sex}_{args.mode}.samm"
    save_model(model, path)
    report = {"model": path.name, "k": model.k, "n_pixels": model.frame.n_pixels,
              "frame": [model.frame.width, model.frame.height], "explained": model.pca.explained.tolist()}
    _write_json(out / f"tex_{args.sex}_{args.mode}_report.json", report)
    print(f"texture model {args.sex}/{args.mode}: k={model.k}, {model.frame.n_pixels} pixels")
    return report


def cmd_build_appearance(args, out):
    ids, pts, ims, shape, tri = _texture_inputs(args)
    if args.texture:
        tex = load_model(args.texture)
        if not isinstance(tex, TextureModel):
            raise SamforgeError(f"{args.texture} is not a texture model")
        textures = None
    else:
        tex = build_texture_model(ims, pts, shape, tri, args.variance_fraction, args.normalization,
                                  args.frame_long_side, _jobs(args), **_fit_kwargs(args))
        textures = texture_matrix(ims, pts, tex.frame, tex.normalization, _jobs(args))
    model = build_appearance_model(shape, tex, pts, ims, textures, args.variance_fraction,
                                   _jobs(args), **_fit_kwargs(args))
    path = out / f"app_{args.sex}_{args.mode}.samm"
    save_model(model, path)
    report = {"model": path.name, "k": model.k, "k_shape": shape.k, "k_texture": tex.k,
              "shape_weight": model.shape_weight, "explained": model.pca.explained.tolist()}
    _write_json(out / f"app_{args.sex}_{args.mode}_report.json", report)
    print(f"appearance model {args.sex}/{args.mode}: k={model.k} (shape {shape.k}, texture {tex.k})")
    return report


def cmd_project(args, out):
    model = load_model(args.model)
    ids, scores = score_corpus(model, args.inp, jobs=_jobs(args))
    _score_rows(out / f"scores_{Path(args.model).stem}.csv", ids, scores)
    return {"n_scans": len(ids), "k": model.k}


def cmd_render_modes(args, out):
    model = load_model(args.model)
    tri = None
    if isinstance(model, ShapeModel) and args.triangulation:
        tri = read_triangulation(args.triangulation, model.n_points)
    top = min(args.top, model.k)
    rows = []
    for i in range(top):
        for sign, tag in ((1, "plus"), (-1, "minus")):
            scores = np.zeros(i + 1)
            scores[i] = sign * args.sd * np.sqrt(model.pca.eigenvalues[i])
            stem = f"pc{i + 1}_{tag}"
            rec = _render(model, scores, stem, tri)
            write_point_file(rec.points, out / f"{stem}_points.csv")
            if rec.image is not None:
                write_image(rec.image, out / f"{stem}.{args.format}")
            rows.append((i + 1, tag, args.sd, float(scores[i])))
    with open(out / "modes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "direction", "sd", "score"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3])])
    print(f"rendered {len(rows)} mode extremes (top {top} components at +/-{args.sd} SD)")
    return {"n_rendered": len(rows)}


def cmd_reconstruct(args, out):
    model = load_model(args.model)
    if isinstance(model, ShapeModel):
        raise SamforgeError("reconstruct needs a texture or appearance model")
    ids, scores = _read_scores(args.scores)
    for sid, row in zip(ids, scores):
        _save_recon(_render(model, row[: model.k], sid), out, f"recon_{sid}", args.format)
    return {"n_reconstructed": len(ids)}


def cmd_eval_points(args, out):
    gt = load_points(args.gt)
    pred = load_points(args.pred)
    report = keypoints.evaluate_sets(pred, gt, args.tau)
    keypoints.write_report(report, out / "eval_points.csv", out / "eval_points.json")
    print(report.summary())
    result = {"summary": report.summary()}
    if args.compare:
        cmp = keypoints.compare(pred, load_points(args.compare), gt, args.tau)
        with open(out / "eval_compare.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scan_id", "d_pck", "d_epe", "d_nme"])
            for sid, *d in cmp.deltas:
                w.writerow([sid, *[repr(float(v)) for v in d]])
        print(f"compare: {cmp.b.summary()} (delta pck/epe/nme = {cmp.aggregate_delta})")
        result["compare"] = cmp.b.summary()
    return result


def _cohort(args):
    return read_cohort(args.cohort) if args.cohort else load_cohort(args.inp)


def _biomarkers(args, cohort):
    if not args.biomarkers:
        return None
    return [b.strip() for b in args.biomarkers.split(",") if b.strip()]


def cmd_associate(args, out):
    cohort = _cohort(args)
    jobs = _jobs(args)
    models, sets = [], []
    for path in args.model:
        model = load_model(path)
        ids, scores = score_corpus(model, args.inp, jobs=jobs)
        models.append(model)
        sets.append(association.ScoreSet.from_model(model, model_kind(model), ids, scores))
    results = association.scan_associations(
        sets, cohort, _biomarkers(args, cohort), args.alpha_base, args.alpha_pinned,
        args.percentile_source, args.min_tail, jobs,
    )
    association.write_rows(results, out / "associations.csv", association.RESULT_COLUMNS)
    association.write_rows(association.variance_significance_table(results), out / "variance_table.csv")
    n_sig = sum(r.significant for r in results)
    n_run = sum(not r.skipped for r in results)
    if args.representatives:
        rep_dir = out / "representatives"
        rep_dir.mkdir(exist_ok=True)
        by_key = {(ss.model_kind, ss.mode, ss.sex): (m, ss) for m, ss in zip(models, sets)}
        for r in results:
            model, ss = by_key[(r.model_kind, r.mode, r.sex)]
            if not isinstance(model, AppearanceModel) or not r.significant:
                continue
            for rec in association.representative_images(model, ss, r, args.percentile_source):
                _save_recon(rec, rep_dir, f"{r.model_key}_{rec.image.scan_id}", args.format)
        for model, ss in zip(models, sets):
            if isinstance(model, AppearanceModel):
                rec = reconstruct_image(model, ss.scores.mean(axis=0), "overall_mean")
                _save_recon(rec, rep_dir, f"{model_kind(model)}_{ss.sex}_{ss.mode}_overall_mean", args.format)
    print(f"{n_run} KS tests run, {len(results) - n_run} skipped, {n_sig} significant")
    return {"n_tests": n_run, "n_significant": n_sig}


def cmd_spearman(args, out):
    cohort = _cohort(args)
    model = load_model(args.model)
    ids, scores = score_corpus(model, args.inp, jobs=_jobs(args))
    ss = association.ScoreSet.from_model(model, model_kind(model), ids, scores)
    rows = association.spearman_table(ss, cohort, _biomarkers(args, cohort), args.top, args.alpha)
    shown = [r for r in rows if abs(r.rho) >= args.min_abs_rho] if args.min_abs_rho > 0 else rows
    association.write_rows(shown, out / "spearman.csv",
                           ["component", "biomarker", "n", "rho", "p_value", "significant"])
    return {"n_rows": len(shown)}


COMMANDS = {
    "synth": cmd_synth,
    "build-shape": cmd_build_shape,
    "build-texture": cmd_build_texture,
    "build-appearance": cmd_build_appearance,
    "project": cmd_project,
    "render-modes": cmd_render_modes,
    "reconstruct": cmd_reconstruct,
    "eval-points": cmd_eval_points,
    "associate": cmd_associate,
    "spearman": cmd_spearman,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, out)
        _manifest(args, out, {"result": extra})
    except (SamforgeError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"samforge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
