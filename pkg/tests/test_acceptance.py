"""Acceptance suite: one test per criterion, each recording a pass/fail line
that is repeated in the terminal summary."""

import json
import math
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from samforge import association as assoc
from samforge import geometry as geo
from samforge import keypoints as kp
from samforge import pca
from samforge.cli import main
from samforge.model_io import CohortRow, CohortTable, PointSet
from samforge.phantoms import (HALF_HEIGHT, BiomarkerRecipe, PhantomSpec, band_limited_image, generate,
                               oracle_report)
from samforge.shape import build_shape_model, project_shape
from samforge.store import load_model, save_model
from samforge.texture import build_appearance_model, build_texture_model, project_appearance


def psnr(a, b, peak):
    return 10 * np.log10(peak**2 / np.mean((a - b) ** 2))


# ---------------------------------------------------------------- 1

def test_criterion_1_metric_fixtures(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 100, (105, 2))
    gt[0], gt[1] = (0, 0), (100, 100)
    off = gt.copy()
    off[17] += (30, 40)
    m = kp.evaluate(PointSet("a", off), PointSet("a", gt))
    u = kp.evaluate(PointSet("a", gt + (3, 0)), PointSet("a", gt))
    same = kp.evaluate(PointSet("a", gt), PointSet("a", gt))

    worst = 0.0
    pck_equal = True
    for _ in range(100):
        g = rng.uniform(-50, 300, (105, 2))
        p = g + rng.normal(0, rng.uniform(0.5, 20), g.shape)
        s = rng.uniform(0.1, 10)
        a = kp.evaluate(PointSet("x", p), PointSet("x", g))
        b = kp.evaluate(PointSet("x", s * p), PointSet("x", s * g))
        pck_equal &= a.pck == b.pck
        worst = max(worst, abs(b.nme - a.nme) / a.nme, abs(b.epe - s * a.epe) / (s * a.epe))
    elapsed = time.perf_counter() - t0
    checks = {
        "pck 104/105": m.pck == 104 / 105,
        "epe 50/105": abs(m.epe - 50 / 105) < 1e-12,
        "uniform offset epe 3": abs(u.epe - 3) < 1e-12,
        "identity": (same.pck, same.epe, same.nme) == (1.0, 0.0, 0.0),
        "scale covariance 1e-9": pck_equal and worst < 1e-9,
        "runtime < 1 s": elapsed < 1,
    }
    assert acceptance(1, checks, elapsed), checks


# ---------------------------------------------------------------- 2

def test_criterion_2_pca(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 50))
    full = pca.fit(x, 1.0)
    rel = np.linalg.norm(pca.reconstruct(full, pca.project(full, x)) - x) / np.linalg.norm(x)

    h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)[:, 1:]
    basis = np.linalg.qr(rng.standard_normal((8, 3)))[0]
    y = (h / 2 * np.sqrt(np.array([9, 0.5, 0.5]) * 3)) @ basis.T + 4.0
    k_spec = pca.fit(y, 0.95).k

    n, d, r = 2000, 5000, 10
    low = rng.standard_normal((n, r)) @ (np.diag(np.linspace(30, 5, r)) @ rng.standard_normal((r, d)))
    big = low + 0.5 * rng.standard_normal((n, d))
    exact = pca.fit(big, 1.0)
    # the fraction reached by exactly ten components, so both fits keep the top 10
    frac10 = float(exact.eigenvalues[:r].sum() / exact.total_variance)
    rand = pca.fit(big, frac10, solver="randomized", seed=7)
    top = min(10, exact.k, rand.k)
    eig_rel = np.max(np.abs(rand.eigenvalues[:top] - exact.eigenvalues[:top]) / exact.eigenvalues[:top])
    cos = np.linalg.svd(exact.components[:, :top].T @ rand.components[:, :top], compute_uv=False)
    angle = float(np.arccos(np.clip(cos.min(), -1, 1)))
    elapsed = time.perf_counter() - t0
    checks = {
        f"self-reconstruction {rel:.1e} < 1e-6": rel < 1e-6,
        f"spectrum {{9,.5,.5}} -> k={k_spec}": k_spec == 2,
        f"randomized top-10 eigenvalues rel {eig_rel:.1e} < 1e-3": top == 10 and eig_rel < 1e-3,
        f"principal angle {angle:.1e} < 1e-2": angle < 1e-2,
        "runtime < 60 s": elapsed < 60,
    }
    assert acceptance(2, checks, elapsed), checks


# ---------------------------------------------------------------- 3

def test_criterion_3_shape_recovery(acceptance):
    t0 = time.perf_counter()
    height = 150
    # landmark noise at 1% of the body height
    spec = PhantomSpec(seed=3, n_scans=500, sex="F", modes=(), height=height,
                       noise_sigma=0.01 * 2 * HALF_HEIGHT * height)
    ph = generate(spec)
    model = build_shape_model(ph.point_sets, "F", 0.95)
    scores = np.stack([project_shape(model, ps) for ps in ph.point_sets])
    r2 = oracle_report(scores, ph.latents, k=3).r2
    shift = np.random.default_rng(3).uniform(-40, 40, 2)
    moved = build_shape_model([PointSet(p.scan_id, p.points + shift) for p in ph.point_sets], "F", 0.95)
    dev = max(np.abs(moved.pca.mean - model.pca.mean).max(),
              np.abs(moved.pca.components - model.pca.components).max(),
              np.abs(moved.pca.eigenvalues - model.pca.eigenvalues).max() / model.pca.eigenvalues[0])
    elapsed = time.perf_counter() - t0
    checks = {
        f"k={model.k} >= 3": model.k >= 3,
        f"R2 {np.round(r2, 4).tolist()} > 0.9": min(r2) > 0.9,
        f"translation invariance {dev:.1e} <= 1e-9": moved.k == model.k and dev <= 1e-9,
        "runtime < 30 s": elapsed < 30,
    }
    assert acceptance(3, checks, elapsed), checks


# ---------------------------------------------------------------- 4

def test_criterion_4_warping(acceptance):
    t0 = time.perf_counter()
    ph = generate(PhantomSpec(seed=4, n_scans=40, sex="F", modes=()))
    shape = build_shape_model(ph.point_sets, "F")
    frame = geo.build_reference_frame(shape.mean_shape, ph.triangulation, 256)
    rng = np.random.default_rng(4)

    src = rng.uniform(0, 4000, (frame.height, frame.width))
    ident = geo.warp_image(src, frame.mean_shape, frame)
    ident_err = np.abs(ident - src)[frame.mask].max()

    psnrs = []
    for ps in ph.point_sets[:20]:
        img = band_limited_image(ph.spec.width, ph.spec.height, rng)
        back = geo.render_on_shape(geo.warp_image(img, ps, frame), frame, ps.points, ph.spec.width, ph.spec.height)
        inside = geo.rasterize(ps.points, ph.triangulation, ph.spec.width, ph.spec.height)[0] >= 0
        psnrs.append(psnr(back[inside], img[inside], np.ptp(img[inside])))

    worst = 0.0
    for _ in range(1000):
        tri = rng.uniform(-500, 500, (3, 2))
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 1.0:
            continue
        p = rng.uniform(-600, 600, 2)
        worst = max(worst, np.abs(np.asarray(geo.barycentric(tri, p)) @ tri - p).max())
    elapsed = time.perf_counter() - t0
    checks = {
        f"identity warp {ident_err:.1e} <= 1e-9": ident_err <= 1e-9,
        f"round-trip PSNR min {min(psnrs):.1f} dB >= 30": min(psnrs) >= 30,
        f"barycentric reconstruction {worst:.1e} px <= 1e-6": worst <= 1e-6,
        "runtime < 30 s": elapsed < 30,
    }
    assert acceptance(4, checks, elapsed), checks


# ---------------------------------------------------------------- 5

def test_criterion_5_ks_spearman(acceptance):
    t0 = time.perf_counter()
    fixtures = (
        assoc.ks_two_sample([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
        and assoc.ks_statistic([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]) == 1.0
        and assoc.ks_statistic([1, 2, 3, 4], [1.5, 2.5, 3.5, 4.5]) == 0.25
        and assoc.spearman(np.arange(5.0), 10 * np.arange(5.0)) == 1.0
        and assoc.spearman(np.arange(5.0), -np.arange(5.0)) == -1.0
        and abs(assoc.spearman([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-15
        and math.isnan(assoc.spearman([2, 2, 2], [1, 2, 3]))
    )

    rng = np.random.default_rng(5)
    gaps = []
    for i in range(50):
        a = rng.normal(0, 1, 20)
        b = rng.normal(rng.uniform(0, 1.5), 1, 20)
        _, p_asym = assoc.ks_two_sample(a, b)
        _, p_exact = assoc.ks_two_sample(a, b, method="exact", n_permutations=100_000, seed=i)
        gaps.append(abs(p_asym - p_exact))
    gaps = np.array(gaps)

    hits = 0
    for _ in range(2000):
        hits += assoc.ks_two_sample(rng.normal(size=100), rng.normal(size=100))[1] < 0.05
    frac = hits / 2000
    elapsed = time.perf_counter() - t0
    checks = {
        "hand fixtures for D and rho": fixtures,
        f"asymptotic vs exact p max gap {gaps.max():.3f} <= 0.02 ({int((gaps > 0.02).sum())}/50 pairs exceed)":
            bool(gaps.max() <= 0.02),
        f"null calibration {frac:.4f} in [0.03, 0.07]": 0.03 <= frac <= 0.07,
        "runtime < 120 s": elapsed < 120,
    }
    assert acceptance(5, checks, elapsed), checks


# ---------------------------------------------------------------- 6

def _one_column_cohort(values):
    rows = [CohortRow(f"s{i}", f"p{i}", "F", {"g": float(v)}) for i, v in enumerate(values)]
    return CohortTable(("g",), rows)


def test_criterion_6_protocol(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    tails = {}
    for n in (990, 1000):
        ss = assoc.ScoreSet("shape", "", "F", tuple(f"s{i}" for i in range(n)), np.arange(n, dtype=float)[:, None],
                            np.array([0.5]))
        (r,) = assoc.scan_associations([ss], _one_column_cohort(rng.normal(size=n)), percentile_source="self")
        tails[n] = r
    strict = assoc.split_tails(["a", "b", "c", "d", "e"], [1.0, 1.0, 2.0, 3.0, 3.0], (1.0, 3.0))

    ph = generate(PhantomSpec(seed=6, n_scans=400, sex="F", modes=("d_fat",), width=73, height=100))
    shape = build_shape_model(ph.point_sets, "F")
    tex = build_texture_model(ph.images["d_fat"], ph.point_sets, shape, ph.triangulation, target_long_side=48)
    app = build_appearance_model(shape, tex, ph.point_sets, ph.images["d_fat"])
    ss = assoc.ScoreSet.from_model(app, "appearance", ph.scan_ids,
                                   project_appearance(app, ph.point_sets, ph.images["d_fat"]))
    results = assoc.scan_associations([ss], ph.cohort, alpha_pinned=4.1e-6, min_tail=30)
    pair_iff = all(len(assoc.representative_images(app, ss, r)) == (2 if r.significant else 1)
                   for r in results if not r.skipped)
    elapsed = time.perf_counter() - t0
    checks = {
        "n_low=99 skips with tail<100": tails[990].n_low == 99 and tails[990].skipped
                                        and tails[990].skip_reason == "tail<100",
        "n_low=100 is tested": tails[1000].n_low == 100 and not tails[1000].skipped,
        "strict tails": strict.low == () and strict.high == (),
        "pinned alpha 4.1e-6 on every row": bool(results) and all(r.alpha_adjusted == 4.1e-6 for r in results),
        "significant rows exist for the pair rule": any(r.significant for r in results),
        "pair iff significant": pair_iff,
        "runtime < 10 s": elapsed < 10,
    }
    assert acceptance(6, checks, elapsed), checks


# ---------------------------------------------------------------- 7

POWER_BIOMARKERS = (
    BiomarkerRecipe("latent_marker", (1.0, 0.0, 0.0), 0.5),
    BiomarkerRecipe("independent", (0.0, 0.0, 0.0), 1.0),
)


def power_run(seed):
    spec = PhantomSpec(seed=seed, n_scans=2000, sex="F", modes=("d_fat",), width=73, height=100,
                       biomarkers=POWER_BIOMARKERS)
    ph = generate(spec)
    fit = dict(solver="randomized", seed=seed)
    shape = build_shape_model(ph.point_sets, "F", **fit)
    tex = build_texture_model(ph.images["d_fat"], ph.point_sets, shape, ph.triangulation, target_long_side=48, **fit)
    app = build_appearance_model(shape, tex, ph.point_sets, ph.images["d_fat"], **fit)
    scores = project_appearance(app, ph.point_sets, ph.images["d_fat"])
    corr = [abs(np.corrcoef(scores[:, j], ph.latents[:, 0])[0, 1]) for j in range(app.k)]
    aligned = int(np.argmax(corr)) + 1
    ss = assoc.ScoreSet.from_model(app, "appearance", ph.scan_ids, scores)
    results = assoc.scan_associations([ss], ph.cohort, alpha_pinned=1e-4)
    hit = any(r.significant for r in results if r.biomarker == "latent_marker" and r.component == aligned)
    false = any(r.significant for r in results if r.biomarker == "independent")
    return hit, false


@pytest.mark.slow
def test_criterion_7_end_to_end_power(acceptance):
    t0 = time.perf_counter()
    runs = [power_run(seed) for seed in range(20)]
    hits = sum(h for h, _ in runs)
    false = sum(f for _, f in runs)
    elapsed = time.perf_counter() - t0
    checks = {
        f"latent-aligned component flagged {hits}/20 >= 19": hits >= 19,
        f"independent biomarker flagged {false}/20 <= 2": false <= 2,
        "runtime < 300 s": elapsed < 300,
    }
    assert acceptance(7, checks, elapsed), checks


# ---------------------------------------------------------------- 8

SCALE_SCRIPT = textwrap.dedent("""
    import json, resource, time
    import numpy as np
    from samforge.phantoms import PhantomSpec, generate
    from samforge.shape import build_shape_model
    from samforge.texture import build_texture_model

    t0 = time.perf_counter()
    ph = generate(PhantomSpec(seed=8, n_scans=2000, sex="F", modes=("d_fat",)))
    shape = build_shape_model(ph.point_sets, "F", solver="randomized", seed=8)
    model = build_texture_model(ph.images["d_fat"], ph.point_sets, shape, ph.triangulation,
                                target_long_side=192, solver="randomized", seed=8)
    elapsed = time.perf_counter() - t0
    m = model.pca
    frac = np.cumsum(m.eigenvalues) / m.total_variance
    print(json.dumps({
        "elapsed": elapsed,
        "maxrss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
        "frame": [model.frame.width, model.frame.height],
        "d": int(m.dim), "k": int(m.k),
        "orthonormal": float(np.abs(m.components.T @ m.components - np.eye(m.k)).max()),
        "sorted_positive": bool(np.all(np.diff(m.eigenvalues) <= 0) and np.all(m.eigenvalues > 0)),
        "retained": float(frac[-1]),
        "prefix": float(frac[-2]) if m.k > 1 else 0.0,
        "mask_matches": bool(m.dim == model.frame.n_pixels),
    }))
""")


@pytest.mark.slow
def test_criterion_8_scale_rehearsal(acceptance):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-c", SCALE_SCRIPT], capture_output=True, text=True, check=True)
    r = json.loads(proc.stdout.strip().splitlines()[-1])
    elapsed = time.perf_counter() - t0
    gb = r["maxrss_kb"] / 1024**2
    checks = {
        f"frame {r['frame'][0]}x{r['frame'][1]} (d={r['d']})": r["frame"] == [128, 192] and r["mask_matches"],
        f"fit time {r['elapsed']:.0f} s < 300": r["elapsed"] < 300,
        f"peak memory {gb:.2f} GB < 4": gb < 4,
        f"orthonormal ({r['orthonormal']:.1e})": r["orthonormal"] < 1e-8,
        "eigenvalues positive and sorted": r["sorted_positive"],
        f"k={r['k']} truncation ({r['retained']:.4f} >= 0.95 > {r['prefix']:.4f})":
            r["retained"] >= 0.95 * (1 - 1e-10) and r["prefix"] < 0.95,
    }
    assert acceptance(8, checks, elapsed), checks


# ---------------------------------------------------------------- 9

def test_criterion_9_persistence(acceptance, tmp_path):
    t0 = time.perf_counter()
    ph = generate(PhantomSpec(seed=9, n_scans=60, sex="F", modes=("d_fat",)))
    shape = build_shape_model(ph.point_sets, "F")
    tex = build_texture_model(ph.images["d_fat"], ph.point_sets, shape, ph.triangulation, target_long_side=64)
    app = build_appearance_model(shape, tex, ph.point_sets, ph.images["d_fat"])
    exact = {}
    for name, model in (("shape", shape), ("texture", tex), ("appearance", app)):
        path = tmp_path / f"{name}.samm"
        save_model(model, path)
        back = load_model(path)
        save_model(back, tmp_path / f"{name}_again.samm")
        same_bytes = path.read_bytes() == (tmp_path / f"{name}_again.samm").read_bytes()
        same_arrays = all(np.array_equal(getattr(back.pca, f), getattr(model.pca, f))
                          for f in ("mean", "components", "eigenvalues"))
        exact[name] = same_bytes and same_arrays and type(back) is type(model)

    corpus = tmp_path / "corpus"
    main(["synth", "--n", "40", "--seed", "9", "--modes", "d_fat", "--out", str(corpus)])
    outputs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        main(["build-shape", "--in", str(corpus), "--sex", "M", "--seed", "9", "--out", str(out)])
        main(["project", "--model", str(out / "shape_M.samm"), "--in", str(corpus), "--out", str(out)])
        main(["associate", "--model", str(out / "shape_M.samm"), "--in", str(corpus), "--min-tail", "2",
              "--out", str(out)])
        outputs.append([(out / f).read_bytes() for f in ("scores_shape_M.csv", "associations.csv",
                                                         "variance_table.csv", "shape_M.samm")])
    elapsed = time.perf_counter() - t0
    checks = {f"{k} model bit-exact round trip": v for k, v in exact.items()}
    checks["identical config+seed -> byte-identical outputs"] = outputs[0] == outputs[1]
    assert acceptance(9, checks, elapsed), checks
