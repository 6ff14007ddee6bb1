"""Stage drivers behind the command line: synth, calibrate, heightmap, track, eval."""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from . import synthetic as syn
from .bp import lbp_minsum
from .calibration import PointMatchSet, calibrate_pair, estimate_fundamental, unit_pose
from .config import ConfigError, RunConfig, dump_config
from .descriptor import compute_field
from .geometry import inject_metric_scale, propagate_scale_triplet
from .heightmap import build_data_cost, build_gradient_map
from .tracklets import GroundChart, MatchScore, find_peaks_and_cluster, match_detections, project_to_ground, track_sequence

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``diagnostics`` holds what was computed so far."""

    def __init__(self, stage: str, message: str, diagnostics: dict | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.diagnostics = diagnostics or {}


def _frame_path(cfg: RunConfig, t: int, cam: int, kind: str = "") -> Path:
    suffix = {"": ".pgm", "height": "_height.npy", "owner": "_owner.npy"}[kind]
    return cfg.path("frames_dir") / f"f{t:03d}_c{cam}{suffix}"


def list_frames(cfg: RunConfig) -> list[int]:
    d = cfg.path("frames_dir")
    if not d.is_dir():
        raise ConfigError(f"frames directory {d} does not exist")
    found = sorted({int(m.group(1)) for p in d.iterdir() if (m := re.fullmatch(r"f(\d+)_c\d+\.pgm", p.name))})
    if cfg.n_frames:
        found = found[: cfg.n_frames]
    if not found:
        raise ConfigError(f"no frames in {d}")
    return found


def _matches_path(cfg: RunConfig, i: int, j: int) -> Path:
    return Path(cfg.run_dir) / f"matches_{i}{j}.txt"


# ----------------------------------------------------------------------------
# synth


def build_scene(cfg: RunConfig) -> syn.SceneSpec:
    cams = syn.crowd_rig()
    gap = 0.75 if cfg.synth_scene == "dense" else 1.0
    peds = syn.random_pedestrians(cfg.synth_pedestrians, syn.CROWD_REGION, seed=cfg.seed, min_gap=gap,
                                  speed=cfg.synth_speed, cameras=cams, frames=cfg.synth_frames)
    return syn.SceneSpec(pedestrians=peds, cameras=cams, ground_seed=cfg.seed)


def truth_rows(scene: syn.SceneSpec, frames: int, reference: int = 0) -> list[tuple]:
    """Ground points under every head, in reference camera coordinates."""
    cam = scene.cameras[reference]
    rows = []
    for t in range(frames):
        for k, p in enumerate(scene.pedestrians):
            x, y = p.position(t)
            X = cam.to_camera([x, y, 0.0])[0]
            rows.append((t, k, float(X[0]), float(X[1]), float(X[2]), p.height))
    return rows


def run_synth(cfg: RunConfig) -> syn.SceneSpec:
    """Render a synthetic sequence with its calibration inputs, matches and ground truth."""
    run = Path(cfg.run_dir)
    cfg.path("frames_dir").mkdir(parents=True, exist_ok=True)
    scene = build_scene(cfg)
    scene.save(run / "scene.json")
    n_cam = len(scene.cameras)
    for t in range(cfg.synth_frames):
        for c in range(n_cam):
            view = syn.render(scene, c, frame=t)
            io.save_gray(_frame_path(cfg, t, c), view.image)
            io.save_heights(_frame_path(cfg, t, c, "height"), view.height)
            np.save(_frame_path(cfg, t, c, "owner"), view.owner.astype(np.int16))
    ref = cfg.reference
    others = [c for c in range(n_cam) if c != ref]
    ms = syn.sample_matches(scene, [ref] + others, n_ground=cfg.synth_n_ground, n_body=cfg.synth_n_body,
                            noise=cfg.synth_noise, outlier_fraction=cfg.synth_outliers, seed=cfg.seed)
    tid = np.arange(len(ms.world))
    for k, c in enumerate(others, start=1):
        io.save_matches(_matches_path(cfg, ref, c), ms.pts[0], ms.pts[k], tid)
    frames = [syn.true_frame(c) for c in scene.cameras]
    # vanishing geometry is a calibration input; its metric scale is not
    io.save_calib_inputs(cfg.path("calib_inputs"), [c.intrinsics for c in scene.cameras],
                         [f.with_alpha(0.0) for f in frames])
    io.save_truth(cfg.path("truth"), truth_rows(scene, cfg.synth_frames, ref))
    centers = [c.center for c in scene.cameras]
    laser = {f"laser_0{c}": round(float(np.linalg.norm(centers[c] - centers[ref])), 4) for c in others if c in (1, 2)}
    out = replace(cfg, run_dir=".", **laser)
    (run / "run.yaml").write_text(dump_config(out))
    log.info("synth: %d pedestrians, %d frames, %d matches", len(scene.pedestrians), cfg.synth_frames, len(ms.world))
    return scene


# ----------------------------------------------------------------------------
# calibrate


def _stage(name, fn, diag):
    try:
        return fn()
    except (StageError, ConfigError):
        raise
    except Exception as e:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, f"{type(e).__name__}: {e}", diag) from e


def run_calibrate(cfg: RunConfig) -> dict:
    """Calibrate the reference camera against each neighbour and write the calibration file.

    The first pair is scaled by ``laser_01``; the second pair's scale comes
    from triple matches when at least eight exist, otherwise from
    ``laser_02``.
    """
    Ks, frames = io.load_calib_inputs(cfg.path("calib_inputs"))
    ref = cfg.reference
    others = [c for c in range(len(Ks)) if c != ref]
    if len(others) < 1:
        raise ConfigError("calibration needs at least two cameras")
    if cfg.laser_01 is None:
        raise ConfigError("laser_01 is required (laser-measured distance between cameras 0 and 1)")
    diag: dict = {}
    matches = {}
    for c in others:
        p = _matches_path(cfg, ref, c)
        if not p.exists():
            raise ConfigError(f"missing match file {p}")
        a, b, tid = io.load_matches(p)
        matches[c] = PointMatchSet(a, b, tid)

    first = others[0]
    cal = {first: _stage(f"pair {ref}-{first}", lambda: calibrate_pair(
        matches[first], Ks[ref], Ks[first], frames[ref], frames[first], cfg.laser_01,
        epipolar_threshold=cfg.epipolar_threshold, seed=cfg.seed), diag)}
    diag[f"{ref}-{first}"] = cal[first].diagnostics

    for c in others[1:]:
        m = matches[c]

        def scaled_pose(c=c, m=m):
            fit = estimate_fundamental(m, threshold=cfg.epipolar_threshold, seed=cfg.seed)
            inl = np.flatnonzero(fit.inliers)
            unit = unit_pose(fit, m, Ks[ref], Ks[c], frames[ref], frames[c])
            m1 = matches[first]
            ids = np.intersect1d(m.triple_id[inl], m1.triple_id[cal[first].fundamental.inliers])
            ids = ids[ids >= 0]
            if len(ids) >= 8:
                a = {t: n for n, t in enumerate(m1.triple_id)}
                b = {t: n for n, t in enumerate(m.triple_id)}
                i1 = np.array([a[t] for t in ids])
                i2 = np.array([b[t] for t in ids])
                s, pose = propagate_scale_triplet(cal[first].pose, unit, m1.p_i[i1], m1.p_j[i1], m.p_j[i2],
                                                  Ks[ref], Ks[first], Ks[c])
                info = {"triple_matches": int(len(ids)), "scale_factor": s,
                        "baseline": float(np.linalg.norm(pose.t))}
                if cfg.laser_02 is not None:
                    info["laser_baseline"] = cfg.laser_02
                log.info("triplet scale propagation %d-%d-%d: %s", ref, first, c, info)
                return pose, info
            if cfg.laser_02 is None:
                raise ConfigError("laser_02 is required when fewer than 8 triple matches are available")
            return inject_metric_scale(unit, cfg.laser_02), {"triple_matches": int(len(ids))}

        pose, info = _stage(f"scale {ref}-{c}", scaled_pose, diag)
        diag[f"scale {ref}-{c}"] = info
        cal[c] = _stage(f"pair {ref}-{c}", lambda c=c, pose=pose: calibrate_pair(
            matches[c], Ks[ref], Ks[c], frames[ref], frames[c], float(np.linalg.norm(pose.t)), pose=pose,
            epipolar_threshold=cfg.epipolar_threshold, seed=cfg.seed), diag)
        diag[f"{ref}-{c}"] = cal[c].diagnostics

    pairs = []
    for c in others:
        pc = cal[c]
        pairs.append({"i": ref, "j": c, "F": pc.F, "R": pc.pose.R, "t": pc.pose.t, "H0": pc.H0,
                      "v_i": frames[ref].v, "l_i": frames[ref].l, "alpha_i": pc.alpha_i,
                      "v_j": frames[c].v, "l_j": frames[c].l, "alpha_j": pc.alpha_j,
                      "diagnostics": pc.diagnostics})
    io.save_calibration(cfg.path("calibration"), Ks, pairs, reference=ref)
    for k, v in diag.items():
        log.info("calibration %s: %s", k, v)
    return diag


# ----------------------------------------------------------------------------
# heightmap


@dataclass
class FrameResult:
    frame: int
    hmap: object
    k_data_u: float
    seconds: float


def compute_heightmap(images: list[np.ndarray], calib: io.Calibration, cfg: RunConfig, gmap=None):
    """Height map of the reference view from one synchronized set of images (indexed by camera)."""
    ref = calib.reference
    nb = calib.neighbours
    shape = images[ref].shape
    for c in [ref] + nb:
        K = calib.intrinsics[c]
        if images[c].shape != (K.height, K.width):
            raise ValueError(f"camera {c}: image is {images[c].shape[::-1]}, calibration says {K.width}x{K.height}")
    params = cfg.daisy()
    fields = {c: compute_field(images[c], params, workers=cfg.workers) for c in [ref] + nb}
    labels, mrf = cfg.labels(), cfg.mrf()
    data = build_data_cost(fields[ref], [fields[c] for c in nb], [calib.families[c] for c in nb], labels, mrf,
                           workers=cfg.workers)
    if gmap is None:
        gmap = build_gradient_map(calib.families[nb[0]].frame_i, shape, labels, mrf)
    hmap = lbp_minsum(data, gmap, mrf, labels, workers=cfg.workers)
    return hmap, data, gmap


def run_heightmap(cfg: RunConfig, frames: list[int] | None = None) -> list[FrameResult]:
    calib = io.Calibration.load(cfg.path("calibration"))
    frames = list_frames(cfg) if frames is None else frames
    out_dir = cfg.path("heightmaps_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    n_cam = len(calib.intrinsics)
    gmap = None
    results = []
    for t in frames:
        t0 = time.perf_counter()
        paths = [_frame_path(cfg, t, c) for c in range(n_cam)]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f"missing frame images: {', '.join(missing)}")
        images = [io.load_gray(p) for p in paths]
        hmap, data, gmap = _stage(f"heightmap frame {t}", lambda: compute_heightmap(images, calib, cfg, gmap), {})
        base = out_dir / f"f{t:03d}"
        io.save_heightmap(base.with_suffix(".png"), hmap, cfg.lam, {"k_data_u": data.k_data_u})
        io.save_rgb(out_dir / f"f{t:03d}_overlay.png", io.overlay(images[calib.reference], hmap))
        with open(base.with_suffix(".log"), "w") as f:
            f.write(f"# frame {t} lambda {cfg.lam!r} K {cfg.K!r} k_data_u {float(data.k_data_u)!r}\n")
            f.write("# iteration energy\n")
            for k, e in enumerate(hmap.history, 1):
                f.write(f"{k} {float(e)!r}\n")
            f.write(f"final {float(hmap.energy)!r}\n")
        dt = time.perf_counter() - t0
        log.info("heightmap frame %d: energy %.4f, %d labeled pixels, %.1f s", t, hmap.energy,
                 int((hmap.labels != hmap.labelset.unknown).sum()), dt)
        results.append(FrameResult(frame=t, hmap=hmap, k_data_u=data.k_data_u, seconds=dt))
    return results


# ----------------------------------------------------------------------------
# track


def detect_clusters(hmap, calib: io.Calibration, cfg: RunConfig):
    ref = calib.reference
    j = calib.neighbours[0]
    fam = calib.families[j]
    chart = GroundChart.from_frame(fam.frame_i, calib.intrinsics[ref])
    pts = project_to_ground(hmap, fam, calib.poses[j], calib.intrinsics[ref], calib.intrinsics[j], chart)
    return find_peaks_and_cluster(pts, cfg.tracking())


def run_track(cfg: RunConfig, hmaps: dict | None = None):
    """Cluster every height map on the ground, link the clusters into tracklets and filter them."""
    calib = io.Calibration.load(cfg.path("calibration"))
    if hmaps is None:
        d = cfg.path("heightmaps_dir")
        files = sorted(d.glob("f[0-9][0-9][0-9].png")) if d.is_dir() else []
        if not files:
            raise ConfigError(f"no height maps in {d}")
        hmaps = {int(p.stem[1:]): io.load_heightmap(p) for p in files}
    frames = sorted(hmaps)
    per_frame = []
    for t in frames:
        clusters = _stage(f"track frame {t}", lambda: detect_clusters(hmaps[t], calib, cfg), {})
        per_frame.append([(c.x, c.y, c.h) for c in clusters])
        log.info("track frame %d: %d clusters", t, len(clusters))
    state, dets = track_sequence(per_frame, cfg.tracking())
    # track_sequence numbers frames from 0; restore the file frame ids
    dets = [replace(d, frame=frames[d.frame]) for d in dets]
    for tr in state.tracklets:
        tr.frames = [frames[f] for f in tr.frames]
    io.save_detections(cfg.path("detections"), dets)
    io.save_tracklet_summary(cfg.path("tracklets"), state)
    return state, dets


# ----------------------------------------------------------------------------
# eval


def head_top_mask(height, owner, scene: syn.SceneSpec, band: float = 10.0) -> np.ndarray:
    """Pixels showing the top ``band`` cm of a pedestrian."""
    m = np.zeros(np.shape(height), dtype=bool)
    for k, p in enumerate(scene.pedestrians):
        m |= (owner == k) & (height >= p.height - band)
    return m


def head_top_accuracy(hmap, height, owner, scene: syn.SceneSpec, tol: float = 5.0) -> float:
    """Fraction of head-top pixels labeled within ``tol`` cm of the true height."""
    m = head_top_mask(height, owner, scene)
    if not m.any():
        return float("nan")
    err = np.abs(hmap.heights()[m] - height[m])
    return float(np.mean(err <= tol))  # NaN (unknown) compares false


def evaluate(detections, truth_xy: dict, radius: float) -> MatchScore:
    """Sum of per-frame greedy matches; ``truth_xy`` maps frame id to an (N, 2) array."""
    total = MatchScore(0, 0, 0)
    for t in sorted(truth_xy):
        det = [(d.x, d.y) for d in detections if d.frame == t]
        s, _ = match_detections(det, truth_xy[t], radius)
        total = total + s
    return total


def truth_in_chart(truth, calib: io.Calibration) -> dict:
    ref = calib.reference
    chart = GroundChart.from_frame(calib.families[calib.neighbours[0]].frame_i, calib.intrinsics[ref])
    out = {}
    for t in sorted({r[0] for r in truth}):
        X = np.array([r[2:5] for r in truth if r[0] == t])
        out[t] = chart.to_chart(X)[:, :2]
    return out


def run_eval(cfg: RunConfig) -> dict:
    """Precision and recall of the detections against the ground truth, in the calibrated ground chart."""
    calib = io.Calibration.load(cfg.path("calibration"))
    dets = io.load_detections(cfg.path("detections"))
    truth = truth_in_chart(io.load_truth(cfg.path("truth")), calib)
    hm = cfg.path("heightmaps_dir")
    if hm.is_dir():
        done = {int(p.stem[1:]) for p in hm.glob("f[0-9][0-9][0-9].png")}
        if done:
            truth = {t: v for t, v in truth.items() if t in done}
    s = evaluate(dets, truth, cfg.match_radius)
    res = {"frames": len(truth), "tp": s.tp, "fp": s.fp, "fn": s.fn, "precision": s.precision,
           "recall": s.recall, "precision_undefined": s.undefined_precision, "match_radius": cfg.match_radius,
           "theta_l": cfg.theta_l}
    (Path(cfg.run_dir) / "eval.json").write_text(json.dumps(res, indent=1) + "\n")
    return res
