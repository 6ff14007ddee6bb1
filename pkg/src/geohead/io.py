"""File formats: calibration JSON, match tables, height-map PNGs, images and result tables."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, HomographyFamily, RelativePose, VerticalFrame
from .heightmap import HeightMap, LabelSet
from .tracklets import Detection, TrackletSet


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------------
# calibration


def _arr(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def _num(v):
    """Plain Python scalar for numpy scalars, so ``repr`` stays readable."""
    return v.item() if isinstance(v, np.generic) else v


def save_calib_inputs(path, intrinsics: list[CameraIntrinsics], frames: list[VerticalFrame]) -> None:
    """Per-camera intrinsics and the (unscaled) vertical vanishing point and vanishing line."""
    d = {"cameras": [{"intrinsics": asdict(K), "v": _arr(f.v), "l": _arr(f.l)} for K, f in zip(intrinsics, frames)]}
    Path(path).write_text(json.dumps(d, indent=1) + "\n")


def load_calib_inputs(path) -> tuple[list[CameraIntrinsics], list[VerticalFrame]]:
    try:
        d = json.loads(Path(path).read_text())
        Ks = [CameraIntrinsics(**c["intrinsics"]) for c in d["cameras"]]
        frames = [VerticalFrame.oriented(c["v"], c["l"]) for c in d["cameras"]]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed calibration inputs ({e})") from None
    return Ks, frames


def save_calibration(path, intrinsics: list[CameraIntrinsics], pairs: list[dict], reference: int = 0,
                     extra: dict | None = None) -> None:
    """``pairs`` items: ``i, j, F, R, t, H0, v_i, l_i, alpha_i, v_j, l_j, alpha_j`` plus ``diagnostics``."""
    d = {
        "reference": reference,
        "cameras": [asdict(K) for K in intrinsics],
        "pairs": [
            {k: (_arr(v) if isinstance(v, np.ndarray) else v) for k, v in p.items()}
            for p in pairs
        ],
    }
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=False) + "\n")


class Calibration:
    """Loaded calibration: intrinsics plus one homography family and pose per reference pair."""

    def __init__(self, d: dict):
        self.raw = d
        self.reference = int(d["reference"])
        self.intrinsics = [CameraIntrinsics(**c) for c in d["cameras"]]
        self.families: dict[int, HomographyFamily] = {}
        self.poses: dict[int, RelativePose] = {}
        for p in d["pairs"]:
            i, j = int(p["i"]), int(p["j"])
            if i != self.reference:
                continue
            fi = VerticalFrame(v=p["v_i"], l=p["l_i"], alpha=p["alpha_i"])
            fj = VerticalFrame(v=p["v_j"], l=p["l_j"], alpha=p["alpha_j"])
            self.families[j] = HomographyFamily(H0=np.array(p["H0"]), frame_i=fi, frame_j=fj, F=np.array(p["F"]))
            self.poses[j] = RelativePose(R=np.array(p["R"]), t=np.array(p["t"]))

    @property
    def neighbours(self) -> list[int]:
        return sorted(self.families)

    @classmethod
    def load(cls, path) -> "Calibration":
        try:
            return cls(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed calibration ({e})") from None


# ----------------------------------------------------------------------------
# matches


def save_matches(path, p_i, p_j, triple_id=None) -> None:
    """One match per line: ``u_i v_i u_j v_j triple_id`` (``-1`` when not part of a triple)."""
    p_i, p_j = np.atleast_2d(p_i), np.atleast_2d(p_j)
    tid = np.full(len(p_i), -1) if triple_id is None else np.asarray(triple_id)
    with open(path, "w") as f:
        f.write("# u_i v_i u_j v_j triple_id\n")
        for a, b, t in zip(p_i, p_j, tid):
            f.write(f"{float(a[0])!r} {float(a[1])!r} {float(b[0])!r} {float(b[1])!r} {int(t)}\n")


def load_matches(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise FormatError(f"{path}:{n}: expected 4 or 5 columns, got {len(parts)}")
            try:
                vals = [float(v) for v in parts[:4]] + [int(parts[4]) if len(parts) == 5 else -1]
            except ValueError:
                raise FormatError(f"{path}:{n}: not a number") from None
            rows.append(vals)
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=int)
    a = np.array(rows)
    return a[:, 0:2], a[:, 2:4], a[:, 4].astype(int)


# ----------------------------------------------------------------------------
# images and height buffers


def save_gray(path, image) -> None:
    """8-bit portable graymap; values are rounded and clipped to [0, 255]."""
    img = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")


def load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def save_heights(path, heights) -> None:
    np.save(path, np.asarray(heights, dtype=np.float32))


def load_heights(path) -> np.ndarray:
    return np.load(path)


# ----------------------------------------------------------------------------
# height maps


def save_heightmap(path, hmap: HeightMap, lam: float, extra: dict | None = None) -> None:
    """16-bit PNG, 0 for unknown and ``k`` for ``h_min + (k - 1) delta_h``, plus a ``.txt`` sidecar."""
    ls = hmap.labelset
    lab = np.asarray(hmap.labels)
    code = np.where(lab == ls.unknown, 0, lab + 1).astype(np.uint16)
    Image.fromarray(code).save(path, format="PNG")
    meta = {"h_min": ls.h_min, "h_max": ls.h_max, "delta_h": ls.delta_h, "lambda": lam, "energy": hmap.energy}
    if extra:
        meta.update(extra)
    Path(path).with_suffix(".txt").write_text("".join(f"{k} {_num(v)!r}\n" for k, v in meta.items()))


def load_heightmap(path) -> HeightMap:
    side = Path(path).with_suffix(".txt")
    try:
        meta = {}
        for line in side.read_text().splitlines():
            if line.strip():
                k, v = line.split(None, 1)
                meta[k] = v.strip()
        ls = LabelSet(h_min=float(meta["h_min"]), h_max=float(meta["h_max"]), delta_h=float(meta["delta_h"]))
        energy = float(meta.get("energy", "nan"))
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"{side}: malformed height-map header ({e})") from None
    with Image.open(path) as im:
        code = np.asarray(im).astype(np.int64)
    if code.max(initial=0) > ls.n_heights:
        raise FormatError(f"{path}: label code exceeds the label set")
    lab = np.where(code == 0, ls.unknown, code - 1)
    return HeightMap(labels=lab, energy=energy, labelset=ls)


_RAMP = np.array([[0.10, 0.20, 0.90], [0.10, 0.80, 0.90], [0.20, 0.85, 0.20], [0.95, 0.85, 0.10],
                  [0.90, 0.15, 0.10]])


def overlay(image, hmap: HeightMap, alpha: float = 0.6) -> np.ndarray:
    """RGB uint8 image: the gray frame with labeled pixels tinted from blue (h_min) to red (h_max)."""
    gray = np.clip(np.asarray(image, dtype=float), 0, 255) / 255.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    h = hmap.heights()
    ls = hmap.labelset
    known = np.isfinite(h)
    if known.any():
        t = (h[known] - ls.h_min) / max(ls.h_max - ls.h_min, 1e-9) * (len(_RAMP) - 1)
        col = np.column_stack([np.interp(t, np.arange(len(_RAMP)), _RAMP[:, c]) for c in range(3)])
        rgb[known] = (1 - alpha) * rgb[known] + alpha * col
    return np.rint(rgb * 255).astype(np.uint8)


def save_rgb(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ----------------------------------------------------------------------------
# detections, tracklets and ground truth


def save_detections(path, detections: list[Detection]) -> None:
    with open(path, "w") as f:
        f.write("# frame_id tracklet_id x_m y_m h_cm\n")
        for d in detections:
            f.write(f"{d.frame} {d.tracklet} {d.x:.4f} {d.y:.4f} {d.h:.1f}\n")


def load_detections(path) -> list[Detection]:
    out = []
    for n, row in _rows(path, 5):
        out.append(Detection(frame=int(row[0]), tracklet=int(row[1]), x=float(row[2]), y=float(row[3]),
                             h=float(row[4])))
    return out


def save_tracklet_summary(path, state: TrackletSet) -> None:
    with open(path, "w") as f:
        f.write("# id start_frame end_frame length mean_h_cm\n")
        for t in state.tracklets:
            f.write(f"{t.id} {t.frames[0]} {t.frames[-1]} {t.length} {t.mean_height:.2f}\n")


def save_truth(path, rows) -> None:
    """Rows of ``(frame_id, person_id, X, Y, Z, h_cm)``.

    ``X, Y, Z`` is the ground point under the head in reference camera
    coordinates (m), so evaluation can place it in whichever ground chart the
    calibration defines.
    """
    with open(path, "w") as f:
        f.write("# frame_id person_id X_m Y_m Z_m h_cm\n")
        for fr, pid, x, y, z, h in rows:
            f.write(f"{int(fr)} {int(pid)} {x:.5f} {y:.5f} {z:.5f} {h:.1f}\n")


def load_truth(path) -> list[tuple]:
    return [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5])) for _, r in _rows(path, 6)]


def _rows(path, ncol: int):
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != ncol:
                raise FormatError(f"{path}:{n}: expected {ncol} columns, got {len(parts)}")
            try:
                yield n, [float(p) for p in parts]
            except ValueError:
                raise FormatError(f"{path}:{n}: not a number") from None
