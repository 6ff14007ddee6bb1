"""Flat run configuration shared by every subcommand."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .descriptor import DaisyParams
from .heightmap import LabelSet, MrfConfig
from .tracklets import TrackletConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # paths, relative to the directory of the config file unless absolute
    run_dir: str = "."
    calibration: str = "calibration.json"
    calib_inputs: str = "calib_inputs.json"
    frames_dir: str = "frames"
    heightmaps_dir: str = "heightmaps"
    detections: str = "detections.txt"
    tracklets: str = "tracklets.txt"
    truth: str = "truth.txt"
    n_frames: int = 0  # 0: every frame found in frames_dir
    reference: int = 0
    seed: int = 0
    workers: int = 1
    # calibration
    laser_01: float | None = None  # m
    laser_02: float | None = None  # m; only used as a cross-check when triple matches exist
    epipolar_threshold: float = 2.0  # px
    # label set
    h_min: float = 140.0
    h_max: float = 200.0
    delta_h: float = 2.5
    # mrf
    lam: float = 0.07
    K: float = 4.0
    K_data_u: float | None = None
    data_u_percentile: float = 10.0
    K_V_u: float | None = None
    bp_iterations: int = 50
    head_length: float = 25.0
    h_bar: float | None = None
    # descriptor
    daisy_radius: float = 15.0
    daisy_rings: int = 3
    daisy_histograms: int = 8
    daisy_orientations: int = 8
    # tracklets and evaluation
    theta_d: float = 0.20
    theta_h: float = 15.0
    theta_l: int = 1
    peak_radius: float = 0.30
    match_radius: float = 0.30
    # synthetic scene generation
    synth_scene: str = "dense"  # dense | sparse
    synth_pedestrians: int = 10
    synth_frames: int = 3
    synth_speed: float = 0.08  # m per frame
    synth_noise: float = 0.3  # px, on sampled matches
    synth_outliers: float = 0.2
    synth_n_ground: int = 150
    synth_n_body: int = 150

    def __post_init__(self):
        try:
            self.labels()
            self.mrf()
            self.daisy()
            self.tracking()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.n_frames < 0 or self.synth_frames < 1 or self.synth_pedestrians < 0:
            raise ConfigError("frame and pedestrian counts must be non-negative")
        if self.match_radius <= 0 or self.epipolar_threshold <= 0:
            raise ConfigError("match_radius and epipolar_threshold must be positive")
        if self.synth_scene not in ("dense", "sparse"):
            raise ConfigError("synth_scene must be 'dense' or 'sparse'")
        if not 0 <= self.synth_outliers < 1 or self.synth_noise < 0:
            raise ConfigError("synth_outliers must be in [0, 1) and synth_noise >= 0")
        for name in ("laser_01", "laser_02"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")

    def labels(self) -> LabelSet:
        return LabelSet(h_min=self.h_min, h_max=self.h_max, delta_h=self.delta_h)

    def mrf(self) -> MrfConfig:
        return MrfConfig(lam=self.lam, K=self.K, K_data_u=self.K_data_u, data_u_percentile=self.data_u_percentile,
                         K_V_u=self.K_V_u, iterations=self.bp_iterations, head_length=self.head_length,
                         h_bar=self.h_bar)

    def daisy(self) -> DaisyParams:
        return DaisyParams(radius=self.daisy_radius, rings=self.daisy_rings, histograms=self.daisy_histograms,
                           orientations=self.daisy_orientations)

    def tracking(self) -> TrackletConfig:
        return TrackletConfig(theta_d=self.theta_d, theta_h=self.theta_h, theta_l=self.theta_l,
                              peak_radius=self.peak_radius)

    def path(self, name: str) -> Path:
        return Path(self.run_dir) / getattr(self, name)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return _build(replace, self, kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value):
    t = _TYPES[name]
    if value is None:
        if "None" in t:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if t.startswith("float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if t.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if t.startswith("str"):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} as {t}") from None
    return value


def _build(fn, *args):
    *head, kw = args
    unknown = sorted(set(kw) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    kw = {k: _coerce(k, v) for k, v in kw.items()}
    try:
        return fn(*head, **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def from_mapping(d: dict, base_dir: str | Path | None = None) -> RunConfig:
    if d is None:
        d = {}
    if not isinstance(d, dict) or any(isinstance(v, (dict, list)) for v in d.values()):
        raise ConfigError("configuration must be a flat mapping of key: value")
    cfg = _build(RunConfig, dict(d))
    if base_dir is not None and not Path(cfg.run_dir).is_absolute():
        cfg = replace(cfg, run_dir=str(Path(base_dir) / cfg.run_dir))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e.strerror}") from None
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_mapping(d, base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(asdict(cfg), sort_keys=False, default_flow_style=False)
